"""命令行端到端：gen-data → train → attack → ablate → report"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from attack_app import run
from core import orchestrator
from core.config_manager import load_config
from core.dataset import load_dataset
from core.embedder import load_model

TINY_CONFIG = """\
# 微型端到端配置
dataset.n_identities=6
dataset.images_per_identity=6
dataset.height=8
dataset.width=4
model.d_hidden=16
model.d_feat=8
model.epochs=30
model.batch_size=8
bank.n_clusters=3
uap.epochs=2
uap.batch_size=8
evo.generations=3
evo.k=8
evo.step_scale=8.0
logging.level=warning
"""


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("conf") / "tiny.conf"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, config_file):
    run_dir = tmp_path_factory.mktemp("run") / "nested" / "dir"
    assert run(["gen-data", "--config", str(config_file), "--out", str(run_dir)]) == 0
    assert run(["train", "--config", str(config_file), "--out", str(run_dir)]) == 0
    return run_dir


def _attack(config_file, run_dir, mode):
    assert run(["attack", "--config", str(config_file), "--out", str(run_dir), "--mode", mode]) == 0
    return run_dir / "attack" / mode


class TestGenData:

    def test_creates_directory_and_modalities(self, trained_run):
        dataset = load_dataset(trained_run / "data" / "dataset.mmreid")
        assert dataset.n_modalities == 4
        assert (trained_run / "data" / "config_echo.conf").exists()

    def test_same_seed_same_bytes(self, tmp_path, config_file):
        for name in ("a", "b"):
            assert run(["gen-data", "--config", str(config_file), "--out", str(tmp_path / name), "--seed", "5"]) == 0
        first = (tmp_path / "a" / "data" / "dataset.mmreid").read_bytes()
        assert first == (tmp_path / "b" / "data" / "dataset.mmreid").read_bytes()
        assert run(["gen-data", "--config", str(config_file), "--out", str(tmp_path / "c"), "--seed", "6"]) == 0
        assert first != (tmp_path / "c" / "data" / "dataset.mmreid").read_bytes()


class TestTrain:

    def test_checkpoints_and_metrics(self, trained_run):
        rows = _read_csv(trained_run / "models" / "train_metrics.csv")
        assert [int(row["modality"]) for row in rows] == [0, 1, 2, 3]
        for m in range(4):
            model = load_model(trained_run / "models" / f"model_m{m}.mmemb")
            assert model.modality_id == m

    def test_missing_dataset(self, tmp_path, config_file):
        assert run(["train", "--config", str(config_file), "--out", str(tmp_path / "empty")]) == 3


class TestAttack:

    def test_grad_only_has_no_eta_phase(self, trained_run, config_file):
        out = _attack(config_file, trained_run, "grad-only")
        phases = {row["phase"] for row in _read_csv(out / "metrics.csv")}
        assert phases == {"clean", "uap"}
        assert (out / "delta.mmuap").exists()
        assert not (out / "eta.mmeta").exists()

    def test_dual_layer_outputs(self, trained_run, config_file):
        out = _attack(config_file, trained_run, "dual-layer")
        rows = _read_csv(out / "metrics.csv")
        assert {row["phase"] for row in rows} == {"clean", "uap", "uap+eta"}
        assert {row["role"] for row in rows} == {"source", "auxiliary", "held-out"}
        assert len(_read_csv(out / "trace.csv")) == 3
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert summary["mode"] == "dual-layer"
        assert set(summary["timings"]) >= {"uap", "evolve", "evaluate"}
        assert (out / "config_echo.conf").exists()

    def test_dual_layer_reproducible(self, trained_run, config_file):
        first = _attack(config_file, trained_run, "dual-layer")
        metrics, eta = (first / "metrics.csv").read_bytes(), (first / "eta.mmeta").read_bytes()
        again = _attack(config_file, trained_run, "dual-layer")
        assert (again / "metrics.csv").read_bytes() == metrics
        assert (again / "eta.mmeta").read_bytes() == eta

    def test_evo_only_skips_gradient_layer(self, trained_run, config_file):
        out = _attack(config_file, trained_run, "evo-only")
        assert {row["phase"] for row in _read_csv(out / "metrics.csv")} == {"clean", "uap+eta"}

    def test_held_out_never_touched_before_evaluation(self, trained_run, config_file):
        cfg = load_config(config_file).to_experiment_config(trained_run)
        dataset = load_dataset(trained_run / "data" / "dataset.mmreid")
        store = orchestrator.ModelStore(trained_run)
        orchestrator.run_attack(cfg, dataset, store)
        assert cfg.held_out_modality not in store.accessed_in("uap")
        assert cfg.held_out_modality not in store.accessed_in("evolve")
        assert cfg.held_out_modality in store.accessed_in("evaluate")
        assert store.accessed_in("uap") == list(cfg.source_modalities)
        assert store.accessed_in("evolve") == list(cfg.auxiliary_modalities)

    def test_missing_checkpoints(self, tmp_path, config_file):
        assert run(["gen-data", "--config", str(config_file), "--out", str(tmp_path)]) == 0
        assert run(["attack", "--config", str(config_file), "--out", str(tmp_path)]) == 3

    def test_bad_config(self, tmp_path, trained_run):
        bad = tmp_path / "bad.conf"
        bad.write_text("evo.k=-4\n", encoding="utf-8")
        assert run(["attack", "--config", str(bad), "--out", str(trained_run)]) == 2


class TestSplitValidation:

    @pytest.mark.parametrize("extra", ["dataset.images_per_identity=2\n", "bank.n_clusters=7\n"])
    def test_rejected_before_any_output(self, tmp_path, extra):
        # 微型配置：6 个身份，每个身份1张图库图像
        conf = tmp_path / "bad.conf"
        conf.write_text(TINY_CONFIG + extra, encoding="utf-8")
        out = tmp_path / "run"
        assert run(["gen-data", "--config", str(conf), "--out", str(out)]) == 2
        assert not (out / "data").exists()

    def test_cluster_bound_at_gallery_size(self, tmp_path):
        conf = tmp_path / "edge.conf"
        conf.write_text(TINY_CONFIG + "bank.n_clusters=6\n", encoding="utf-8")
        out = tmp_path / "run"
        assert run(["gen-data", "--config", str(conf), "--out", str(out)]) == 0
        assert run(["train", "--config", str(conf), "--out", str(out)]) == 0
        assert run(["attack", "--config", str(conf), "--out", str(out), "--mode", "grad-only"]) == 0


class TestAblate:

    def test_single_cell_matches_attack(self, tmp_path, trained_run, config_file):
        grid = tmp_path / "grid.conf"
        grid.write_text(TINY_CONFIG + "ablate.k=8\n", encoding="utf-8")
        assert run(["ablate", "--config", str(grid), "--out", str(trained_run)]) == 0
        rows = _read_csv(trained_run / "ablate" / "ablation.csv")
        assert len(rows) == 1

        out = _attack(config_file, trained_run, "dual-layer")
        held = next(row for row in _read_csv(out / "metrics.csv")
                    if row["phase"] == "uap+eta" and row["role"] == "held-out")
        assert rows[0]["held_out_success_rate"] == held["success_rate"]
        assert rows[0]["held_out_rank-1"] == held["rank-1"]

    def test_grid_rows(self, tmp_path, trained_run):
        grid = tmp_path / "grid.conf"
        grid.write_text(TINY_CONFIG + "ablate.k=2,8\nablate.n_models=1,2\n", encoding="utf-8")
        assert run(["ablate", "--config", str(grid), "--out", str(trained_run)]) == 0
        rows = _read_csv(trained_run / "ablate" / "ablation.csv")
        assert [(row["k"], row["n_models"]) for row in rows] == [("2", "1"), ("2", "2"), ("8", "1"), ("8", "2")]
        assert all(int(row["eta_l0"]) <= int(row["k"]) for row in rows)

    def test_empty_grid(self, trained_run, config_file):
        assert run(["ablate", "--config", str(config_file), "--out", str(trained_run)]) == 2


class TestReport:

    def test_collects_metrics(self, trained_run, config_file, capsys):
        _attack(config_file, trained_run, "grad-only")
        assert run(["report", "--out", str(trained_run)]) == 0
        rows = _read_csv(trained_run / "report.csv")
        assert any(row["source"].startswith("attack") for row in rows)
        summary = json.loads((trained_run / "summary.json").read_text(encoding="utf-8"))
        assert summary["metrics"]
        assert summary["numpy"] == np.__version__
        assert "mAP" in capsys.readouterr().out

    def test_nothing_to_report(self, tmp_path):
        assert run(["report", "--out", str(tmp_path)]) == 3


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
# 进化层走满 ε 预算的默认规模配置
FULL_STEP_CONFIG = "evo.step_scale=8.0\n"


def _row(out, phase, role):
    return next(row for row in _read_csv(out / "metrics.csv") if row["phase"] == phase and row["role"] == role)


def _prepare(run_dir, *extra):
    assert run(["gen-data", "--out", str(run_dir), *extra]) == 0
    assert run(["train", "--out", str(run_dir), *extra]) == 0
    return run_dir


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    return _prepare(tmp_path_factory.mktemp("default"))


@pytest.mark.slow
class TestDefaultScale:

    def test_clean_rank1_gate(self, default_run):
        for row in _read_csv(default_run / "models" / "train_metrics.csv"):
            assert float(row["rank-1"]) >= 0.9

    def test_delta_collapses_source_rank1(self, default_run):
        assert run(["attack", "--out", str(default_run), "--mode", "grad-only"]) == 0
        out = default_run / "attack" / "grad-only"
        clean, attacked = _row(out, "clean", "source"), _row(out, "uap", "source")
        assert float(attacked["rank-1"]) <= 0.3 * float(clean["rank-1"])
        assert float(attacked["mAP"]) < float(clean["mAP"])

    def test_dual_layer_transfers_better_over_seeds(self, tmp_path):
        conf = tmp_path / "full_step.conf"
        conf.write_text(FULL_STEP_CONFIG, encoding="utf-8")
        not_worse = 0
        grad_success, dual_success = [], []
        for seed in range(5):
            run_dir = _prepare(tmp_path / f"seed{seed}", "--config", str(conf), "--seed", str(seed))
            for mode in ("grad-only", "dual-layer"):
                assert run(["attack", "--config", str(conf), "--out", str(run_dir), "--seed", str(seed),
                            "--mode", mode]) == 0
            grad = _row(run_dir / "attack" / "grad-only", "uap", "held-out")
            dual = _row(run_dir / "attack" / "dual-layer", "uap+eta", "held-out")
            not_worse += float(dual["rank-1"]) <= float(grad["rank-1"])
            grad_success.append(float(grad["success_rate"]))
            dual_success.append(float(dual["success_rate"]))
        assert not_worse >= 4
        assert np.mean(dual_success) > np.mean(grad_success)

    def test_success_grows_with_pixel_budget(self, default_run):
        monotone = 0
        for seed in range(3):
            assert run(["ablate", "--config", str(CONFIG_DIR / "ablate_k.conf"), "--out", str(default_run),
                        "--seed", str(seed)]) == 0
            rows = _read_csv(default_run / "ablate" / "ablation.csv")
            assert [int(row["k"]) for row in rows] == [8, 32, 128]
            rates = [float(row["aux_success_rate"]) for row in rows]
            monotone += all(b >= a for a, b in zip(rates, rates[1:]))
        assert monotone >= 2

    def test_wall_clock_grows_with_auxiliary_models(self, tmp_path):
        conf = CONFIG_DIR / "ablate_models.conf"
        run_dir = _prepare(tmp_path, "--config", str(conf))
        assert run(["ablate", "--config", str(conf), "--out", str(run_dir)]) == 0
        rows = _read_csv(run_dir / "ablate" / "ablation.csv")
        assert [int(row["n_models"]) for row in rows] == [1, 2, 3]
        seconds = [float(row["evolve_seconds"]) for row in rows]
        assert all(b > a for a, b in zip(seconds, seconds[1:]))
