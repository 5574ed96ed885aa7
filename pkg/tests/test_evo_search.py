"""进化层：η 叠加、目标向量、支配关系、非支配排序、遗传算子与 MMETA01"""

import itertools

import numpy as np
import pytest

from core.centroids import CentroidBank, nearest_farthest
from core.embedder import forward, forward_batch
from core.errors import ArtifactFormatError, ConfigError, ConstraintViolationError, ShapeMismatchError
from core.evo_search import (Constraints, EvalTarget, EvoConfig, ObjectiveVector, SparseIndividual, apply_eta,
                             crossover, dominates, evaluate, evolve, load_eta, mutate, nondominated_sort,
                             preference_key, random_individual, repair, save_eta, select_best, write_trace_csv)
from core.numerics import mahalanobis_sq

SHAPE = (8, 4, 3)


def _eta(positions, values, step_scale=1.0):
    return SparseIndividual(np.array(positions).reshape(-1, 3), np.array(values), step_scale)


def _obj(success, l2=1.0, d_tilde=0.5):
    return ObjectiveVector(d_tilde=d_tilde, s_tilde=1.0 - success, eta_l2=l2)


def _rated(success, rates, distance, l2):
    return ObjectiveVector(d_tilde=float(np.exp(-distance)), s_tilde=1.0 - success, eta_l2=l2,
                           total_distance=distance, model_rates=tuple(float(r) for r in rates))


@pytest.fixture(scope="module")
def targets(tiny_dataset, tiny_models, tiny_banks):
    return [EvalTarget.from_dataset(tiny_models[m], tiny_banks[m], tiny_dataset, m) for m in (1, 2)]


def _assert_feasible(ind, constraints):
    assert ind.l0 <= constraints.k
    assert set(ind.values.tolist()) <= {-1, 0, 1}
    assert len({tuple(p) for p in ind.positions.tolist()}) == len(ind)
    dense = constraints.delta + ind.dense(constraints.shape)
    assert np.abs(dense).max(initial=0.0) <= constraints.epsilon


class TestSparseIndividual:

    def test_norms(self):
        eta = _eta([[0, 0, 0], [1, 1, 1], [2, 2, 2]], [1, 0, -1], step_scale=2.0)
        assert eta.l0 == 2
        assert eta.l2 == pytest.approx(2.0 * np.sqrt(2.0))

    def test_duplicate_positions_rejected(self):
        with pytest.raises(ConstraintViolationError):
            _eta([[0, 0, 0], [0, 0, 0]], [1, -1])

    def test_non_ternary_rejected(self):
        with pytest.raises(ConstraintViolationError):
            _eta([[0, 0, 0]], [2])


class TestApplyEta:

    def test_empty_eta_is_delta_only(self, rng):
        img = rng.uniform(0, 255, size=SHAPE)
        delta = rng.uniform(-8, 8, size=SHAPE)
        np.testing.assert_array_equal(apply_eta(img, delta, SparseIndividual.empty(), 8.0),
                                      np.clip(img + delta, 0, 255))

    def test_clip_binds(self):
        img = np.full(SHAPE, 100.0)
        delta = np.zeros(SHAPE)
        delta[0, 0, 0] = 8.0
        out = apply_eta(img, delta, _eta([[0, 0, 0]], [1]), 8.0)
        assert out[0, 0, 0] == 108.0

    def test_combined_within_epsilon(self, rng):
        img = np.full(SHAPE, 128.0)
        delta = rng.uniform(-8, 8, size=SHAPE)
        for _ in range(20):
            flat = rng.choice(np.prod(SHAPE), size=10, replace=False)
            eta = SparseIndividual(np.stack(np.unravel_index(flat, SHAPE), axis=1), rng.choice([-1, 0, 1], size=10),
                                   step_scale=8.0)
            combined = apply_eta(img, delta, eta, 8.0) - 128.0
            assert np.abs(combined).max() <= 8.0

    def test_out_of_range_position(self):
        with pytest.raises(ShapeMismatchError):
            apply_eta(np.zeros(SHAPE), np.zeros(SHAPE), _eta([[8, 0, 0]], [1]), 8.0)


class TestEvaluate:

    def test_zero_distance_gives_unit_d_tilde(self, tiny_dataset, tiny_models, tiny_banks):
        model = tiny_models[0]
        img = tiny_dataset.images[:1]
        feature = forward_batch(model, img)
        bank = CentroidBank(0, feature.copy(), tiny_banks[0].s_inv)
        target = EvalTarget.build(model, bank, img, np.array([0]), img, np.array([0]))
        obj = evaluate(SparseIndividual.empty(), np.zeros(SHAPE), 8.0, [target])
        assert obj.total_distance == 0.0
        assert obj.d_tilde == 1.0

    def test_half_of_models_fooled(self, tiny_dataset, tiny_models, tiny_banks):
        images = tiny_dataset.images[:4]
        labels = np.arange(4)
        fooled = EvalTarget.build(tiny_models[0], tiny_banks[0], images, labels, images, labels + 100)
        intact = EvalTarget.build(tiny_models[1], tiny_banks[1], images, labels, images, labels)
        obj = evaluate(SparseIndividual.empty(), np.zeros(SHAPE), 8.0, [fooled, intact])
        assert obj.model_rates == (1.0, 0.0)
        assert obj.s_tilde == 0.5

    def test_matches_straight_line_oracle(self, targets, rng):
        delta = rng.uniform(-8, 8, size=SHAPE)
        flat = rng.choice(np.prod(SHAPE), size=12, replace=False)
        eta = SparseIndividual(np.stack(np.unravel_index(flat, SHAPE), axis=1), rng.choice([-1, 1], size=12))
        obj = evaluate(eta, delta, 8.0, targets)

        combined = np.clip(delta + eta.dense(SHAPE), -8.0, 8.0)
        total, indicators = 0.0, []
        for target in targets:
            distances, wrong = [], 0
            for img, label in zip(target.images, target.labels):
                f_adv = forward(target.model, np.clip(img + combined, 0, 255))
                home, _ = nearest_farthest(forward(target.model, img), target.bank)
                distances.append(mahalanobis_sq(f_adv, home, target.bank.s_inv))
                gaps = [np.sqrt(((f_adv - g) ** 2).sum()) for g in target.gallery_features]
                nearest = min(range(len(gaps)), key=lambda j: (gaps[j], j))
                wrong += target.gallery_labels[nearest] != label
            total += sum(distances) / len(distances)
            indicators.append(1 if wrong / len(target.labels) > 0.5 else 0)

        assert obj.total_distance == pytest.approx(total, rel=1e-12)
        assert obj.d_tilde == pytest.approx(max(np.exp(-total), np.finfo(float).tiny), rel=1e-9)
        assert obj.s_tilde == 1.0 - sum(indicators) / 2
        assert obj.eta_l2 == pytest.approx(np.sqrt(12))

    def test_no_targets(self):
        with pytest.raises(ConfigError):
            evaluate(SparseIndividual.empty(), np.zeros(SHAPE), 8.0, [])

    def test_modality_mismatch(self, tiny_dataset, tiny_models, tiny_banks):
        with pytest.raises(ShapeMismatchError):
            EvalTarget.from_dataset(tiny_models[1], tiny_banks[1], tiny_dataset, 2)


class TestDominates:

    def test_higher_success_wins(self):
        assert dominates(_obj(0.5), _obj(0.25))
        assert not dominates(_obj(0.25), _obj(0.5))

    def test_same_success_smaller_l2_wins(self):
        assert dominates(_obj(0.5, l2=3.0), _obj(0.5, l2=5.0))
        assert not dominates(_obj(0.5, l2=5.0), _obj(0.5, l2=3.0))

    def test_zero_success_smaller_d_tilde_wins(self):
        assert dominates(_obj(0.0, d_tilde=0.2), _obj(0.0, d_tilde=0.4))
        assert not dominates(_obj(0.0, d_tilde=0.4), _obj(0.0, d_tilde=0.2))

    def test_zero_success_uses_total_distance(self):
        far = ObjectiveVector(np.finfo(float).tiny, 1.0, 1.0, total_distance=900.0)
        near = ObjectiveVector(np.finfo(float).tiny, 1.0, 1.0, total_distance=800.0)
        assert dominates(far, near)
        assert not dominates(near, far)

    def test_equal_vectors_do_not_dominate(self):
        assert not dominates(_obj(0.5), _obj(0.5))
        assert not dominates(_obj(0.0), _obj(0.0))

    def test_accepts_pairs(self):
        eta = SparseIndividual.empty()
        assert dominates((eta, _obj(1.0)), (eta, _obj(0.5)))

    def test_same_success_higher_fooled_rate_wins(self):
        strong = _rated(1.0, (0.9, 0.8), distance=1.0, l2=5.0)
        weak = _rated(1.0, (0.6, 0.9), distance=2.0, l2=1.0)
        assert dominates(strong, weak)
        assert not dominates(weak, strong)

    def test_same_fooled_rate_larger_distance_wins(self):
        far = _rated(0.5, (0.9, 0.2), distance=30.0, l2=8.0)
        near = _rated(0.5, (0.9, 0.2), distance=12.0, l2=0.0)
        assert dominates(far, near)
        assert not dominates(near, far)

    def test_full_tie_falls_back_to_l2(self):
        assert dominates(_rated(1.0, (1.0,), distance=5.0, l2=2.0), _rated(1.0, (1.0,), distance=5.0, l2=4.0))

    def test_saturated_success_does_not_favor_empty_eta(self):
        # 多数阈值后成功率已饱和时，把特征推得更远的 η 仍优于 η = 0
        empty = _rated(1.0, (1.0, 1.0), distance=10.0, l2=0.0)
        pushed = _rated(1.0, (1.0, 1.0), distance=12.0, l2=8.0 * np.sqrt(64))
        assert dominates(pushed, empty)
        _, best = select_best([SparseIndividual.empty(), SparseIndividual.empty()], [empty, pushed])
        assert best is pushed

    def test_preference_key_agrees(self, rng):
        pool = [_rated(float(rng.choice([0.0, 0.5, 1.0])), tuple(rng.choice([0.25, 0.75], size=2)),
                       distance=float(rng.choice([1.0, 2.0])), l2=float(rng.choice([1.0, 2.0])))
                for _ in range(40)]
        for a, b in itertools.product(pool, repeat=2):
            assert dominates(a, b) == (preference_key(a) < preference_key(b))

    def test_relation_properties_with_model_rates(self, rng):
        pool = [_rated(float(rng.choice([0.0, 0.5, 1.0])), tuple(rng.choice([0.25, 0.75], size=2)),
                       distance=float(rng.choice([1.0, 2.0, 3.0])), l2=float(rng.choice([1.0, 2.0])))
                for _ in range(30)]
        for a in pool:
            assert not dominates(a, a)
        for _ in range(100):
            a, b, c = (pool[i] for i in rng.choice(len(pool), size=3))
            assert not (dominates(a, b) and dominates(b, a))
            if dominates(a, b) and dominates(b, c):
                assert dominates(a, c)

    def test_relation_properties(self, rng):
        pool = [_obj(float(rng.choice([0.0, 0.5, 1.0])), float(rng.choice([1.0, 2.0, 3.0])),
                     float(rng.choice([0.1, 0.2, 0.3]))) for _ in range(30)]
        for a in pool:
            assert not dominates(a, a)
        for _ in range(100):
            a, b, c = (pool[i] for i in rng.choice(len(pool), size=3))
            assert not (dominates(a, b) and dominates(b, a))
            if dominates(a, b) and dominates(b, c):
                assert dominates(a, c)


def _peel_oracle(objectives):
    remaining = list(range(len(objectives)))
    fronts = []
    while remaining:
        front = [i for i in remaining
                 if not any(dominates(objectives[j], objectives[i]) for j in remaining if j != i)]
        fronts.append(sorted(front))
        remaining = [i for i in remaining if i not in front]
    return fronts


class TestNondominatedSort:

    def test_single(self):
        assert nondominated_sort([_obj(0.5)]) == [[0]]

    def test_chain(self):
        assert nondominated_sort([_obj(1.0), _obj(0.5), _obj(0.0)]) == [[0], [1], [2]]
        assert nondominated_sort([_obj(0.0), _obj(1.0), _obj(0.5)]) == [[1], [2], [0]]

    def test_matches_brute_force(self, rng):
        for _ in range(10):
            objectives = [_obj(float(rng.choice([0.0, 0.5, 1.0])), float(rng.choice([1.0, 2.0])),
                               float(rng.choice([0.1, 0.2]))) for _ in range(20)]
            fronts = nondominated_sort(objectives)
            assert [sorted(f) for f in fronts] == _peel_oracle(objectives)
            for a, b in itertools.permutations(fronts[0], 2):
                assert not dominates(objectives[a], objectives[b])

    def test_select_best_prefers_success_then_l2(self):
        inds = [SparseIndividual.empty() for _ in range(3)]
        _, best = select_best(inds, [_obj(0.5, l2=2.0), _obj(1.0, l2=4.0), _obj(1.0, l2=3.0)])
        assert (best.success, best.eta_l2) == (1.0, 3.0)


class TestOperators:

    def test_no_crossover_clones(self, rng):
        constraints = Constraints(6, np.zeros(SHAPE), 8.0)
        p1, p2 = random_individual(rng, constraints, 1.0), random_individual(rng, constraints, 1.0)
        c1, c2 = crossover(p1, p2, 0.0, rng, constraints)
        assert c1.equals(p1) and c2.equals(p2)

    def test_no_mutation_is_identity(self, rng):
        constraints = Constraints(6, np.zeros(SHAPE), 8.0)
        ind = random_individual(rng, constraints, 1.0)
        assert mutate(ind, 0.0, rng, constraints).equals(ind)

    def test_repair_zeroes_boundary_genes(self, rng):
        delta = np.zeros(SHAPE)
        delta[0, 0, 0] = 8.0
        constraints = Constraints(4, delta, 8.0)
        fixed = repair(_eta([[0, 0, 0], [1, 0, 0]], [1, 1]), constraints, rng)
        assert fixed.values.tolist() == [0, 1]

    def test_random_operations_stay_feasible(self, rng):
        delta = rng.choice([-8.0, 0.0, 4.0, 8.0], size=SHAPE)
        constraints = Constraints(5, delta, 8.0)
        population = [random_individual(rng, constraints, 1.0) for _ in range(4)]
        for _ in range(1000):
            i, j = rng.choice(len(population), size=2, replace=False)
            c1, c2 = crossover(population[i], population[j], 0.8, rng, constraints)
            c1 = mutate(c1, 0.3, rng, constraints)
            for child in (c1, c2):
                _assert_feasible(child, constraints)
            population[int(rng.integers(len(population)))] = c1
        for ind in population:
            _assert_feasible(ind, constraints)

    def test_mutation_relocates_within_image(self, rng):
        constraints = Constraints(64, np.zeros(SHAPE), 8.0)
        ind = random_individual(rng, constraints, 1.0)
        moved = mutate(ind, 1.0, rng, constraints)
        assert len(moved) == len(ind)
        assert np.all(moved.positions < np.array(SHAPE))


class TestEvolve:

    def test_single_generation_picks_better_random(self, targets):
        config = EvoConfig(pop_size=2, generations=1, k=8, seed=4, seed_with_empty=False)
        result = evolve(np.zeros(SHAPE), 8.0, targets, config)

        rng = np.random.default_rng(4)
        constraints = Constraints(8, np.zeros(SHAPE), 8.0)
        initial = [random_individual(rng, constraints, 1.0) for _ in range(2)]
        expected, _ = select_best(initial, [evaluate(ind, np.zeros(SHAPE), 8.0, targets) for ind in initial])
        assert result.best.equals(expected)
        assert len(result.trace) == 1

    def test_initial_population_holds_empty_eta(self, targets):
        seen = []
        config = EvoConfig(pop_size=3, generations=1, k=8, step_scale=8.0, seed=4)
        evolve(np.zeros(SHAPE), 8.0, targets, config, lambda population: seen.append(population.individuals))

        rng = np.random.default_rng(4)
        constraints = Constraints(8, np.zeros(SHAPE), 8.0)
        drawn = [random_individual(rng, constraints, 8.0) for _ in range(3)]
        assert seen[0][0].l0 == 0
        assert seen[0][1].equals(drawn[1]) and seen[0][2].equals(drawn[2])

    def test_result_never_below_delta_alone(self, targets, rng):
        delta = rng.choice([-8.0, 0.0, 8.0], size=SHAPE)
        for seed in range(3):
            config = EvoConfig(pop_size=2, generations=15, k=16, step_scale=8.0, seed=seed)
            result = evolve(delta, 8.0, targets, config)
            alone = evaluate(SparseIndividual.empty(8.0), delta, 8.0, targets)
            assert not dominates(alone, result.objective)

    def test_deterministic(self, targets):
        config = EvoConfig(pop_size=3, generations=4, k=8, seed=9)
        a = evolve(np.zeros(SHAPE), 8.0, targets, config)
        b = evolve(np.zeros(SHAPE), 8.0, targets, config)
        assert a.best.equals(b.best)
        assert [r.best_success for r in a.trace] == [r.best_success for r in b.trace]

    def test_constraints_hold_every_generation(self, targets, rng):
        delta = rng.choice([-8.0, 0.0, 8.0], size=SHAPE)
        constraints = Constraints(6, delta, 8.0)
        seen = []

        def observer(population):
            seen.append(population.generation)
            for ind in population.individuals:
                _assert_feasible(ind, constraints)

        evolve(delta, 8.0, targets, EvoConfig(pop_size=4, generations=6, k=6, p_m=0.5, seed=1), observer)
        assert seen == list(range(1, 7))

    def test_elitism_and_archive(self, targets):
        config = EvoConfig(pop_size=2, generations=12, k=16, step_scale=8.0, seed=2)
        result = evolve(np.zeros(SHAPE), 8.0, targets, config)
        best = [row.best_success for row in result.trace]
        assert all(b >= a for a, b in zip(best, best[1:]))
        for column in range(len(targets)):
            values = [row.alphas[column] for row in result.trace]
            if all(isinstance(v, float) for v in values):
                np.testing.assert_array_equal(values, np.maximum.accumulate(values))
        assert result.archive.generation == 12

    @pytest.mark.slow
    @pytest.mark.parametrize("step_scale", [1.0, 8.0])
    def test_full_run_constraints_and_archive(self, targets, rng, step_scale):
        delta = rng.choice([-8.0, -3.0, 0.0, 5.0, 8.0], size=SHAPE)
        config = EvoConfig(step_scale=step_scale, seed=7)
        constraints = Constraints(config.k, delta, 8.0)
        archives = []

        def observer(population):
            for ind in population.individuals:
                _assert_feasible(ind, constraints)
            archives.append(list(population.archive.best))

        result = evolve(delta, 8.0, targets, config, observer)
        assert len(archives) == config.generations == 150
        assert [row.alphas for row in result.trace] == archives
        for column in range(len(targets)):
            values = [archive[column] for archive in archives]
            if all(isinstance(v, float) for v in values):
                np.testing.assert_array_equal(values, np.maximum.accumulate(values))
            else:
                assert len(set(values)) == 1

    @pytest.mark.parametrize("overrides", [{"pop_size": 1}, {"generations": 0}, {"p_c": 1.5}, {"step_scale": 0.0}])
    def test_config_rejected(self, targets, overrides):
        with pytest.raises(ConfigError):
            evolve(np.zeros(SHAPE), 8.0, targets, EvoConfig(**overrides))

    def test_no_targets(self):
        with pytest.raises(ConfigError):
            evolve(np.zeros(SHAPE), 8.0, [], EvoConfig(generations=1))


class TestEtaFile:

    def test_round_trip(self, tmp_path):
        eta = _eta([[0, 1, 2], [7, 3, 0]], [1, -1], step_scale=8.0)
        save_eta(eta, 64, tmp_path / "eta.mmeta")
        loaded, k = load_eta(tmp_path / "eta.mmeta")
        assert k == 64
        assert loaded.equals(eta)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "eta.mmeta"
        save_eta(_eta([[0, 0, 0]], [1]), 4, path)
        path.write_bytes(b"XXETA01" + path.read_bytes()[7:])
        with pytest.raises(ArtifactFormatError):
            load_eta(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "eta.mmeta"
        save_eta(_eta([[0, 0, 0], [1, 1, 1]], [1, 1]), 4, path)
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(ArtifactFormatError):
            load_eta(path)

    def test_budget_exceeded(self, tmp_path):
        path = tmp_path / "eta.mmeta"
        save_eta(_eta([[0, 0, 0], [1, 1, 1]], [1, -1]), 1, path)
        with pytest.raises(ArtifactFormatError):
            load_eta(path)

    def test_trace_csv_header(self, targets, tmp_path):
        result = evolve(np.zeros(SHAPE), 8.0, targets, EvoConfig(generations=2, k=4))
        write_trace_csv(result.trace, [1, 2], tmp_path / "trace.csv")
        lines = (tmp_path / "trace.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "generation,best_success,best_d_tilde,best_eta_l2,mean_success,alpha_m1,alpha_m2"
        assert len(lines) == 3
