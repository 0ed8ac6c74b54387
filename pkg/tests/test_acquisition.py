import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from bpmi.acquisition import (
    AcquisitionConfig,
    GreedyMI,
    Query,
    Strategy,
    apply_jitter,
    bpmi_from_joint,
    bpmi_score,
    greedy_batch,
    lfmi_from_joint,
    lfmi_score,
    max_uncertainty_from_moments,
    max_uncertainty_score,
    repeats_for,
)
from bpmi.bfgpc import LabeledDataset, TrainingConfig, init_model, joint_latent_posterior, predict_latent, train
from bpmi.errors import InvalidArgumentError
from bpmi.num_core import GaussianJoint, gaussian_mi
from bpmi.oracles import OracleKind, OracleSpec, sample_labels

from conftest import random_psd
from reference import UNIT, dense_assembled_joint, random_model


def unit_diag(cov):
    d = 1.0 / np.sqrt(np.diag(cov))
    return cov * np.outer(d, d)


class TestLfmi:
    def test_independent_blocks_score_zero(self, rng):
        cov = np.zeros((4, 4))
        cov[:2, :2] = random_psd(rng, 2)
        cov[2:, 2:] = random_psd(rng, 2)
        assert lfmi_from_joint(GaussianJoint(np.zeros(4), cov), 2) == 0.0

    def test_matches_dense_assembly_for_two_queries(self, rng):
        model = random_model(rng)
        queries = [(rng.random(2), "L"), (rng.random(2), "H")]
        tests = rng.random((3, 2))
        noise = 1e-4 / (1 / (2 * math.pi))
        ref = dense_assembled_joint(model, queries, tests)
        expected = gaussian_mi(GaussianJoint(ref.mean, ref.cov + noise * np.eye(5)), [0, 1], [2, 3, 4])
        assert lfmi_score(model, queries, tests) == pytest.approx(expected, abs=1e-9)

    def test_query_at_test_location_beats_partial_correlation(self, rng):
        model = random_model(rng)
        x = np.array([0.5, 0.5])
        same = lfmi_score(model, [(x, "H")], [x])
        ref = dense_assembled_joint(model, [(x, "H")], [x])
        noise = 1e-4 * 2 * math.pi
        assert same == pytest.approx(gaussian_mi(GaussianJoint(ref.mean, ref.cov + noise * np.eye(2)), [0], [1]), abs=1e-9)
        for other in rng.random((10, 2)):
            assert same > lfmi_score(model, [(other, "H")], [x])

    def test_empty_inputs_rejected(self, rng):
        model = random_model(rng)
        with pytest.raises(InvalidArgumentError):
            lfmi_score(model, [], [[0.5, 0.5]])
        with pytest.raises(InvalidArgumentError):
            bpmi_score(model, [([0.5, 0.5], "L")], np.zeros((0, 2)))


class TestBpmi:
    def test_saturated_scores_vanish(self, rng):
        cov = random_psd(rng, 5)
        centred = bpmi_from_joint(GaussianJoint(np.zeros(5), cov), 2)
        mean = rng.choice([-1, 1], 5) * rng.uniform(6, 8, 5)
        assert bpmi_from_joint(GaussianJoint(mean, cov), 2) < 1e-6 * centred

    def test_equals_lfmi_at_zero_mean(self, rng):
        joint = GaussianJoint(np.zeros(6), random_psd(rng, 6))
        assert bpmi_from_joint(joint, 3) == pytest.approx(lfmi_from_joint(joint, 3), abs=1e-6)

    def test_boundary_query_outranks_saturated_one(self, rng):
        # two queries (saturated at 5, boundary at 0) and two boundary test points, equal variances
        cov = unit_diag(random_psd(rng, 4))
        mean = np.array([5.0, 0.0, 0.0, 0.0])

        def single(i, score):
            idx = [i, 2, 3]
            return score(GaussianJoint(mean[idx], cov[np.ix_(idx, idx)]), 1)

        assert single(1, bpmi_from_joint) > single(0, bpmi_from_joint)

    def test_model_level_score_uses_linearization(self, rng):
        model = random_model(rng)
        queries = [(rng.random(2), "H")]
        tests = rng.random((4, 2))
        joint = joint_latent_posterior(model, queries, tests)
        assert bpmi_score(model, queries, tests) == bpmi_from_joint(joint, 1)


class TestMaxUncertainty:
    def test_fair_coin(self):
        assert max_uncertainty_from_moments(0.0, 0.0, 0.5) == pytest.approx(0.5 * math.log(2), abs=1e-12)
        assert max_uncertainty_from_moments(0.0, 0.0, 0.5) == pytest.approx(0.34657, abs=1e-5)

    def test_saturated(self):
        assert max_uncertainty_from_moments(6.0, 0.0, 0.5) < 1e-6
        assert max_uncertainty_from_moments(-6.0, 0.0, 0.5) < 1e-6

    def test_saturated_with_latent_variance(self):
        # the entropy term sees Phi(6 / sqrt(2)), which is 1 - 1.1e-5, not the plug-in Phi(6)
        p = norm.cdf(6.0 / math.sqrt(2.0))
        entropy = -(p * math.log(p) + (1 - p) * math.log1p(-p))
        epistemic = norm.pdf(6.0) ** 2
        assert max_uncertainty_from_moments(6.0, 1.0, 0.5) == pytest.approx(0.5 * epistemic + 0.5 * entropy, rel=1e-9)
        assert max_uncertainty_from_moments(6.0, 1.0, 0.5) < 1e-4

    def test_beta_one_is_epistemic(self):
        mean, var = 0.7, 0.4
        phi = math.exp(-0.5 * mean**2) / math.sqrt(2 * math.pi)
        assert max_uncertainty_from_moments(mean, var, 1.0) == pytest.approx(phi**2 * var, rel=1e-14)

    def test_model_score_matches_moments(self, rng):
        model = random_model(rng)
        x = rng.random(2)
        mean, var = predict_latent(model, x[None], "H")
        assert max_uncertainty_score(model, x, "H", 0.3) == pytest.approx(max_uncertainty_from_moments(mean[0], var[0], 0.3))

    def test_out_of_domain(self, rng):
        with pytest.raises(InvalidArgumentError):
            max_uncertainty_score(random_model(rng), [1.5, 0.5], "L", 0.5)


class TestRepeats:
    @pytest.mark.parametrize("p, n_max, expected", [(0.5, 13, 4), (0.0, 13, 3), (1.0, 13, 3), (0.5, 1, 1), (0.5, 5, 1)])
    def test_examples(self, p, n_max, expected):
        assert repeats_for(p, n_max) == expected

    def test_half_rounds_up(self):
        # (n_max - 1) / 4 * 1.25 = 2.5 at n_max = 9, p = 0.5
        assert repeats_for(0.5, 9) == 3

    @given(st.floats(0, 1), st.integers(1, 50))
    def test_within_bounds(self, p, n_max):
        assert 1 <= repeats_for(p, n_max) <= n_max


class TestJitter:
    def test_zero_scale_is_identity(self, rng):
        x = np.array([0.3, 0.8])
        np.testing.assert_array_equal(apply_jitter(x, 0.0, UNIT, rng), x)

    @given(st.floats(0, 0.5), st.integers(0, 2**32 - 1))
    def test_corner_stays_in_domain(self, scale, seed):
        out = apply_jitter([0.0, 0.0], scale, UNIT, np.random.default_rng(seed))
        assert np.all((out >= 0) & (out <= 1))

    def test_copies_distinct_and_close(self):
        rng = np.random.default_rng(4)
        x = np.array([0.5, 0.5])
        a, b = apply_jitter(x, 0.01, UNIT, rng), apply_jitter(x, 0.01, UNIT, rng)
        assert not np.array_equal(a, b)
        assert np.all(np.abs(a - x) <= 0.01) and np.all(np.abs(b - x) <= 0.01)

    def test_scales_with_domain_width(self):
        out = apply_jitter([5.0], 0.01, [[0.0, 10.0]], np.random.default_rng(0))
        assert abs(out[0] - 5.0) <= 0.1


# --------------------------------------------------------------------------
# greedy batches


def small_config(**kw):
    base = dict(costs=(1.0, 1.0), budget=2.5, candidate_count=8, test_point_count=5, seed=0)
    base.update(kw)
    return AcquisitionConfig(**base)


def subset_value(joint, subset, n_candidates, strategy):
    idx = list(subset) + list(range(n_candidates, joint.dim))
    sub = GaussianJoint(joint.mean[idx], joint.cov[np.ix_(idx, idx)])
    return (bpmi_from_joint if strategy is Strategy.BPMI else lfmi_from_joint)(sub, len(subset))


class TestGreedyBatch:
    def test_immediate_overrun(self, rng):
        model = random_model(rng)
        config = small_config(costs=(0.1, 1.0), budget=0.05)
        batch = greedy_batch(model, "BPMI", config, candidates=[(x, "L") for x in rng.random((5, 2))], pin_repeats=True)
        assert len(batch.queries) == 1
        assert batch.total_cost == pytest.approx(0.1)

    def test_random_lf_only_pool(self, rng):
        model = random_model(rng)
        config = small_config(costs=(0.1, 1.0), budget=0.3)
        batch = greedy_batch(model, "RANDOM", config, candidates=[(x, "L") for x in rng.random((10, 2))])
        assert len(batch.queries) == 4
        assert batch.total_cost == pytest.approx(0.4)
        assert batch.total_cost - 0.1 <= 0.3 + 1e-12

    def test_pool_exhaustion(self, rng):
        model = random_model(rng)
        batch = greedy_batch(model, "MAXUNC", small_config(budget=100.0), candidates=[(x, "H") for x in rng.random((3, 2))])
        assert len(batch.queries) == 3

    def test_empty_pool(self, rng):
        with pytest.raises(InvalidArgumentError):
            greedy_batch(random_model(rng), "BPMI", small_config(), candidates=[])

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_budget_contract(self, strategy):
        rng = np.random.default_rng(8)
        model = random_model(rng)
        config = AcquisitionConfig(costs=(0.1, 1.0), budget=5.0, candidate_count=32, test_point_count=10, seed=3)
        batch = greedy_batch(model, strategy, config)
        charges = [q.repeats * config.cost(q.fidelity) for q in batch.queries]
        assert batch.total_cost == pytest.approx(sum(charges))
        assert batch.total_cost > config.budget
        assert batch.total_cost - charges[-1] <= config.budget

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_deterministic(self, strategy):
        model = random_model(np.random.default_rng(2))
        config = AcquisitionConfig(budget=3.0, candidate_count=16, test_point_count=8, seed=17)
        a, b = greedy_batch(model, strategy, config), greedy_batch(model, strategy, config)
        assert [(q.x.tolist(), q.fidelity, q.copies.tolist()) for q in a.queries] == [(q.x.tolist(), q.fidelity, q.copies.tolist()) for q in b.queries]

    def test_baselines_alternate_fidelities(self, rng):
        model = random_model(rng)
        config = AcquisitionConfig(budget=5.0, candidate_count=16, seed=1)
        for strategy in ("MAXUNC", "RANDOM"):
            batch = greedy_batch(model, strategy, config)
            assert [q.fidelity.value for q in batch.queries[:6]] == list("LHLHLH")
            assert all(q.repeats == 1 for q in batch.queries)

    def test_maxunc_takes_top_scores(self, rng):
        model = random_model(rng)
        cands = [(x, "H") for x in rng.random((10, 2))]
        batch = greedy_batch(model, "MAXUNC", small_config(budget=2.5), candidates=cands)
        scores = [max_uncertainty_score(model, x, "H", 0.5) for x, _ in cands]
        top = sorted(range(10), key=lambda i: -scores[i])[:3]
        assert [q.x.tolist() for q in batch.queries] == [cands[i][0].tolist() for i in top]

    def test_repeat_copies(self, rng):
        model = random_model(rng)
        config = AcquisitionConfig(budget=3.0, candidate_count=16, test_point_count=8, seed=5)
        batch = greedy_batch(model, "BPMI", config)
        for q in batch.queries:
            assert q.copies.shape == (q.repeats, 2)
            np.testing.assert_array_equal(q.copies[0], q.x)
            assert np.all(np.abs(q.copies - q.x) <= config.jitter_scale + 1e-15)
            assert 1 <= q.repeats <= config.n_max

    def test_no_candidate_selected_twice(self, rng):
        model = random_model(rng)
        cands = [(x, m) for x in rng.random((4, 2)) for m in "LH"]
        batch = greedy_batch(model, "LFMI", small_config(budget=100.0), candidates=cands, test_points=rng.random((3, 2)), pin_repeats=True)
        keys = [(tuple(q.x), q.fidelity) for q in batch.queries]
        assert len(keys) == len(set(keys)) == 8

    @pytest.mark.parametrize("strategy", [Strategy.BPMI, Strategy.LFMI])
    def test_greedy_value_equals_direct_score(self, rng, strategy):
        model = random_model(rng)
        cands = [(x, m) for x, m in zip(rng.random((6, 2)), "LHLHLH")]
        tests = rng.random((4, 2))
        batch = greedy_batch(model, strategy, small_config(budget=2.5), candidates=cands, test_points=tests, pin_repeats=True)
        score = bpmi_score if strategy is Strategy.BPMI else lfmi_score
        direct = score(model, [(q.x, q.fidelity) for q in batch.queries], tests)
        assert batch.value == pytest.approx(direct, rel=1e-6, abs=1e-10)

    @pytest.mark.parametrize("strategy", [Strategy.BPMI, Strategy.LFMI])
    def test_near_optimal(self, rng, strategy):
        model = random_model(rng)
        cands = [(x, m) for x, m in zip(rng.random((6, 2)), "LHLHHL")]
        tests = rng.random((5, 2))
        batch = greedy_batch(model, strategy, small_config(budget=2.5), candidates=cands, test_points=tests, pin_repeats=True)
        assert len(batch.queries) == 3
        joint = joint_latent_posterior(model, cands, tests)
        best = max(subset_value(joint, s, 6, strategy) for k in (1, 2, 3) for s in itertools.combinations(range(6), k))
        assert batch.value >= (1 - 1 / math.e) * best


class TestMiStructure:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([Strategy.BPMI, Strategy.LFMI]))
    def test_marginal_gains_nonnegative(self, seed, strategy):
        rng = np.random.default_rng(seed)
        n_cand = 5
        joint = GaussianJoint(rng.normal(scale=2.0, size=8), random_psd(rng, 8))
        value = lambda s: subset_value(joint, s, n_cand, strategy) if s else 0.0
        order = [int(i) for i in rng.permutation(n_cand)]
        for k in range(n_cand):
            assert value(sorted(order[: k + 1])) - value(sorted(order[:k])) >= -1e-7

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_submodular_for_noisy_views_of_targets(self, seed):
        # candidates are noisy linear views of the target latents, hence independent given them
        rng = np.random.default_rng(seed)
        n_cand, n_test = 5, 3
        target = random_psd(rng, n_test)
        a = rng.normal(size=(n_cand, n_test))
        noise = np.diag(rng.uniform(0.05, 1.0, n_cand))
        cov = np.block([[a @ target @ a.T + noise, a @ target], [target @ a.T, target]])
        joint = GaussianJoint(np.zeros(n_cand + n_test), cov)
        value = lambda s: subset_value(joint, s, n_cand, Strategy.LFMI) if s else 0.0
        order = [int(i) for i in rng.permutation(n_cand)]
        small, big, q = sorted(order[:1]), sorted(order[:3]), order[4]
        gain_small = value(sorted(small + [q])) - value(small)
        gain_big = value(sorted(big + [q])) - value(big)
        assert gain_small >= gain_big - 1e-7

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_incremental_gains_match_direct(self, seed):
        rng = np.random.default_rng(seed)
        n_cand = 5
        joint = GaussianJoint(rng.normal(size=9), random_psd(rng, 9))
        state = GreedyMI(joint, n_cand, Strategy.BPMI, 1e-4)
        chosen = []
        for j in rng.permutation(n_cand)[:3]:
            before = subset_value(joint, chosen, n_cand, Strategy.BPMI) if chosen else 0.0
            chosen.append(int(j))
            expected = subset_value(joint, chosen, n_cand, Strategy.BPMI) - before
            assert state.select(int(j)) == pytest.approx(expected, abs=1e-8)


def test_bpmi_avoids_saturated_regions():
    """On a trained toy model BPMI queries sit closer to the decision boundary than LFMI's."""
    oracle = OracleSpec(OracleKind.TOY_LINEAR)
    rng = np.random.default_rng(0)
    lf_x, hf_x = rng.random((60, 2)), rng.random((40, 2))
    data = LabeledDataset(
        lf_x, sample_labels(oracle, [(x, "L") for x in lf_x], rng), hf_x, sample_labels(oracle, [(x, "H") for x in hf_x], rng)
    )
    model, _ = train(init_model(2, UNIT, 32, 16, seed=0), data, TrainingConfig(learning_rate=1e-2, steps=300, restarts=1))
    gaps = []
    for seed in range(20):
        config = AcquisitionConfig(budget=10.0, candidate_count=64, test_point_count=50, seed=seed)
        out = []
        for strategy in ("BPMI", "LFMI"):
            batch = greedy_batch(model, strategy, config)
            out.append(np.mean([abs(predict_latent(model, q.x[None], q.fidelity)[0][0]) for q in batch.queries]))
        gaps.append(out)
    gaps = np.array(gaps)
    assert gaps[:, 0].mean() < gaps[:, 1].mean()


def test_query_validation():
    with pytest.raises(InvalidArgumentError):
        Query([0.5, 0.5], "H", repeats=0)
    with pytest.raises(InvalidArgumentError):
        Query([0.5, 0.5], "H", repeats=2, copies=[[0.5, 0.5]])
    with pytest.raises(InvalidArgumentError):
        AcquisitionConfig(beta=1.5)
