import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import UNIT2, density, mass_vectors
from sieverates.densities import evaluate, sample
from sieverates.engine import (
    DegeneratePosteriorError,
    EmptyRestrictionError,
    EngineError,
    InvalidTruthError,
    MissingTruthError,
    SubsetMask,
    absorb,
    empirical_bayes_reweight,
    init_state,
    log_denominator,
    log_posterior_mass,
    log_restricted_numerator,
    posterior_mass,
    posterior_weights,
    predictive_density,
    restricted_predictive,
    run_trace,
    update,
)
from sieverates.priors import FinitePrior, build_histogram_sieve

F1 = density(0.5, 0.5)
F2 = density(0.25, 0.75)
PAIR = FinitePrior((F1, F2), np.log([0.5, 0.5]))


@st.composite
def runs(draw, max_m=5, max_n=40):
    b = draw(st.integers(2, 4))
    m = draw(st.integers(1, max_m))
    cands = [draw(mass_vectors(bins=b, allow_zeros=False)) for _ in range(m)]
    w = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=m, max_size=m)))
    prior = FinitePrior(tuple(cands), np.log(w / w.sum()))
    fstar = draw(mass_vectors(bins=b))
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(1, max_n))
    ys = sample(fstar, np.random.default_rng(seed), n)
    return prior, fstar, ys


class TestUpdate:
    def test_bayes_hand_value(self):
        st_ = update(init_state(PAIR), 0.7)
        assert posterior_weights(st_) == pytest.approx([0.4, 0.6], abs=1e-15)
        assert st_.n == 1

    def test_fractional_hand_value(self):
        st_ = update(init_state(PAIR, 0.5), 0.7)
        raw = np.array([0.5, 0.5 * math.sqrt(1.5)])
        assert posterior_weights(st_) == pytest.approx(raw / raw.sum(), abs=1e-15)
        assert posterior_weights(st_) == pytest.approx([0.4495, 0.5505], abs=1e-4)

    def test_annihilation(self):
        prior = FinitePrior.from_masses(UNIT2, [[1.0, 0.0], [0.5, 0.5]])
        w = posterior_weights(update(init_state(prior), 0.9))
        assert w[0] == 0.0 and w[1] == 1.0

    def test_invalid_truth(self):
        with pytest.raises(InvalidTruthError):
            update(init_state(PAIR, 1.0, density(1.0, 0.0)), 0.9)

    def test_outside_domain(self):
        with pytest.raises(Exception):
            update(init_state(PAIR), 1.5)

    def test_returns_new_state(self):
        s0 = init_state(PAIR)
        s1 = update(s0, 0.7)
        assert s0.n == 0 and np.all(s0.log_lik == 0)
        assert s1 is not s0

    @pytest.mark.parametrize("kappa", [0.0, -0.5, 1.5])
    def test_kappa_range(self, kappa):
        with pytest.raises(EngineError):
            init_state(PAIR, kappa)

    @settings(max_examples=40, deadline=None)
    @given(runs())
    def test_batch_equals_sequential(self, case):
        prior, fstar, ys = case
        seq = init_state(prior, 0.75, fstar)
        for y in ys:
            seq = update(seq, y)
        bat = absorb(init_state(prior, 0.75, fstar), ys)
        assert bat.n == seq.n
        assert np.allclose(bat.log_lik, seq.log_lik, rtol=1e-12, atol=1e-9)
        assert bat.log_lik_star == pytest.approx(seq.log_lik_star, rel=1e-12, abs=1e-9)


class TestPosteriorWeights:
    def test_prior_at_zero(self):
        p = build_histogram_sieve(UNIT2, [1, 2])
        assert np.array_equal(posterior_weights(init_state(p)), np.exp(p.log_weights))
        assert np.array_equal(posterior_weights(init_state(p, 0.5)), np.exp(p.log_weights))

    def test_degenerate(self):
        prior = FinitePrior.from_masses(UNIT2, [[1.0, 0.0]])
        with pytest.raises(DegeneratePosteriorError):
            posterior_weights(update(init_state(prior), 0.9))

    @settings(max_examples=40, deadline=None)
    @given(runs(), st.floats(-50, 50))
    def test_shift_invariance(self, case, shift):
        prior, _, ys = case
        s = absorb(init_state(prior), ys)
        shifted = type(s)(s.prior, s.kappa, s.n, s.log_lik + shift)
        assert np.allclose(posterior_weights(s), posterior_weights(shifted), atol=1e-12)
        assert abs(posterior_weights(s).sum() - 1) <= 1e-10

    def test_no_underflow_with_long_runs(self):
        prior = FinitePrior.from_masses(UNIT2, [[0.5, 0.5], [0.49, 0.51]])
        ys = sample(density(0.3, 0.7), np.random.default_rng(0), 200_000)
        s = absorb(init_state(prior), ys)
        w = posterior_weights(s)
        assert np.all(np.isfinite(w)) and w.sum() == pytest.approx(1.0)
        assert w[1] > 0.999


class TestDenominator:
    def test_point_prior(self):
        prior = FinitePrior((F2,), np.zeros(1))
        ys = sample(F2, np.random.default_rng(3), 200)
        tr = run_trace(prior, F2, ys)
        assert np.all(tr.log_i == 0.0)
        assert log_denominator(absorb(init_state(prior, 1.0, F2), ys)) == 0.0

    def test_zero_at_start(self):
        assert log_denominator(init_state(PAIR, 1.0, F2)) == 0.0

    def test_hand_value(self):
        s = update(init_state(PAIR, 1.0, F2), 0.7)
        assert log_denominator(s) == pytest.approx(math.log(5 / 6), abs=1e-15)

    def test_missing_truth(self):
        with pytest.raises(MissingTruthError):
            log_denominator(update(init_state(PAIR), 0.7))


class TestPredictive:
    def test_prior_mean(self):
        assert np.allclose(predictive_density(init_state(PAIR)).mass, [0.375, 0.625])

    def test_hand_value(self):
        f = predictive_density(update(init_state(PAIR), 0.7))
        assert f.mass == pytest.approx([0.35, 0.65], abs=1e-15)

    def test_point_prior(self):
        prior = FinitePrior((F2,), np.zeros(1))
        s = absorb(init_state(prior), [0.1, 0.6, 0.9])
        assert predictive_density(s) == F2


class TestMasks:
    def test_constructors(self):
        assert len(SubsetMask.everything(3)) == 3 and not SubsetMask.everything(3).empty
        assert SubsetMask.nothing(3).empty
        m = SubsetMask.of(4, [1, 3])
        assert m.included.tolist() == [False, True, False, True]
        assert (m | SubsetMask.of(4, [0])).included.tolist() == [True, True, False, True]
        assert (m & SubsetMask.of(4, [1, 2])).included.tolist() == [False, True, False, False]

    def test_mass_trivial(self):
        s = update(init_state(PAIR), 0.7)
        assert posterior_mass(s, SubsetMask.everything(2)) == pytest.approx(1.0)
        assert posterior_mass(s, SubsetMask.nothing(2)) == 0.0

    def test_mass_hand_value(self):
        s = update(init_state(PAIR), 0.7)
        assert posterior_mass(s, SubsetMask.of(2, [1])) == pytest.approx(0.6, abs=1e-15)
        assert log_posterior_mass(s, SubsetMask.of(2, [1])) == pytest.approx(math.log(0.6), abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(EngineError):
            posterior_mass(init_state(PAIR), SubsetMask.everything(3))

    def test_restricted_everything(self):
        s = update(init_state(PAIR), 0.7)
        assert np.allclose(restricted_predictive(s, SubsetMask.everything(2)).mass, predictive_density(s).mass)

    def test_restricted_singleton(self):
        s = update(init_state(PAIR), 0.7)
        assert restricted_predictive(s, SubsetMask.of(2, [0])) == F1

    def test_restricted_hand_value(self):
        prior = FinitePrior.from_masses(UNIT2, [[0.9, 0.1], [1.0, 0.0], [0.0, 1.0]], [0.2, 0.3, 0.5])
        f = restricted_predictive(init_state(prior), SubsetMask.of(3, [1, 2]))
        assert f.mass == pytest.approx([0.375, 0.625], abs=1e-15)

    def test_restricted_empty(self):
        with pytest.raises(EmptyRestrictionError):
            restricted_predictive(init_state(PAIR), SubsetMask.nothing(2))

    def test_numerator_at_zero(self):
        prior = FinitePrior.from_masses(UNIT2, [[0.5, 0.5], [0.25, 0.75], [0.1, 0.9]], [0.3, 0.2, 0.5])
        s = init_state(prior, 1.0, F2)
        assert log_restricted_numerator(s, SubsetMask.of(3, [0])) == pytest.approx(math.log(0.3), abs=1e-15)

    def test_numerator_everything_is_denominator(self):
        s = absorb(init_state(PAIR, 1.0, F2), [0.7, 0.1, 0.9])
        assert log_restricted_numerator(s, SubsetMask.everything(2)) == pytest.approx(log_denominator(s), abs=1e-15)

    def test_numerator_hand_value(self):
        s = update(init_state(PAIR, 1.0, F2), 0.7)
        assert log_restricted_numerator(s, SubsetMask.of(2, [0])) == pytest.approx(math.log(1 / 3), abs=1e-15)

    def test_numerator_empty(self):
        assert log_restricted_numerator(init_state(PAIR, 1.0, F2), SubsetMask.nothing(2)) == -math.inf

    @settings(max_examples=40, deadline=None)
    @given(runs(max_m=6), st.data())
    def test_union_bounds(self, case, data):
        prior, _, ys = case
        m = len(prior)
        s = absorb(init_state(prior), ys)
        masks = [SubsetMask(np.array(data.draw(st.lists(st.booleans(), min_size=m, max_size=m)))) for _ in range(3)]
        union = masks[0] | masks[1] | masks[2]
        assert posterior_mass(s, union) <= sum(posterior_mass(s, a) for a in masks) + 1e-12
        labels = np.array(data.draw(st.lists(st.integers(0, 2), min_size=m, max_size=m)))
        parts = [SubsetMask(labels == k) for k in range(3)]
        assert sum(posterior_mass(s, a) for a in parts) == pytest.approx(1.0, abs=1e-12)


class TestEmpiricalBayes:
    def test_constant_shift(self):
        p = build_histogram_sieve(UNIT2, [1, 2])
        g = empirical_bayes_reweight(p, np.full(len(p), -3.7))
        assert np.allclose(g.weights, p.weights, atol=1e-15)

    def test_hand_value(self):
        g = empirical_bayes_reweight(PAIR, [math.log(1.0), math.log(1.5)])
        raw = np.array([1.0, 1.5**-0.5])
        assert g.weights == pytest.approx(raw / raw.sum(), abs=1e-15)
        assert g.weights == pytest.approx([0.5505, 0.4495], abs=1e-4)

    def test_zero_likelihood_excluded(self):
        g = empirical_bayes_reweight(PAIR, [-math.inf, 0.0])
        assert g.weights.tolist() == [0.0, 1.0]

    def test_all_excluded(self):
        with pytest.raises(DegeneratePosteriorError):
            empirical_bayes_reweight(PAIR, [-math.inf, -math.inf])

    @settings(max_examples=60, deadline=None)
    @given(runs(max_m=6), st.sampled_from([0.25, 0.5, 0.75]))
    def test_matches_pseudo_posterior(self, case, kappa):
        prior, _, ys = case
        pseudo = absorb(init_state(prior, kappa), ys)
        ll = absorb(init_state(prior), ys).log_lik
        genuine = absorb(init_state(empirical_bayes_reweight(prior, ll, kappa)), ys)
        assert np.max(np.abs(posterior_weights(pseudo) - posterior_weights(genuine))) <= 1e-12

    def test_matches_pseudo_with_annihilated_candidates(self):
        prior = FinitePrior.from_masses(UNIT2, [[1.0, 0.0], [0.5, 0.5], [0.2, 0.8]], [0.2, 0.3, 0.5])
        ys = [0.1, 0.9, 0.8]
        pseudo = absorb(init_state(prior, 0.5), ys)
        ll = absorb(init_state(prior), ys).log_lik
        genuine = absorb(init_state(empirical_bayes_reweight(prior, ll)), ys)
        assert np.allclose(posterior_weights(pseudo), posterior_weights(genuine), atol=1e-12)


class TestRunTrace:
    @settings(max_examples=40, deadline=None)
    @given(runs(), st.sampled_from([0.5, 1.0]))
    def test_agrees_with_sequential_states(self, case, kappa):
        prior, fstar, ys = case
        mask = SubsetMask.of(len(prior), [0])
        tr = run_trace(prior, fstar, ys, kappa, masks={"a": mask}, full_predictives=True)
        s = init_state(prior, kappa, fstar)
        assert tr.log_i[0] == 0.0
        assert tr.masks["a"].log_l[0] == pytest.approx(prior.log_weights[0], abs=1e-15)
        for i, y in enumerate(ys, start=1):
            pred = predictive_density(s)
            assert np.allclose(tr.predictives[i - 1], pred.mass, atol=1e-12)
            assert tr.log_pred_obs[i - 1] == pytest.approx(math.log(evaluate(pred, y)), abs=1e-10)
            s = update(s, y)
            assert tr.log_i[i] == pytest.approx(log_denominator(s), abs=1e-9)
            assert tr.masks["a"].log_l[i] == pytest.approx(log_restricted_numerator(s, mask), abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(runs(max_n=80))
    def test_recursion_identity(self, case):
        prior, fstar, ys = case
        mask = SubsetMask(np.arange(len(prior)) % 2 == 0)
        tr = run_trace(prior, fstar, ys, 1.0, masks={"a": mask})
        assert np.max(np.abs(np.diff(tr.log_i) - (tr.log_pred_obs - tr.log_star_obs))) <= 1e-10
        mt = tr.masks["a"]
        assert np.max(np.abs(np.diff(mt.log_l) - (mt.log_pred_obs - tr.log_star_obs))) <= 1e-10

    def test_snapshots_match_absorb(self):
        p = build_histogram_sieve(UNIT2, [1, 2])
        ys = sample(F2, np.random.default_rng(5), 50)
        tr = run_trace(p, F2, ys, snapshots=[0, 10, 50])
        assert tr.states[0].n == 0
        assert np.array_equal(tr.states[10].log_lik, absorb(init_state(p, 1.0, F2), ys[:10]).log_lik)

    def test_invalid_truth(self):
        with pytest.raises(InvalidTruthError):
            run_trace(PAIR, density(1.0, 0.0), [0.9])

    def test_bad_snapshot(self):
        with pytest.raises(EngineError):
            run_trace(PAIR, F2, [0.1], snapshots=[5])

    def test_kappa_near_one_limit(self):
        p = build_histogram_sieve(UNIT2, [1, 2])
        ys = sample(F2, np.random.default_rng(9), 100)
        a = posterior_weights(absorb(init_state(p, 1.0), ys))
        b = posterior_weights(absorb(init_state(p, 1.0 - 1e-9), ys))
        assert np.allclose(a, b, atol=1e-6)
