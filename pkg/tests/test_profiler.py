import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from oracles import ReplayTrie, mc_sample_mean_variance
from tierplan.landscape import generate_landscape
from tierplan.model import PlanPoint, Verdict
from tierplan.profiler import (
    NullCache,
    PrefixCache,
    ProfilingSession,
    next_case,
    profile_plan,
    profile_plan_fixed_n,
    stratify,
    two_sided_p_value,
    variance_random,
    variance_stratified,
)


class TestVarianceFormulas:
    def test_plug_in_two_strata(self):
        p, mu, s2 = (0.5, 0.5), (0.0, 1.0), (0.0, 0.0)
        assert variance_random(p, mu, s2, 100) == pytest.approx(0.0025)
        assert variance_stratified(p, s2, 100) == 0.0

    def test_equal_means_collapse_to_within_term(self):
        p, mu, s2 = (0.25, 0.25, 0.5), (0.6, 0.6, 0.6), (0.01, 0.04, 0.02)
        assert variance_random(p, mu, s2, 50) == pytest.approx(variance_stratified(p, s2, 50))

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            variance_random((0.5, 0.4), (0, 1), (0, 0), 10)
        with pytest.raises(ValueError, match="sum to 1"):
            variance_stratified((0.7, 0.7), (0, 0), 10)

    @given(
        st.lists(st.floats(0.05, 1.0), min_size=2, max_size=6),
        st.data(),
    )
    @settings(max_examples=200, deadline=None)
    def test_stratified_never_exceeds_random(self, raw_w, data):
        p = np.array(raw_w) / sum(raw_w)
        k = len(p)
        mu = data.draw(st.lists(st.floats(0.0, 1.0), min_size=k, max_size=k))
        s2 = data.draw(st.lists(st.floats(0.0, 0.25), min_size=k, max_size=k))
        assert variance_stratified(p, s2, 100) <= variance_random(p, mu, s2, 100) + 1e-15

    def test_monte_carlo_matches_both_formulas(self):
        rng = np.random.default_rng(0)
        n, trials = 100, 100_000
        p = np.array([0.3, 0.2, 0.5])
        mu = np.array([0.4, 0.7, 0.9])
        sigma = np.array([0.05, 0.1, 0.02])
        v_rand = mc_sample_mean_variance(p, mu, sigma, n, trials, rng, stratified=False)
        v_strat = mc_sample_mean_variance(p, mu, sigma, n, trials, rng, stratified=True)
        assert v_rand == pytest.approx(variance_random(p, mu, sigma**2, n), rel=0.05)
        assert v_strat == pytest.approx(variance_stratified(p, sigma**2, n), rel=0.05)


class TestStratify:
    def test_single_stratum(self):
        s = stratify([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], k=1)
        assert s.k == 1 and s.weights == (1.0,)
        assert s.assignment == (0, 0, 0)

    def test_two_blobs_high_purity(self):
        rng = np.random.default_rng(8)
        a = rng.normal((0, 0), 0.3, size=(60, 2))
        b = rng.normal((6, 6), 0.3, size=(40, 2))
        feats = np.vstack([a, b])
        labels = np.array([0] * 60 + [1] * 40)
        s = stratify(feats.tolist(), k=2, seed=1)
        got = np.array(s.assignment)
        purity = max(np.mean(got == labels), np.mean(got == 1 - labels))
        assert purity >= 0.95

    def test_uniform_features_balanced_weights(self):
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            feats = rng.uniform(0, 1, size=(200, 2)).tolist()
            s = stratify(feats, k=4, seed=seed)
            if all(abs(w - 0.25) <= 0.1 for w in s.weights):
                hits += 1
        assert hits >= 16  # balanced in the typical case

    def test_k_bounds(self):
        with pytest.raises(ValueError):
            stratify([[0.0, 0.0]], k=0)
        with pytest.raises(ValueError):
            stratify([[0.0, 0.0]], k=2)

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(80, 2)).tolist()
        assert stratify(feats, 3, seed=9).assignment == stratify(feats, 3, seed=9).assignment


class TestNextCase:
    def _flat_strat(self, k, per=50):
        feats = []
        for j in range(k):
            feats.extend([[float(j * 10), 0.0]] * per)
        return stratify(feats, k=k, seed=0)

    def test_round_robin_sequence(self):
        s = self._flat_strat(2)
        rng = np.random.default_rng(0)
        seq = [s.assignment[next_case(s, rng)] for _ in range(4)]
        assert seq == [0, 1, 0, 1]

    def test_each_stratum_drawn_equally(self):
        s = self._flat_strat(3)
        rng = np.random.default_rng(1)
        counts = {0: 0, 1: 0, 2: 0}
        for _ in range(300):
            counts[s.assignment[next_case(s, rng)]] += 1
        assert counts == {0: 100, 1: 100, 2: 100}

    def test_uniform_within_stratum(self):
        s = self._flat_strat(2, per=25)
        rng = np.random.default_rng(2)
        hits = {}
        for _ in range(10_000):
            c = next_case(s, rng)
            if s.assignment[c] == 0:
                hits[c] = hits.get(c, 0) + 1
        observed = [hits.get(c, 0) for c in s.strata[0]]
        assert chisquare(observed).pvalue > 0.01


def make_land_with_mean(pipeline, target, seed=0, noise=0.03):
    """Find a config whose true mean is close to a target on a seeded
    landscape, for controlled profiling tests."""
    from itertools import product

    land = generate_landscape(seed=seed, pipeline=pipeline, noise_scale=noise)
    configs = list(product(*[range(len(op.knob_domain)) for op in pipeline.operators]))
    cfg = min(configs, key=lambda c: abs(land.accuracy_mean(c) - target))
    return land, cfg


class TestProfilePlan:
    def test_clear_pass_stops_at_minimum(self, vt_pipeline):
        land, cfg = make_land_with_mean(vt_pipeline, 0.85, seed=14)
        a_slo = land.accuracy_mean(cfg) - 0.15
        plan = PlanPoint(cfg, (0, 0, 0), (1.0, 1.0, 1.0))
        strat = stratify(land.case_features, 4, seed=0)
        out = profile_plan(plan, land, strat, PrefixCache(), a_slo, np.random.default_rng(0))
        assert out.verdict == Verdict.PASS_ACCURACY
        assert out.samples_used == 50

    def test_clear_fail(self, vt_pipeline):
        land, cfg = make_land_with_mean(vt_pipeline, 0.4, seed=14)
        a_slo = land.accuracy_mean(cfg) + 0.15
        plan = PlanPoint(cfg, (0, 0, 0), (1.0, 1.0, 1.0))
        strat = stratify(land.case_features, 4, seed=0)
        out = profile_plan(plan, land, strat, PrefixCache(), a_slo, np.random.default_rng(0))
        assert out.verdict == Verdict.FAIL_ACCURACY
        assert out.samples_used >= 50

    def test_at_threshold_inconclusive_with_high_probability(self, vt_pipeline):
        land, cfg = make_land_with_mean(vt_pipeline, 0.7, seed=14)
        a_slo = land.accuracy_mean(cfg)  # exactly at the population mean
        plan = PlanPoint(cfg, (0, 0, 0), (1.0, 1.0, 1.0))
        inconclusive = 0
        runs = 60
        for s in range(runs):
            strat = stratify(land.case_features, 4, seed=s)
            out = profile_plan(
                plan, land, strat, NullCache(), a_slo, np.random.default_rng(s), n_max=400
            )
            inconclusive += out.verdict == Verdict.INCONCLUSIVE
        assert inconclusive / runs >= 0.98

    def test_zero_variance_at_threshold_is_documented_degenerate(self, vt_pipeline):
        # single stratum, zero noise: every draw equals the SLO exactly, the
        # t-test never fires and the session runs to its cap
        land = generate_landscape(seed=14, pipeline=vt_pipeline, k_true=1, noise_scale=0.0)
        cfg = (0, 0, 0)
        a_slo = land.accuracy_mean(cfg)
        plan = PlanPoint(cfg, (0, 0, 0), (1.0, 1.0, 1.0))
        strat = stratify(land.case_features, 1, seed=0)
        out = profile_plan(plan, land, strat, NullCache(), a_slo, np.random.default_rng(0), n_max=120)
        assert out.verdict == Verdict.INCONCLUSIVE
        assert out.samples_used == 120

    def test_early_stop_beats_fixed_n_on_clear_plans(self, vt_pipeline):
        from itertools import product

        land = generate_landscape(seed=17, pipeline=vt_pipeline, noise_scale=0.04)
        configs = list(product(*[range(len(op.knob_domain)) for op in vt_pipeline.operators]))
        a_slo = float(np.median([land.accuracy_mean(c) for c in configs]))
        clear = [c for c in configs if abs(land.accuracy_mean(c) - a_slo) >= 0.05]
        assert len(clear) >= 20
        fewer = 0
        for i, cfg in enumerate(clear):
            plan = PlanPoint(cfg, (0, 0, 0), (1.0, 1.0, 1.0))
            strat = stratify(land.case_features, 4, seed=i)
            out = profile_plan(plan, land, strat, NullCache(), a_slo, np.random.default_rng(i))
            fewer += out.samples_used < 356
        assert fewer / len(clear) >= 0.90

    def test_verdict_matches_sign_of_gap(self, vt_pipeline):
        from itertools import product

        land = generate_landscape(seed=17, pipeline=vt_pipeline, noise_scale=0.04)
        configs = list(product(*[range(len(op.knob_domain)) for op in vt_pipeline.operators]))
        a_slo = float(np.median([land.accuracy_mean(c) for c in configs]))
        clear = [c for c in configs if abs(land.accuracy_mean(c) - a_slo) >= 0.05]
        agree = 0
        for i, cfg in enumerate(clear):
            plan = PlanPoint(cfg, (0, 0, 0), (1.0, 1.0, 1.0))
            strat = stratify(land.case_features, 4, seed=1000 + i)
            out = profile_plan(plan, land, strat, NullCache(), a_slo, np.random.default_rng(i))
            want = Verdict.PASS_ACCURACY if land.accuracy_mean(cfg) > a_slo else Verdict.FAIL_ACCURACY
            agree += out.verdict == want
        assert agree / len(clear) >= 0.99

    def test_estimator_unbiased_under_round_robin(self, vt_pipeline):
        # equal-size strata + round-robin visits: the plain running mean
        # estimates the weighted mixture mean
        land = generate_landscape(seed=21, pipeline=vt_pipeline, noise_scale=0.08)
        cfg = (1, 2, 3)
        plan = PlanPoint(cfg, (0, 0, 0), (1.0, 1.0, 1.0))
        truth = land.accuracy_mean(cfg)
        estimates = []
        for s in range(40):
            strat = stratify(land.case_features, 4, seed=s)
            out = profile_plan(
                plan, land, strat, NullCache(), 0.5, np.random.default_rng(s), n_max=200
            )
            estimates.append(out.accuracy_estimate)
        spread = 0.08 / np.sqrt(np.mean([200]) * len(estimates))
        assert abs(np.mean(estimates) - truth) <= 4 * spread + 0.01

    def test_profiling_log_callback(self, vt_pipeline, vt_landscape):
        plan = PlanPoint((0, 0, 0), (0, 0, 0), (1.0, 1.0, 1.0))
        strat = stratify(vt_landscape.case_features, 4, seed=0)
        rows = []
        profile_plan(
            plan, vt_landscape, strat, PrefixCache(), 0.2, np.random.default_rng(0), log=rows.append
        )
        assert len(rows) == 1 and rows[0]["n"] >= 50 and "verdict" in rows[0]


class TestSessionMath:
    def test_welford_matches_numpy(self):
        rng = np.random.default_rng(5)
        xs = rng.uniform(0, 1, 200)
        s = ProfilingSession(plan=PlanPoint((0,), (0,), (1.0,)), a_slo=0.5)
        for x in xs:
            s.observe(float(x))
        assert s.mean == pytest.approx(xs.mean(), rel=1e-12)
        assert s.variance == pytest.approx(xs.var(ddof=1), rel=1e-10)

    def test_p_value_against_scipy(self):
        from scipy.stats import ttest_1samp

        rng = np.random.default_rng(6)
        xs = rng.normal(0.75, 0.05, 80)
        p_ref = ttest_1samp(xs, 0.72).pvalue
        p_got = two_sided_p_value(float(xs.mean()), float(xs.var(ddof=1)), len(xs), 0.72)
        assert p_got == pytest.approx(p_ref, rel=1e-9)

    def test_n_max_validation(self):
        with pytest.raises(ValueError):
            ProfilingSession(plan=PlanPoint((0,), (0,), (1.0,)), a_slo=0.5, min_samples=50, n_max=10)


class TestPrefixCache:
    def test_full_match_charges_nothing(self, vt_landscape):
        cache = PrefixCache()
        cfg = (1, 2, 3)
        t = vt_landscape.timings_for(cfg)
        first = cache.charge_case(cfg, 7, t.base_compute_s, t.output_bytes)
        assert first == pytest.approx(sum(t.base_compute_s))
        assert cache.lookup(cfg) == 3
        assert cache.charge_case(cfg, 7, t.base_compute_s, t.output_bytes) == 0.0

    def test_partial_prefix(self, vt_landscape):
        cache = PrefixCache()
        t1 = vt_landscape.timings_for((1, 2, 3))
        cache.charge_case((1, 2, 3), 0, t1.base_compute_s, t1.output_bytes)
        assert cache.lookup((1, 0, 0)) == 1
        t2 = vt_landscape.timings_for((1, 0, 0))
        charged = cache.charge_case((1, 0, 0), 0, t2.base_compute_s, t2.output_bytes)
        assert charged == pytest.approx(sum(t2.base_compute_s[1:]))

    def test_insert_is_idempotent(self):
        cache = PrefixCache()
        cache.insert((1, 2), [0, 1], bytes_per_case=10.0)
        before = cache.total_bytes
        cache.insert((1, 2), [0, 1], bytes_per_case=10.0)
        assert cache.total_bytes == before

    def test_randomized_sequence_matches_replay_trie(self, vt_pipeline):
        land = generate_landscape(seed=23, pipeline=vt_pipeline)
        rng = np.random.default_rng(9)
        cache = PrefixCache()
        trie = ReplayTrie()
        got = expected = 0.0
        for _ in range(300):
            cfg = tuple(int(rng.integers(len(op.knob_domain))) for op in vt_pipeline.operators)
            case = int(rng.integers(land.n_cases))
            t = land.timings_for(cfg)
            got += cache.charge_case(cfg, case, t.base_compute_s, t.output_bytes)
            expected += trie.charge(cfg, case, t.base_compute_s)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_cache_never_changes_estimates(self, vt_pipeline):
        land = generate_landscape(seed=29, pipeline=vt_pipeline)
        plan = PlanPoint((2, 1, 0), (0, 1, 2), (1.0, 1.0, 1.0))
        outs = []
        for cache in (PrefixCache(), NullCache()):
            strat = stratify(land.case_features, 4, seed=5)
            outs.append(
                profile_plan(plan, land, strat, cache, 0.6, np.random.default_rng(11))
            )
        assert outs[0].accuracy_estimate == outs[1].accuracy_estimate  # bitwise
        assert outs[0].samples_used == outs[1].samples_used
        assert outs[0].profiling_cost <= outs[1].profiling_cost


class TestFixedN:
    def test_fixed_n_draws_exactly_n(self, vt_landscape):
        plan = PlanPoint((0, 1, 2), (0, 0, 0), (1.0, 1.0, 1.0))
        out = profile_plan_fixed_n(plan, vt_landscape, 356, NullCache(), 0.5, np.random.default_rng(0))
        assert out.samples_used == 356
        assert out.verdict in (Verdict.PASS_ACCURACY, Verdict.FAIL_ACCURACY)
