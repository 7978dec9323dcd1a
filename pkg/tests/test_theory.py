import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoelab import theory
from smoelab.common import ConfigError
from smoelab.theory import (
    PAPER_LITERAL,
    THEOREM_CONSISTENT,
    ErrorModelParams,
    FunctionTable,
)


def params(**kw):
    base = dict(N=4, T=8, d_N=20.0, m=10, c1=1.0, c2=1.0, delta=0.05,
                variant=THEOREM_CONSISTENT)
    base.update(kw)
    return ErrorModelParams(**base)


class TestApproxError:
    def test_direct_substitution(self):
        assert theory.approx_error(4, params(N=8)) == pytest.approx(16.0)

    def test_k_equals_t_n2(self):
        p = params(N=2, T=4, c1=2.5)
        assert theory.approx_error(4, p) == pytest.approx(2.5)

    def test_strictly_decreasing(self):
        p = params(N=4)
        vals = [theory.approx_error(k, p) for k in range(1, 9)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_k_out_of_range(self):
        with pytest.raises(ConfigError):
            theory.approx_error(9, params())


class TestEstError:
    def test_literal_zero_at_k_eq_t(self):
        assert theory.est_error(8, params(variant=PAPER_LITERAL)) == 0.0

    def test_literal_argmax_near_t_over_e(self):
        # k*ln(8/k) peaks at k=3 on the integer grid (T/e ~ 2.94)
        p = params(variant=PAPER_LITERAL)
        vals = {k: theory.est_error(k, p) for k in range(1, 9)}
        assert max(vals, key=vals.get) == 3

    def test_literal_argmax_tracks_t_over_e(self):
        for T in range(3, 65):
            p = params(T=T, variant=PAPER_LITERAL)
            vals = [k * math.log(T / k) for k in range(1, T + 1)]
            k_arg = 1 + int(np.argmax(vals))
            est = [theory.est_error(k, p) for k in range(1, T + 1)]
            assert 1 + int(np.argmax(est)) == k_arg
            # the argmax of k ln(T/k) is one of the integers around T/e
            assert abs(k_arg - T / math.e) <= 1.0

    def test_theorem_consistent_value(self):
        val = theory.est_error(4, params())
        assert val == pytest.approx(math.sqrt(4 * 4 * 20 * math.log(8) / 10),
                                    abs=1e-12)
        assert val == pytest.approx(8.157, abs=1e-3)

    def test_theorem_consistent_increasing(self):
        p = params()
        vals = [theory.est_error(k, p) for k in range(1, 9)]
        assert all(a < b for a, b in zip(vals, vals[1:]))


class TestTotalErrorAndOptimalK:
    def test_zero_constants(self):
        p = params(c1=0.0, c2=0.0)
        assert theory.total_error(5, p) == 0.0

    def test_reference_curve_values(self):
        p = params()
        assert theory.total_error(3, p) == pytest.approx(12.398, abs=1e-3)
        assert theory.total_error(4, p) == pytest.approx(12.157, abs=1e-3)
        assert theory.total_error(5, p) == pytest.approx(12.320, abs=1e-3)

    def test_grid_kstar(self):
        k_star, curve = theory.optimal_k(params())
        assert k_star == 4
        assert len(curve) == 8

    def test_large_m_pushes_kstar_to_t(self):
        k_star, _ = theory.optimal_k(params(m=10**9))
        assert k_star == 8

    def test_paper_literal_always_t(self):
        for N in (2, 4, 8):
            for m in (10, 1000, 10**6):
                p = params(N=N, m=m, variant=PAPER_LITERAL)
                k_star, _ = theory.optimal_k(p)
                assert k_star == p.T  # documented degeneracy

    def test_kstar_monotone_in_n(self):
        ks = [theory.optimal_k(params(N=N))[0] for N in range(1, 9)]
        assert all(a <= b for a, b in zip(ks, ks[1:]))

    def test_kstar_monotone_in_m(self):
        ks = [theory.optimal_k(params(m=m))[0]
              for m in (1, 10, 100, 1000, 10**4, 10**6)]
        assert all(a <= b for a, b in zip(ks, ks[1:]))

    def test_kstar_antitone_in_dn(self):
        ks = [theory.optimal_k(params(d_N=d))[0]
              for d in (0.5, 2, 8, 32, 128, 512)]
        assert all(a >= b for a, b in zip(ks, ks[1:]))


class TestOptimalKContinuous:
    def test_closed_form_value(self):
        p = params()
        expected = (2.0 ** (2 / 3)) * 4 * (10 / (20 * math.log(8))) ** (1 / 3)
        assert theory.optimal_k_continuous(p) == pytest.approx(expected)

    def test_linear_in_n(self):
        a = theory.optimal_k_continuous(params(N=2))
        b = theory.optimal_k_continuous(params(N=4))
        assert b == pytest.approx(2 * a)

    def test_cube_root_in_m(self):
        a = theory.optimal_k_continuous(params(m=100))
        b = theory.optimal_k_continuous(params(m=800))
        assert b == pytest.approx(2 * a)

    def test_inverse_cube_root_in_dn(self):
        a = theory.optimal_k_continuous(params(d_N=5.0))
        b = theory.optimal_k_continuous(params(d_N=40.0))
        assert b == pytest.approx(a / 2)

    def test_literal_variant_unsupported(self):
        with pytest.raises(ConfigError):
            theory.optimal_k_continuous(params(variant=PAPER_LITERAL))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_matches_fine_grid_argmin(self, seed):
        rng = np.random.default_rng(seed)
        p = params(
            N=int(rng.integers(1, 16)),
            T=int(rng.integers(2, 64)),
            d_N=float(rng.uniform(0.5, 50)),
            m=int(rng.integers(10, 10**6)),
            c1=float(rng.uniform(0.1, 10)),
            c2=float(rng.uniform(0.1, 10)),
        )
        k_cont = theory.optimal_k_continuous(p)
        # fine grid over a wide continuous range of k
        grid = np.linspace(0.01, max(4 * k_cont, 10.0), 20000)
        a = math.sqrt(p.N * p.d_N * math.log(p.T) / p.m)
        total = p.c1 * p.N ** 2 / grid + p.c2 * a * np.sqrt(grid)
        k_grid = grid[int(np.argmin(total))]
        cell = grid[1] - grid[0]
        assert abs(k_grid - k_cont) <= cell + 1e-9


class TestTheorem1Bound:
    def test_confidence_term_only(self):
        # R_m=0, d_N=0: only ln(2/delta)/(2m) survives
        for m in (10, 1000, 12345):
            got = theory.theorem1_bound(C=1.0, R_m=0.0, k=1, N=1, d_N=0.0,
                                        T=2, m=m, delta=0.05)
            assert got == pytest.approx(2 * math.sqrt(math.log(40) / (2 * m)),
                                        rel=1e-12)

    def test_hand_arithmetic(self):
        got = theory.theorem1_bound(C=1.0, R_m=0.1, k=2, N=4, d_N=3.0, T=8,
                                    m=1000, delta=0.05)
        inner = (2 * 2 * 4 * 3 * math.log(8) + 4 * 3 * math.log(2000)
                 + math.log(40)) / 2000
        assert got == pytest.approx(0.4 + 2 * math.sqrt(inner), rel=1e-12)

    def test_large_m_limit(self):
        got = theory.theorem1_bound(C=2.0, R_m=0.25, k=3, N=2, d_N=1.0, T=8,
                                    m=10**12, delta=0.5)
        assert got == pytest.approx(4 * 2.0 * 0.25, abs=1e-4)

    def test_monotonicity(self):
        base = dict(C=1.0, R_m=0.1, k=2, N=4, d_N=3.0, T=8, m=1000,
                    delta=0.05)

        def at(**kw):
            return theory.theorem1_bound(**{**base, **kw})

        assert at(k=3) > at(k=2) > at(k=1)
        assert at(N=8) > at(N=4)
        assert at(d_N=6.0) > at(d_N=3.0)
        assert at(m=2000) < at(m=1000)
        assert at(delta=0.1) < at(delta=0.05)

    def test_domain_errors(self):
        with pytest.raises(ConfigError):
            theory.theorem1_bound(1.0, 0.1, 9, 4, 3.0, 8, 1000, 0.05)
        with pytest.raises(ConfigError):
            theory.theorem1_bound(1.0, 0.1, 2, 4, 3.0, 8, 1000, 1.5)


class TestRoutingPatternBound:
    def test_k_equals_t(self):
        got = theory.routing_pattern_bound(T=8, k=8, N=3, d_N=2.0, m=50)
        assert got == pytest.approx(6.0 * math.log(100), rel=1e-12)

    def test_hand_arithmetic(self):
        got = theory.routing_pattern_bound(T=8, k=2, N=1, d_N=1.0, m=100)
        assert got == pytest.approx(2 * math.log(28) + math.log(200),
                                    rel=1e-12)

    def test_monotone_in_m(self):
        vals = [theory.routing_pattern_bound(8, 2, 1, 1.0, m)
                for m in (10, 100, 1000)]
        assert vals[0] < vals[1] < vals[2]

    def test_no_overflow_at_scale(self):
        got = theory.routing_pattern_bound(T=4096, k=2048, N=100,
                                           d_N=1000.0, m=10**9)
        assert math.isfinite(got)

    def test_k_above_t(self):
        with pytest.raises(ConfigError):
            theory.routing_pattern_bound(8, 9, 1, 1.0, 10)


class TestRademacher:
    def test_zero_class(self):
        t = FunctionTable(np.zeros((1, 16)))
        mean, se = theory.rademacher_mc(t, 100, seed=0)
        assert mean == 0.0

    def test_plus_minus_constants(self):
        m = 100
        t = FunctionTable(np.vstack([np.ones(m), -np.ones(m)]))
        mean, se = theory.rademacher_mc(t, 100_000, seed=1)
        expected = math.sqrt(2 / (math.pi * m))
        assert mean == pytest.approx(expected, rel=0.10)

    def test_singleton_constant(self):
        t = FunctionTable(np.ones((1, 50)))
        mean, se = theory.rademacher_mc(t, 20_000, seed=2)
        assert abs(mean) <= 3 * se

    def test_matches_exhaustive_small_m(self):
        rng = np.random.default_rng(3)
        for m in (4, 8, 10, 12):
            t = FunctionTable(rng.normal(size=(5, m)))
            exact = theory.rademacher_exact(t)
            mean, se = theory.rademacher_mc(t, 40_000, seed=m)
            assert abs(mean - exact) <= 3 * max(se, 1e-12)

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            theory.rademacher_mc(FunctionTable(np.ones((1, 4))), 0)
        with pytest.raises(ConfigError):
            FunctionTable(np.array([]))


class TestPowerlaw:
    def test_uniform_difficulties(self):
        w = theory.powerlaw_weights([2.0, 2.0, 2.0], alpha=2.0)
        np.testing.assert_allclose(w, np.ones((3, 3)))

    def test_hand_arithmetic_n2(self):
        w = theory.powerlaw_weights([1.0, 3.0], alpha=2.0)
        raw = np.array([[1 / 4, 1 / 16], [1 / 16, 1 / 36]])
        np.testing.assert_allclose(w, raw * (4.0 / raw.sum()), rtol=1e-12)

    def test_swap_equivariance(self):
        w1 = theory.powerlaw_weights([1.0, 2.0, 5.0], alpha=1.5)
        w2 = theory.powerlaw_weights([5.0, 2.0, 1.0], alpha=1.5)
        perm = [2, 1, 0]
        np.testing.assert_allclose(w2, w1[np.ix_(perm, perm)])

    @given(st.integers(0, 2**31 - 1), st.integers(2, 12))
    @settings(max_examples=60, deadline=None)
    def test_symmetric_positive_normalized(self, seed, n):
        rng = np.random.default_rng(seed)
        D = rng.uniform(0.1, 10, size=n)
        alpha = float(rng.uniform(1.01, 5))
        w = theory.powerlaw_weights(D, alpha)
        assert (w > 0).all()
        np.testing.assert_allclose(w, w.T, rtol=1e-12)
        assert w.sum() == pytest.approx(n * n, abs=1e-9)

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            theory.powerlaw_weights([1.0, 2.0], alpha=1.0)
        with pytest.raises(ConfigError):
            theory.powerlaw_weights([1.0, -2.0], alpha=2.0)


class TestWeightedApproxError:
    def test_uniform_reduces_to_pairwise_count(self):
        p = params(N=3)
        w = np.ones((3, 3))
        for k in (1, 2, 4):
            assert theory.weighted_approx_error(w, k) == pytest.approx(
                theory.approx_error(k, p) if k <= p.T else 9.0 / k)

    def test_inverse_k_scaling(self):
        w = np.random.default_rng(0).uniform(0.1, 2, size=(4, 4))
        assert theory.weighted_approx_error(w, 4) == pytest.approx(
            theory.weighted_approx_error(w, 2) / 2)

    def test_powerlaw_n2_example(self):
        w = theory.powerlaw_weights([1.0, 3.0], alpha=2.0)
        assert theory.weighted_approx_error(w, 2) == pytest.approx(2.0)

    def test_k_below_one(self):
        with pytest.raises(ConfigError):
            theory.weighted_approx_error(np.ones((2, 2)), 0)


class TestCurveExport:
    def test_csv_layout(self, tmp_path):
        path = theory.export_error_curve(params(), tmp_path)
        lines = open(path).read().strip().splitlines()
        assert lines[0] == "k,approx,est,total"
        assert len(lines) == 9
        k, a, e, t = lines[4].split(",")
        assert int(k) == 4
        assert float(t) == pytest.approx(float(a) + float(e))
