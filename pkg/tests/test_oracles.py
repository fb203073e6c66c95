import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locdiff.diffusion import TimeGrid, ou_moments
from locdiff.gaussian import discretized_ou_target, random_banded_precision
from locdiff.graph import UNREACHABLE
from locdiff.oracles import (
    correlation_decay_bound,
    correlation_decay_check,
    dsm_equivalence_check,
    integral_bound_check,
    integral_bound_t_form,
    linear_l2_sq,
    localization_error_exact,
    localization_error_profile,
    loglinear_fit,
    optimal_localized_score_conditional,
    optimal_localized_score_marginal,
    optimal_trial,
    pythagorean_check,
    random_spd,
    run_verification,
    locality_bound_rhs,
    write_report_csv,
)
from locdiff.rng import stream


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 10**6))
    gen = stream(seed)
    d = draw(st.integers(1, 10))
    C = random_spd(d, gen)
    j = draw(st.integers(0, d - 1))
    extra = draw(st.sets(st.integers(0, d - 1)))
    return C, sorted({j} | extra), j


class TestOptimalScore:
    def test_identity_covariance(self):
        u = optimal_localized_score_conditional(np.eye(3), [1, 2], 1)
        assert np.allclose(u.coeff, [1.0, 0.0])

    def test_full_window_equals_true_score(self):
        C = random_spd(5, stream(1))
        u = optimal_localized_score_marginal(C, range(5), 2)
        assert np.allclose(u.coeff, np.linalg.inv(C)[2], rtol=1e-12)

    def test_singleton_window(self):
        C = random_spd(4, stream(2))
        u = optimal_localized_score_marginal(C, [3], 3)
        assert u.coeff[0] == pytest.approx(1 / C[3, 3], rel=1e-14)

    def test_j_outside_window(self):
        with pytest.raises(ValueError):
            optimal_localized_score_marginal(np.eye(3), [0, 1], 2)

    def test_evaluate(self):
        u = optimal_localized_score_marginal(np.diag([2.0, 4.0]), [0, 1], 0)
        assert u.evaluate(np.array([1.0, 3.0])) == pytest.approx(-0.5)

    @settings(max_examples=60, deadline=None)
    @given(instances())
    def test_formulas_agree(self, inst):
        C, W, j = inst
        a = optimal_localized_score_conditional(C, W, j).coeff
        b = optimal_localized_score_marginal(C, W, j).coeff
        assert np.abs(a - b).max() <= 1e-8 * np.abs(b).max()


class TestPythagorean:
    def test_zero_at_optimum(self):
        C = random_spd(6, stream(3))
        u = optimal_localized_score_marginal(C, [1, 2, 3], 2)
        assert pythagorean_check(C, [1, 2, 3], 2, [u.coeff]) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(instances(), st.integers(0, 10**6))
    def test_identity(self, inst, seed):
        C, W, j = inst
        trials = list(stream(seed).standard_normal((5, len(W))))
        scale = max(1.0, np.abs(np.linalg.inv(C)).max() ** 2 * np.abs(C).max())
        assert pythagorean_check(C, W, j, trials) <= 1e-8 * scale

    def test_localization_error_zero_for_full_window(self):
        C = random_spd(5, stream(4))
        assert localization_error_exact(C, range(5), 0) == pytest.approx(0.0, abs=1e-10)

    def test_linear_l2(self):
        assert linear_l2_sq(np.diag([1.0, 2.0]), [1.0, 1.0], [0.0, 0.0]) == 3.0


class TestBounds:
    def test_bound_at_zero_distance(self):
        a, s = ou_moments(0.5)
        lead = a**2 / (s**2 * (2.0 * s**2 + a**2))
        assert locality_bound_rhs(2.0, 8.0, 0.5, 0) == pytest.approx(lead, rel=1e-14)

    def test_unreachable_is_zero(self):
        assert locality_bound_rhs(1.0, 3.0, 0.5, UNREACHABLE) == 0.0
        assert correlation_decay_bound(1.0, 3.0, UNREACHABLE) == 0.0

    def test_bound_decreases_with_distance(self):
        vals = locality_bound_rhs(1.0, 4.0, 0.3, np.arange(6))
        assert np.all(np.diff(vals) < 0)

    @pytest.mark.parametrize("m,M", [(0.0, 1.0), (2.0, 1.0)])
    def test_bad_spectrum(self, m, M):
        with pytest.raises(ValueError):
            locality_bound_rhs(m, M, 0.5, 1)
        with pytest.raises(ValueError):
            correlation_decay_bound(m, M, 1)

    def test_correlation_decay_hand_value(self):
        assert correlation_decay_bound(0.5, 2.0, 2) == pytest.approx(2 * 0.75**2)

    @pytest.mark.parametrize("seed", range(5))
    def test_correlation_decay_holds(self, seed):
        T = random_banded_precision(80, 3, 3.0, 0.6, stream(seed))
        assert correlation_decay_check(T).holds

    def test_correlation_decay_ou(self):
        assert correlation_decay_check(discretized_ou_target(50, 0.2)).holds


class TestIntegralBound:
    @pytest.mark.parametrize("m,M,k", [(0.5, 2.0, 1), (1.0, 5.0, 2), (2.0, 10.0, 1)])
    def test_lambda_and_t_forms_agree(self, m, M, k):
        assert integral_bound_check(m, M, k).lhs == pytest.approx(integral_bound_t_form(m, M, k), rel=1e-7)

    def test_equal_spectrum(self):
        ib = integral_bound_check(1.0, 1.0, 3)
        assert ib.lhs == 0.0 and ib.rhs == 0.0 and ib.holds

    @pytest.mark.parametrize("m", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("M", [2.0, 5.0, 10.0])
    @pytest.mark.parametrize("k", [1, 3, 10])
    def test_holds(self, m, M, k):
        ib = integral_bound_check(m, M, k)
        assert ib.slack >= -1e-10

    def test_bad_k(self):
        with pytest.raises(ValueError):
            integral_bound_check(1.0, 2.0, 0)


class TestDsmEquivalence:
    def test_small_run(self):
        target = discretized_ou_target(6, 0.3)
        W, j = [1, 2, 3], 2
        trials = [optimal_trial(target, W, j), np.zeros(3), np.array([1.0, 0.5, -0.2])]
        grid = TimeGrid.gauss_legendre(np.linspace(0.1, 1.0, 3), order=2)
        rep = dsm_equivalence_check(target, W, j, trials, grid, n_mc=20_000, seed=1)
        assert rep.differences_agree
        assert rep.minimizer_ok(0)
        assert rep.l2_to_optimal[0] == pytest.approx(0.0, abs=1e-12)

    def test_rejects_zero_time(self):
        target = discretized_ou_target(3, 0.3)
        with pytest.raises(ValueError):
            dsm_equivalence_check(target, [0], 0, [np.zeros(1)], TimeGrid.uniform([0.0, 1.0]), n_mc=10)


class TestProfile:
    def test_decay(self):
        target = discretized_ou_target(31, 0.2)
        grid = TimeGrid.gauss_legendre(np.array([0.05, 1.0]), order=3)
        radii = list(range(1, 8))
        prof = localization_error_profile(target, radii, grid)
        assert np.all(np.diff(prof) < 0)
        slope, r2 = loglinear_fit(radii, prof)
        assert slope < 0 and r2 > 0.9

    def test_loglinear_exact(self):
        x = np.arange(5.0)
        slope, r2 = loglinear_fit(x, 3 * np.exp(-0.7 * x))
        assert slope == pytest.approx(-0.7) and r2 == pytest.approx(1.0)


class TestVerification:
    def test_unknown_suite(self):
        with pytest.raises(ValueError):
            run_verification("nope")

    def test_locality_suite(self, tmp_path):
        rows = run_verification("locality", seed=0)
        assert all(r.passed for r in rows)
        write_report_csv(rows, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "name,parameters,lhs,rhs,slack,pass"
        assert len(lines) == len(rows) + 1
