import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locdiff.diffusion import (
    LinearScoreField,
    NoiseSchedule,
    SampleBatch,
    SamplingDiverged,
    TimeGrid,
    forward_perturb,
    linear_beta_schedule,
    ou_moments,
    read_matrix_csv,
    reverse_em_step,
    sample_reverse,
    sample_reverse_coupled,
    write_matrix_csv,
)
from locdiff.gaussian import discretized_ou_target, terminal_covariance
from locdiff.rng import stream


class StandardNormalScore:
    dim = 2

    def evaluate(self, x, t):
        return -x


class TestOuMoments:
    def test_zero(self):
        assert ou_moments(0.0) == (1.0, 0.0)

    def test_stationary_limit(self):
        a, s = ou_moments(50.0)
        assert abs(a) < 1e-15 and abs(s - 1.0) < 1e-15

    def test_ln2(self):
        a, s = ou_moments(math.log(2))
        assert a == pytest.approx(0.5, abs=1e-15)
        assert s == pytest.approx(math.sqrt(0.75), abs=1e-15)

    def test_negative(self):
        with pytest.raises(ValueError):
            ou_moments(-1e-3)

    @given(st.floats(0, 60))
    def test_unit_sum(self, t):
        a, s = ou_moments(t)
        assert a * a + s * s == pytest.approx(1.0, abs=1e-15)

    def test_array_input(self):
        a, s = ou_moments(np.array([0.0, 1.0]))
        assert a.shape == s.shape == (2,)


class TestSchedule:
    def test_paper_schedule(self):
        sch = linear_beta_schedule(1000, 1e-4, 0.05)
        assert sch.n_steps == 1000
        assert sch.betas[0] == 1e-4 and sch.betas[-1] == pytest.approx(0.05)
        assert np.all(np.diff(sch.betas) >= 0)

    def test_last_reverse_step(self):
        sch = linear_beta_schedule(1000, 1e-4, 0.05)
        assert sch.reverse_dts[-1] == pytest.approx(-0.5 * math.log(1 - 1e-4), rel=1e-14)
        assert sch.reverse_dts[-1] == pytest.approx(5.00025e-5, rel=1e-6)

    def test_constant_schedule(self):
        sch = linear_beta_schedule(10, 0.01, 0.01)
        assert np.allclose(sch.reverse_dts, sch.reverse_dts[0], rtol=0, atol=0)

    @pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
    def test_bad_arguments(self, args):
        with pytest.raises(ValueError):
            linear_beta_schedule(*args)

    @settings(max_examples=50)
    @given(st.integers(2, 500), st.floats(1e-5, 0.5), st.floats(0, 0.49), st.floats(0, 0.3))
    def test_bookkeeping(self, n, b1, extra, early):
        sch = linear_beta_schedule(n, b1, min(b1 + extra, 0.99), early_stop_t=early)
        assert np.all(sch.reverse_dts > 0)
        assert sch.total_T == pytest.approx(early + sch.reverse_dts.sum(), rel=1e-12)
        assert sch.grid[-1] == pytest.approx(sch.total_T - early, rel=1e-12)
        assert np.allclose(sch.score_times, sch.total_T - sch.grid[:-1], rtol=1e-12)

    def test_level_of_time(self):
        sch = linear_beta_schedule(20, 0.01, 0.2)
        for k, t in enumerate(sch.level_times):
            assert sch.level_of_time(t) == k
        with pytest.raises(ValueError):
            sch.level_of_time(0.5 * (sch.level_times[0] + sch.level_times[1]))

    def test_invalid_betas(self):
        with pytest.raises(ValueError):
            NoiseSchedule(np.array([0.1, 1.0]))


class TestTimeGrid:
    def test_gauss_legendre_integrates_polynomials(self):
        g = TimeGrid.gauss_legendre(np.linspace(0, 2, 3), order=4)
        assert np.sum(g.weights * g.times**7) == pytest.approx(2**8 / 8, rel=1e-13)

    def test_uniform_is_average(self):
        g = TimeGrid.uniform([1.0, 2.0, 3.0])
        assert np.sum(g.weights * g.times) == pytest.approx(2.0)


class TestForwardPerturb:
    def test_t_zero(self):
        x0 = np.array([1.0, -2.0])
        xt, eps = forward_perturb(x0, 0.0, stream(0))
        assert np.array_equal(xt, x0)
        assert eps.shape == x0.shape

    def test_moments(self):
        x0 = np.array([1.0, -2.0, 0.5])
        t = 0.3
        X = forward_perturb(np.tile(x0, (100_000, 1)), t, stream(1))[0]
        a, s = ou_moments(t)
        n = X.shape[0]
        assert np.all(np.abs(X.mean(0) - a * x0) <= 3 * s / math.sqrt(n))
        cov = np.cov(X.T)
        se = s**2 * math.sqrt(2.0 / n)
        assert np.all(np.abs(np.diag(cov) - s**2) <= 3 * se)
        assert np.all(np.abs(cov[~np.eye(3, dtype=bool)]) <= 3 * s**2 / math.sqrt(n))


class TestReverseStep:
    def test_hand_value(self):
        y = np.array([1.0])
        assert reverse_em_step(y, 0.1, -y, xi=np.zeros(1))[0] == pytest.approx(0.9)

    @pytest.mark.parametrize("dt", [1e-2, 1e-4, 1e-6])
    def test_small_step(self, dt):
        y, xi = np.array([0.3, -1.0]), np.array([1.0, -0.5])
        step = reverse_em_step(y, dt, -y, xi=xi) - y
        assert np.all(np.abs(step) <= 3 * math.sqrt(2 * dt))

    def test_nonpositive_dt(self):
        with pytest.raises(ValueError):
            reverse_em_step(np.zeros(1), 0.0, np.zeros(1), xi=np.zeros(1))


class TestSampler:
    def test_standard_normal_target(self):
        sch = linear_beta_schedule(200, 1e-3, 0.05)
        batch = sample_reverse(StandardNormalScore(), sch, 40_000, seed=3)
        n = batch.n_samples
        assert np.all(np.abs(batch.data.mean(0)) <= 3 / math.sqrt(n))
        cov = np.cov(batch.data.T)
        # discretized fixed point of the variance recursion is 2 / (2 - dt) ~ 1 + dt/2
        assert np.all(np.abs(np.diag(cov) - 1.0) <= 3 * math.sqrt(2 / n) + 0.01)
        assert abs(cov[0, 1]) <= 3 / math.sqrt(n)

    def test_empty_batch(self):
        sch = linear_beta_schedule(10, 1e-3, 0.05)
        batch = sample_reverse(StandardNormalScore(), sch, 0, seed=0)
        assert batch.data.shape == (0, 2)

    def test_exact_gaussian_target_matches_propagated_covariance(self):
        target = discretized_ou_target(5, 0.3)
        sch = linear_beta_schedule(1000, 1e-4, 0.05)
        field = target.score_field()
        batch = sample_reverse(field, sch, 30_000, seed=7)
        S = terminal_covariance(field, sch)
        C_hat = np.cov(batch.data.T, bias=True)
        n = batch.n_samples
        se = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S**2) / n)
        assert np.all(np.abs(C_hat - S) <= 4 * se)
        # the discretized chain itself lands close to the target covariance
        assert np.abs(S - target.covariance).max() < 0.05

    def test_generic_and_linear_paths_agree(self):
        target = discretized_ou_target(4, 0.5)
        sch = linear_beta_schedule(50, 1e-3, 0.1)
        lin = target.score_field()

        class Wrapped:
            dim = 4

            def evaluate(self, x, t):
                return lin.evaluate(x, t)

        a, b = sample_reverse_coupled([lin, Wrapped()], sch, 300, seed=1)
        assert np.allclose(a.data, b.data, rtol=1e-12, atol=1e-12)

    def test_determinism_and_worker_independence(self):
        sch = linear_beta_schedule(30, 1e-3, 0.1)
        f = StandardNormalScore()
        a = sample_reverse(f, sch, 1000, seed=5, chunk_size=128)
        b = sample_reverse(f, sch, 1000, seed=5, chunk_size=128, workers=2)
        assert np.array_equal(a.data, b.data)
        c = sample_reverse(f, sch, 1000, seed=6, chunk_size=128)
        assert not np.array_equal(a.data, c.data)

    def test_divergence_names_step(self):
        class Exploding:
            dim = 1

            def evaluate(self, x, t):
                return np.full_like(x, np.inf)

        with pytest.raises(SamplingDiverged) as info:
            sample_reverse(Exploding(), linear_beta_schedule(5, 0.01, 0.1), 3, seed=0)
        assert info.value.step == 0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            sample_reverse_coupled(
                [StandardNormalScore(), LinearScoreField(lambda t: np.eye(3), 3)],
                linear_beta_schedule(5, 0.01, 0.1),
                3,
                seed=0,
            )


class TestSerialization:
    def test_batch_round_trip(self, tmp_path):
        data = stream(0).standard_normal((7, 3)) * 1e-7
        b = SampleBatch(data, {"seed": 4, "schedule": {"n_steps": 10}})
        b.to_csv(tmp_path / "s.csv")
        back = SampleBatch.from_csv(tmp_path / "s.csv")
        assert np.array_equal(back.data, data)
        assert back.meta == b.meta
        assert (tmp_path / "s.csv").read_text().splitlines()[0] == "x0,x1,x2"

    def test_matrix_csv_exact(self, tmp_path):
        M = np.array([[0.1, 1 / 3], [math.pi, -2.5e-300]])
        write_matrix_csv(tmp_path / "m.csv", M, ["a", "b"])
        header, back = read_matrix_csv(tmp_path / "m.csv")
        assert header == ["a", "b"] and np.array_equal(back, M)
