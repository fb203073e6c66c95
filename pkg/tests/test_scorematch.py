import math

import numpy as np
import pytest

from locdiff.diffusion import TimeGrid, linear_beta_schedule, sample_reverse
from locdiff.gaussian import discretized_ou_target
from locdiff.graph import lattice_graph, path_graph
from locdiff.mlp import MlpScoreNet
from locdiff.rng import stream
from locdiff.scorematch import (
    ComponentTrainingError,
    TrainConfig,
    TrainingDiverged,
    build_hypothesis,
    clamp_constant,
    component_losses,
    compose_score,
    dsm_component_loss,
    effective_dimension,
    empirical_dsm_loss,
    fit_dsm,
    load_hypothesis,
    net_to_score,
    save_hypothesis,
    train_all_parallel,
    train_component,
)

GRID = TimeGrid.uniform([0.1, 0.5, 1.0])


def small_problem(d=6, r=1, n=200):
    g = path_graph(d)
    X = discretized_ou_target(d, 0.3).sample(n, stream(0))
    h = build_hypothesis(g, r, (8,), seed=1)
    return g, X, h


class TestNetToScore:
    def test_noise(self):
        u, du = net_to_score(np.array([[2.0]]), 0.5, "noise")
        assert u[0, 0] == -4.0 and du[0, 0] == -2.0

    def test_residual_zero_output_is_standard_normal_score(self):
        z = np.array([[0.7]])
        u, _ = net_to_score(np.zeros((1, 1)), 0.3, "residual", z_own=z)
        assert u[0, 0] == -0.7

    def test_residual_requires_z(self):
        with pytest.raises(ValueError):
            net_to_score(np.zeros((1, 1)), 0.3, "residual")

    def test_clamp(self):
        u, du = net_to_score(np.array([[10.0, 0.1]]), 0.5, "score", clamp_bound=1.0)
        assert u.tolist() == [[2.0, 0.1]] and du.tolist() == [[0.0, 1.0]]

    def test_clamp_constant(self):
        assert clamp_constant(2.0, 100) == pytest.approx(2 * math.log(100) ** 2)


class TestHypothesis:
    def test_window_sizes(self):
        h = build_hypothesis(lattice_graph((5, 5)), 1, (4,), seed=0)
        assert effective_dimension(h) == 5
        assert h.nets[12].input_dim == 6

    def test_radius_zero(self):
        h = build_hypothesis(path_graph(4), 0, (4,), seed=0)
        assert all(w.size == 1 for w in h.windows)

    def test_shared_groups_need_same_layout(self):
        with pytest.raises(ValueError):
            build_hypothesis(path_graph(4), 1, (4,), seed=0, groups=[0, 0, 0, 0])
        h = build_hypothesis(path_graph(5), 1, (4,), seed=0, groups=[0, 1, 1, 1, 2])
        assert h.members(1) == [1, 2, 3]

    def test_save_load(self, tmp_path):
        g = path_graph(4, [1, 2, 1, 1])
        h = build_hypothesis(g, 1, (3,), seed=2, parametrization="noise")
        cfg = TrainConfig(n_epochs=3, time_grid=GRID)
        save_hypothesis(tmp_path / "h.json", h, cfg)
        back, hdr = load_hypothesis(tmp_path / "h.json")
        assert back.graph == g and back.radius == 1 and back.parametrization == "noise"
        assert hdr["train"]["n_epochs"] == 3
        for a, b in zip(h.nets, back.nets):
            assert np.array_equal(a.get_flat(), b.get_flat())

    def test_tampered_hash(self, tmp_path):
        h = build_hypothesis(path_graph(3), 1, (3,), seed=0)
        save_hypothesis(tmp_path / "h.json", h)
        text = (tmp_path / "h.json").read_text().replace("edge 1 2", "edge 0 2")
        (tmp_path / "h.json").write_text(text)
        with pytest.raises(ValueError):
            load_hypothesis(tmp_path / "h.json")


class TestLoss:
    def test_decomposes_over_components(self):
        g, X, h = small_problem()
        eps = stream(5).standard_normal((2, len(GRID), X.shape[0], X.shape[1]))
        total = empirical_dsm_loss(compose_score(h), X, GRID, eps)
        parts = component_losses(h, X, GRID, eps)
        assert total == pytest.approx(parts.sum(), rel=1e-12)

    def test_exact_score_net_has_irreducible_loss_only(self):
        # a linear "network" reproducing the exact score for N(0, I) data
        X = stream(0).standard_normal((20_000, 1))
        grid = TimeGrid.uniform([0.5])
        net = MlpScoreNet((2, 1), [np.array([[-1.0, 0.0]])], [np.zeros(1)])
        loss = dsm_component_loss(net, X, [0], grid, rng=stream(1))
        _, s = (math.exp(-0.5), math.sqrt(-math.expm1(-1.0)))
        # E||-z + eps/s||^2 = 1/s^2 - 1 for unit-variance data
        assert loss == pytest.approx(1 / s**2 - 1, rel=0.03)

    def test_needs_noise_source(self):
        with pytest.raises(ValueError):
            dsm_component_loss(MlpScoreNet.init((2, 1), stream(0)), np.zeros((3, 1)), [0], GRID)


class TestTraining:
    def test_loss_decreases(self):
        g, X, h = small_problem()
        cfg = TrainConfig(learning_rate=1e-2, n_train_points=200, batch_size=50, n_epochs=30, time_grid=GRID)
        res = train_component(2, X, h, cfg)
        assert res.loss_trace[-5:].mean() < res.loss_trace[:5].mean()
        assert res.n_steps == 30 * 4

    def test_workers_do_not_change_result(self):
        g, X, h = small_problem(d=4)
        cfg = TrainConfig(learning_rate=1e-3, n_train_points=50, batch_size=25, n_epochs=3, time_grid=GRID)
        a, ta = train_all_parallel(X, h, cfg, workers=1)
        b, tb = train_all_parallel(X, h, cfg, workers=2)
        for na, nb in zip(a.nets, b.nets):
            assert np.array_equal(na.get_flat(), nb.get_flat())
        assert all(np.array_equal(ta[k], tb[k]) for k in ta)

    def test_missing_grid(self):
        g, X, h = small_problem()
        with pytest.raises(ValueError):
            fit_dsm(h.nets[0], X[:, h.windows[0]], h.target_cols[0], TrainConfig(), stream(0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self):
        g, X, h = small_problem(d=3)
        cfg = TrainConfig(learning_rate=1e300, n_train_points=20, batch_size=10, n_epochs=50, time_grid=GRID)
        with pytest.raises(ComponentTrainingError) as info:
            train_all_parallel(X * 1e200, h, cfg)
        assert all(isinstance(e, TrainingDiverged) for e in info.value.failures.values())

    @pytest.mark.parametrize("kw", [{"learning_rate": -1}, {"batch_size": 0}, {"weighting": "x"}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_trained_field_samples(self):
        g, X, h = small_problem(d=4)
        field = compose_score(h)
        batch = sample_reverse(field, linear_beta_schedule(20, 1e-3, 0.1), 50, seed=0)
        assert batch.data.shape == (50, 4) and np.isfinite(batch.data).all()
