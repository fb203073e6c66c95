"""Localized hypothesis spaces and denoising score matching.

Component ``j`` of a localized score only sees the coordinates of its
neighborhood window ``N_j^r`` and the diffusion time.  The empirical DSM
loss splits into one term per component, so components (or groups of
components sharing weights) are trained independently.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import SampleBatch, TimeGrid, ou_moments
from .graph import DependencyGraph, flatten_window, format_graph, neighborhood, parse_graph
from .mlp import AdamState, MlpScoreNet, adam_step, load_model, save_model
from .rng import stream

PARAMETRIZATIONS = ("score", "noise", "residual")
WEIGHTINGS = ("dsm", "noise")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"training diverged at optimizer step {step}" + (f" ({detail})" if detail else ""))


class ComponentTrainingError(RuntimeError):
    """One or more component trainings failed; ``failures`` maps group id to the error."""

    def __init__(self, failures: dict):
        self.failures = failures
        names = ", ".join(f"group {g}: {e}" for g, e in sorted(failures.items()))
        super().__init__(f"{len(failures)} component training(s) failed: {names}")


@dataclass
class TrainConfig:
    """Optimizer and sampling settings for DSM training.

    Training points are ``n_train_points`` pairs (window, time node) drawn once
    with the time node uniform over ``time_grid``; each optimizer step draws
    ``n_mc_noise`` fresh noise vectors per point.  ``weighting`` selects the
    per-time loss weight: ``"dsm"`` is 1, ``"noise"`` is ``sigma_t^2``.
    """

    learning_rate: float = 5e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    n_train_points: int = 5000
    batch_size: int = 100
    n_epochs: int = 100
    seed: int = 0
    time_grid: TimeGrid | None = None
    n_mc_noise: int = 1
    weighting: str = "dsm"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.n_train_points < 1 or self.batch_size < 1 or self.n_mc_noise < 1:
            raise ValueError("n_train_points, batch_size and n_mc_noise must be >= 1")
        if self.n_epochs < 0:
            raise ValueError("n_epochs must be non-negative")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")


def net_to_score(
    out: np.ndarray, sigma, parametrization: str, clamp_bound: float | None = None, z_own=None
):
    """Map raw network output to a score value and its derivative w.r.t. the output.

    ``"score"``: the output is the score.  ``"noise"``: the output predicts the
    injected noise and the score is ``-out / sigma``.  ``"residual"``: the
    noise prediction is ``sigma * z_own + out``, exact for unit-variance
    Gaussian data when ``out = 0``, so the score is ``-z_own - out / sigma``
    (``z_own`` is the noised input at the output coordinates).  With
    ``clamp_bound`` the score is clipped to ``[-clamp_bound / sigma, clamp_bound / sigma]``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if parametrization == "score":
        u, du = out, np.ones_like(out)
    elif parametrization == "noise":
        u, du = -out / sigma, -np.ones_like(out) / sigma
    elif parametrization == "residual":
        if z_own is None:
            raise ValueError("residual parametrization needs the noised own coordinates")
        u, du = -np.asarray(z_own) - out / sigma, -np.ones_like(out) / sigma
    else:
        raise ValueError(f"unknown parametrization {parametrization!r}")
    if clamp_bound is not None:
        bound = clamp_bound / sigma
        inside = np.abs(u) < bound
        u = np.clip(u, -bound, bound)
        du = du * inside
    return u, du


def clamp_constant(c: float, n_train: int) -> float:
    """``c log^2(N)``, the numerator of the output bound ``c log^2(N) / sigma``."""
    return float(c * math.log(n_train) ** 2)


def _grid_moments(grid: TimeGrid):
    alpha, sigma = ou_moments(grid.times)
    alpha, sigma = np.atleast_1d(alpha), np.atleast_1d(sigma)
    if np.any(sigma <= 0):
        raise ValueError("DSM loss needs sigma_t > 0; remove t = 0 from the time grid")
    return alpha, sigma


def dsm_component_loss(
    net: MlpScoreNet,
    window_samples: np.ndarray,
    target_cols,
    grid: TimeGrid,
    rng: np.random.Generator | None = None,
    n_mc: int = 1,
    eps: np.ndarray | None = None,
    parametrization: str = "score",
    clamp_bound: float | None = None,
) -> float:
    """Monte Carlo DSM loss of one component.

    ``sum_k w_k mean_{i, mc} ||u(alpha_k x_i + sigma_k eps, f_k) + eps_target / sigma_k||^2``
    where ``(w_k, f_k)`` are the grid weights and time features.  ``eps`` (shape
    ``n_mc x n_times x n x window``) replaces the draws from ``rng``.
    """
    X = np.asarray(window_samples, dtype=float)
    cols = np.atleast_1d(np.asarray(target_cols, dtype=int))
    alpha, sigma = _grid_moments(grid)
    n, w = X.shape
    if eps is None:
        if rng is None:
            raise ValueError("need rng or eps")
        eps = rng.standard_normal((n_mc, len(grid), n, w))
    total = 0.0
    for k in range(len(grid)):
        acc = 0.0
        for e in eps[:, k]:
            z = alpha[k] * X + sigma[k] * e
            inp = np.hstack([z, np.full((n, 1), grid.features[k])])
            u, _ = net_to_score(net.forward(inp), sigma[k], parametrization, clamp_bound, z[:, cols])
            acc += float(((u + e[:, cols] / sigma[k]) ** 2).sum(axis=1).mean())
        total += grid.weights[k] * acc / eps.shape[0]
    return total


@dataclass
class FitResult:
    net: MlpScoreNet
    loss_trace: np.ndarray
    n_steps: int


def fit_dsm(
    net: MlpScoreNet,
    windows: np.ndarray,
    target_cols,
    cfg: TrainConfig,
    rng: np.random.Generator,
    parametrization: str = "score",
    clamp_bound: float | None = None,
    noise_sampler: Callable | None = None,
) -> FitResult:
    """Adam on minibatch estimates of the DSM loss over a pool of windows.

    ``windows`` holds clean data windows (one per row); ``target_cols`` are
    the window positions whose score the network outputs.  Returns a trained
    copy of ``net`` and the per-epoch mean minibatch loss.
    ``noise_sampler(rng, pool_rows)`` may replace the default i.i.d. window
    noise, e.g. to correlate noise between overlapping windows.
    """
    if cfg.time_grid is None:
        raise ValueError("TrainConfig.time_grid is required for training")
    W = np.asarray(windows, dtype=float)
    cols = np.atleast_1d(np.asarray(target_cols, dtype=int))
    if W.shape[1] + 1 != net.input_dim or cols.size != net.output_dim:
        raise ValueError(
            f"network {net.layer_dims} does not fit windows of width {W.shape[1]} with {cols.size} outputs"
        )
    grid = cfg.time_grid
    alpha, sigma = _grid_moments(grid)
    lam = sigma**2 if cfg.weighting == "noise" else np.ones_like(sigma)
    feats = grid.features
    n_pts = cfg.n_train_points
    pool_idx = rng.integers(W.shape[0], size=n_pts)
    time_idx = rng.integers(len(grid), size=n_pts)

    work = net.copy()
    state = AdamState(work.get_flat(), lr=cfg.learning_rate, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    trace = []
    step = 0
    for _ in range(cfg.n_epochs):
        order = rng.permutation(n_pts)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n_pts, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = W[pool_idx[idx]]
            k = time_idx[idx]
            a, s, l = alpha[k][:, None], sigma[k][:, None], lam[k][:, None]
            f = feats[k][:, None]
            nb = idx.size
            grad = np.zeros_like(state.params)
            batch_loss = 0.0
            for _mc in range(cfg.n_mc_noise):
                e = rng.standard_normal(x.shape) if noise_sampler is None else noise_sampler(rng, pool_idx[idx])
                z = a * x + s * e
                acts = work.forward_cache(np.hstack([z, f]))
                u, du = net_to_score(acts[-1], s, parametrization, clamp_bound, z[:, cols])
                r = u + e[:, cols] / s
                batch_loss += float((l * r * r).sum()) / nb
                upstream = (2.0 / (nb * cfg.n_mc_noise)) * l * r * du
                gW, gb = work.backward(acts, upstream)
                grad += np.concatenate([p for pair in zip(gW, gb) for p in (pair[0].ravel(), pair[1])])
            batch_loss /= cfg.n_mc_noise
            step += 1
            if not (math.isfinite(batch_loss) and np.isfinite(grad).all()):
                raise TrainingDiverged(step, f"loss {batch_loss}")
            state = adam_step(state, grad)
            work.set_flat(state.params)
            epoch_loss += batch_loss
            n_batches += 1
        trace.append(epoch_loss / max(n_batches, 1))
    return FitResult(work, np.array(trace), step)


@dataclass
class LocalizedHypothesis:
    """Per-vertex networks on the windows ``N_j^r``, optionally weight-shared.

    ``groups[j]`` is the index into ``nets`` used by vertex ``j``.
    """

    graph: DependencyGraph
    radius: int
    nets: list[MlpScoreNet]
    groups: tuple[int, ...]
    parametrization: str = "score"
    clamp_bound: float | None = None
    windows: list[np.ndarray] = field(init=False, repr=False)
    target_cols: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        g = self.graph
        if self.radius < 0:
            raise ValueError("radius must be non-negative")
        if len(self.groups) != g.b:
            raise ValueError(f"groups has {len(self.groups)} entries for {g.b} vertices")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"parametrization must be one of {PARAMETRIZATIONS}")
        self.groups = tuple(int(x) for x in self.groups)
        self.windows, self.target_cols = [], []
        off = g.offsets
        for j in range(g.b):
            win = flatten_window(g, neighborhood(g, j, self.radius))
            own = np.arange(off[j], off[j + 1])
            self.windows.append(win)
            self.target_cols.append(np.searchsorted(win, own))
        for j, gid in enumerate(self.groups):
            if not 0 <= gid < len(self.nets):
                raise ValueError(f"vertex {j} points to missing network {gid}")
            net = self.nets[gid]
            if net.input_dim != self.windows[j].size + 1 or net.output_dim != g.block_dims[j]:
                raise ValueError(
                    f"network {gid} with dims {net.layer_dims} does not fit vertex {j} "
                    f"(window {self.windows[j].size}, block {g.block_dims[j]})"
                )
        for gid in range(len(self.nets)):
            members = self.members(gid)
            cols = {tuple(self.target_cols[j]) for j in members}
            if len(cols) > 1:
                raise ValueError(f"vertices {members} share network {gid} but place their outputs differently")

    def members(self, gid: int) -> list[int]:
        return [j for j, g in enumerate(self.groups) if g == gid]

    def with_nets(self, nets: Sequence[MlpScoreNet]) -> "LocalizedHypothesis":
        return LocalizedHypothesis(self.graph, self.radius, list(nets), self.groups, self.parametrization, self.clamp_bound)


def build_hypothesis(
    graph: DependencyGraph,
    radius: int,
    hidden: Sequence[int],
    seed: int,
    groups: Sequence[int] | None = None,
    parametrization: str = "score",
    clamp_bound: float | None = None,
) -> LocalizedHypothesis:
    """Fresh Glorot-initialized networks; group ``g`` draws from stream ``(seed, "init", g)``."""
    groups = tuple(range(graph.b)) if groups is None else tuple(int(x) for x in groups)
    n_groups = max(groups) + 1
    nets = []
    for gid in range(n_groups):
        members = [j for j, g in enumerate(groups) if g == gid]
        if not members:
            raise ValueError(f"network group {gid} has no vertices")
        j = members[0]
        width = flatten_window(graph, neighborhood(graph, j, radius)).size
        dims = [width + 1, *hidden, graph.block_dims[j]]
        nets.append(MlpScoreNet.init(dims, stream(seed, "init", gid)))
    return LocalizedHypothesis(graph, radius, nets, groups, parametrization, clamp_bound)


def _config_header(cfg: TrainConfig | None) -> dict | None:
    if cfg is None:
        return None
    return {
        "learning_rate": cfg.learning_rate,
        "adam_betas": list(cfg.adam_betas),
        "adam_eps": cfg.adam_eps,
        "n_train_points": cfg.n_train_points,
        "batch_size": cfg.batch_size,
        "n_epochs": cfg.n_epochs,
        "seed": cfg.seed,
        "n_mc_noise": cfg.n_mc_noise,
        "weighting": cfg.weighting,
    }


def save_hypothesis(path, h: LocalizedHypothesis, cfg: TrainConfig | None = None) -> None:
    """Write the networks with a header holding radius, graph (and its hash) and training config."""
    header = {
        "radius_r": h.radius,
        "graph_hash": h.graph.graph_hash(),
        "graph": format_graph(h.graph),
        "groups": list(h.groups),
        "parametrization": h.parametrization,
        "clamp_bound": h.clamp_bound,
        "train": _config_header(cfg),
    }
    save_model(path, h.nets, header)


def load_hypothesis(path) -> tuple[LocalizedHypothesis, dict]:
    """Inverse of :func:`save_hypothesis`; also returns the header."""
    nets, hdr = load_model(path)
    graph = parse_graph(hdr["graph"])
    if graph.graph_hash() != hdr["graph_hash"]:
        raise ValueError(f"{path}: stored graph does not match its hash")
    h = LocalizedHypothesis(graph, int(hdr["radius_r"]), nets, tuple(hdr["groups"]), hdr["parametrization"], hdr["clamp_bound"])
    return h, hdr


def effective_dimension(h: LocalizedHypothesis) -> int:
    """Largest window size ``max_j d_{j,r}``."""
    return max(int(w.size) for w in h.windows)


def _data_matrix(data) -> np.ndarray:
    return data.data if isinstance(data, SampleBatch) else np.asarray(data, dtype=float)


def train_group(gid: int, data, h: LocalizedHypothesis, cfg: TrainConfig) -> FitResult:
    """Train network ``gid`` on the pooled windows of all vertices that share it."""
    X = _data_matrix(data)
    if X.shape[1] != h.graph.total_dim:
        raise ValueError(f"data has dimension {X.shape[1]}, graph has {h.graph.total_dim}")
    members = h.members(gid)
    pool = np.concatenate([X[:, h.windows[j]] for j in members], axis=0)
    return fit_dsm(
        h.nets[gid],
        pool,
        h.target_cols[members[0]],
        cfg,
        stream(cfg.seed, "train", gid),
        h.parametrization,
        h.clamp_bound,
    )


def train_component(j: int, data, h: LocalizedHypothesis, cfg: TrainConfig) -> FitResult:
    """Train the network of vertex ``j`` (its whole group when weights are shared)."""
    h.graph._check_vertex(j)
    return train_group(h.groups[j], data, h, cfg)


def _train_group_safe(args):
    gid, data, h, cfg = args
    try:
        return gid, train_group(gid, data, h, cfg), None
    except Exception as exc:  # collected and re-raised as one aggregate error
        return gid, None, exc


def train_all_parallel(
    data, h: LocalizedHypothesis, cfg: TrainConfig, workers: int = 1
) -> tuple[LocalizedHypothesis, dict]:
    """Train every network group independently; results do not depend on ``workers``.

    Returns the trained hypothesis and a map ``group -> loss trace``.
    """
    X = _data_matrix(data)
    tasks = [(gid, X, h, cfg) for gid in range(len(h.nets))]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_group_safe, tasks))
    else:
        results = [_train_group_safe(t) for t in tasks]
    failures = {gid: exc for gid, _, exc in results if exc is not None}
    if failures:
        raise ComponentTrainingError(failures)
    nets = [res.net for _, res, _ in results]
    traces = {gid: res.loss_trace for gid, res, _ in results}
    return h.with_nets(nets), traces


def _identity(t: float) -> float:
    return t


class LocalizedScoreField:
    """The full score assembled from the component networks.

    ``time_feature`` maps a diffusion time to the network's time input.
    """

    def __init__(self, h: LocalizedHypothesis, time_feature: Callable[[float], float] = _identity):
        self.h = h
        self.dim = h.graph.total_dim
        self.time_feature = time_feature
        self._coords = [np.arange(a, b) for a, b in zip(h.graph.offsets[:-1], h.graph.offsets[1:])]

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.dim:
            raise ValueError(f"input dimension {X.shape[1]} does not match score dimension {self.dim}")
        _, sigma = ou_moments(t)
        feat = np.full((X.shape[0], 1), float(self.time_feature(t)))
        out = np.empty_like(X)
        h = self.h
        for j, win in enumerate(h.windows):
            net = h.nets[h.groups[j]]
            raw = net.forward(np.hstack([X[:, win], feat]))
            own = X[:, self._coords[j]]
            out[:, self._coords[j]], _ = net_to_score(raw, sigma, h.parametrization, h.clamp_bound, own)
        return out[0] if single else out


def compose_score(h: LocalizedHypothesis, time_feature: Callable[[float], float] = _identity) -> LocalizedScoreField:
    return LocalizedScoreField(h, time_feature)


def empirical_dsm_loss(
    field: LocalizedScoreField, data, grid: TimeGrid, eps: np.ndarray
) -> float:
    """DSM loss of the composed score with explicit noise ``eps`` (``n_mc x n_times x n x d``)."""
    X = _data_matrix(data)
    alpha, sigma = _grid_moments(grid)
    total = 0.0
    for k in range(len(grid)):
        acc = 0.0
        for e in eps[:, k]:
            z = alpha[k] * X + sigma[k] * e
            s = field.evaluate(z, grid.times[k])
            acc += float(((s + e / sigma[k]) ** 2).sum(axis=1).mean())
        total += grid.weights[k] * acc / eps.shape[0]
    return total


def component_losses(h: LocalizedHypothesis, data, grid: TimeGrid, eps: np.ndarray) -> np.ndarray:
    """Per-vertex DSM losses, each using the window slice of the shared noise ``eps``."""
    X = _data_matrix(data)
    return np.array(
        [
            dsm_component_loss(
                h.nets[h.groups[j]],
                X[:, win],
                h.target_cols[j],
                grid,
                eps=eps[..., win],
                parametrization=h.parametrization,
                clamp_bound=h.clamp_bound,
            )
            for j, win in enumerate(h.windows)
        ]
    )
