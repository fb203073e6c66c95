"""Command-line experiment runner: ``locdiff <command> [--config F] [--out D] [--seed S] [--threads N]``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cir import (
    CirModel,
    CirParams,
    cir_generate,
    cir_schedule,
    cir_train,
    evaluate_cir,
    histogram_densities,
    simulate_cir,
)
from .config import PRESETS, ConfigError, load_config
from .diffusion import format_float, read_matrix_csv, write_matrix_csv
from .gaussian import (
    TradeoffConfig,
    effective_localization_radius,
    locality_bound_check,
    scan_target,
    tradeoff_experiment,
)
from .oracles import run_verification, write_report_csv
from .scorematch import TrainConfig
from .svg import Series, heatmap, line_plot

MANIFEST = "manifest.json"


class PipelineError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, stage: str, config: dict, seed: int, artifacts: list[str], duration: float) -> None:
    """Record one stage in the directory's single ``manifest.json``."""
    path = out / MANIFEST
    doc = json.loads(path.read_text()) if path.exists() else {"tool_version": __version__, "runs": {}}
    doc["tool_version"] = __version__
    doc["runs"][stage] = {
        "command": stage,
        "config": config,
        "seed": seed,
        "artifacts": {name: _sha256(out / name) for name in sorted(artifacts)},
        "duration_s": round(duration, 3),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(out: Path) -> dict:
    path = out / MANIFEST
    return json.loads(path.read_text()) if path.exists() else {"runs": {}}


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _columns(path: Path) -> dict[str, np.ndarray]:
    header, body = _read_rows(path)
    return {h: np.array([float(r[k]) for r in body]) for k, h in enumerate(header)}


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {path.name} in {path.parent}; run stage '{stage}' first")
    return path


# ------------------------------------------------------------ locality-scan


def scan_times(segments) -> np.ndarray:
    return np.unique(np.concatenate([np.linspace(a, b, int(n)) for a, b, n in segments]))


def _target_label(spec: dict) -> str:
    return spec["label"] or ("diagonal" if spec["diagonal"] else f"d{spec['d']}_r{spec['r0']}")


def cmd_locality_scan(cfg: dict, out: Path, threads: int):
    seed = cfg["seed"]
    times = scan_times(cfg["time_segments"])
    labels, targets = [], []
    for spec in cfg["targets"]:
        targets.append(
            scan_target(
                spec["d"],
                spec["r0"],
                spec["diag_base"],
                spec["offdiag_scale"],
                seed,
                spec["kappa_center"],
                spec["kappa_tol"],
                spec["diagonal"],
            )
        )
        labels.append(_target_label(spec))
    _write_rows(
        out / "targets.csv",
        ["label", "d", "r0", "kappa", "spectral_m", "spectral_M"],
        [[lab, T.dim, T.bandwidth, T.kappa, T.spectral_m, T.spectral_M] for lab, T in zip(labels, targets)],
    )
    curves = np.array(
        [[effective_localization_radius(T.precision_at(t), cfg["eps_rloc"]) for t in times] for T in targets]
    )
    _write_rows(out / "rloc_scan.csv", ["t", *labels], [[t, *map(int, curves[:, k])] for k, t in enumerate(times)])

    rows, violations = [], 0
    for lab, T in zip(labels, targets):
        for t in cfg["bound_times"]:
            e = locality_bound_check(T, t)
            violations += e.n_violations
            rows.append([lab, t, e.min_slack, e.worst_pair[0], e.worst_pair[1], e.n_violations, str(e.n_violations == 0).lower()])
    _write_rows(out / "bound_check.csv", ["label", "t", "min_slack", "worst_i", "worst_j", "n_violations", "pass"], rows)

    k = cfg["heatmap_target"]
    if k >= len(targets):
        raise ConfigError("heatmap_target", f"index {k} but only {len(targets)} targets")
    t_star = float(times[int(np.argmax(curves[k]))])
    P = targets[k].precision_at(t_star)
    stride = max(1, math.ceil(P.shape[0] / cfg["heatmap_max_cells"]))
    with np.errstate(divide="ignore"):
        snap = np.log10(np.abs(P[::stride, ::stride]))
    snap[~np.isfinite(snap)] = -300.0
    write_matrix_csv(out / "precision_snapshot.csv", snap, [f"c{j * stride}" for j in range(snap.shape[1])])
    (out / "precision_snapshot.json").write_text(
        json.dumps({"label": labels[k], "t": t_star, "stride": stride}, sort_keys=True) + "\n"
    )
    render_locality(out)
    arts = ["targets.csv", "rloc_scan.csv", "bound_check.csv", "precision_snapshot.csv", "precision_snapshot.json"]
    arts += ["rloc_scan.svg", "precision_heatmap.svg"]
    if violations:
        print(f"locality bound violated at {violations} entries; see bound_check.csv", file=sys.stderr)
    return arts, (1 if violations else 0)


def render_locality(out: Path) -> None:
    cols = _columns(out / "rloc_scan.csv")
    t = cols.pop("t")
    line_plot(
        out / "rloc_scan.svg",
        [Series(t, v, label=k) for k, v in cols.items()],
        title="effective localization radius",
        xlabel="t",
        ylabel="r_loc(t)",
    )
    _, M = read_matrix_csv(out / "precision_snapshot.csv")
    info = json.loads((out / "precision_snapshot.json").read_text())
    finite = M[M > -300]
    vmin = max(float(finite.min()), float(finite.max()) - 12.0) if finite.size else 0.0
    heatmap(
        out / "precision_heatmap.svg",
        np.maximum(M, vmin),
        title=f"log10|P_t| ({info['label']}, t={info['t']:.4g})",
        vmin=vmin,
    )


# -------------------------------------------------------- gaussian-tradeoff


def cmd_gaussian_tradeoff(cfg: dict, out: Path, threads: int):
    tc = TradeoffConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.items() if k != "schema_version"})
    res = tradeoff_experiment(tc, workers=threads)
    _write_rows(
        out / "tradeoff.csv",
        ["r", "mean_err", "std_err", "ref_mean", "ref_std"],
        [[int(r), m, s, res.ref_mean, res.ref_std] for r, m, s in zip(res.radii, res.mean, res.std)],
    )
    _write_rows(
        out / "tradeoff_reps.csv",
        ["rep", *[f"r{int(r)}" for r in res.radii], "ref"],
        [[k, *res.errors[k], res.ref_errors[k]] for k in range(res.errors.shape[0])],
    )
    arts = ["tradeoff.csv", "tradeoff_reps.csv", "tradeoff.svg"]
    for key, E in res.entrywise.items():
        name = f"entrywise_err_{'ref' if key == 'ref' else f'r{key}'}"
        write_matrix_csv(out / f"{name}.csv", E, [f"c{j}" for j in range(E.shape[1])])
        arts += [f"{name}.csv", f"{name}.svg"]
    render_tradeoff(out)
    return arts, 0


def render_tradeoff(out: Path) -> None:
    c = _columns(out / "tradeoff.csv")
    r, m, s = c["r"], c["mean_err"], c["std_err"]
    ref = np.full_like(r, c["ref_mean"][0])
    rs = np.full_like(r, c["ref_std"][0])
    line_plot(
        out / "tradeoff.svg",
        [
            Series(r, m, "localized", band=(m - s, m + s)),
            Series(r, ref, "non-localized", band=(ref - rs, ref + rs), dashed=True),
        ],
        title="relative covariance error vs localization radius",
        xlabel="r",
        ylabel="relative l2 error",
    )
    for path in sorted(out.glob("entrywise_err_*.csv")):
        _, E = read_matrix_csv(path)
        heatmap(path.with_suffix(".svg"), E, title=path.stem.replace("entrywise_err_", "entrywise error "), vmin=0.0)


# ---------------------------------------------------------------------- cir


def _cir_params(cfg: dict) -> CirParams:
    return CirParams(**cfg["process"])


def _cir_schedule(cfg: dict):
    return cir_schedule(**cfg["schedule"])


def _train_one(args):
    data, r, tcfg, sched, tr = args
    return cir_train(data, r, tcfg, sched, positions=tr["positions"], noise_mode=tr["noise_mode"], parametrization=tr["parametrization"])


def cir_simulate(cfg: dict, out: Path, threads: int):
    data = simulate_cir(_cir_params(cfg), cfg["seed"], workers=threads)
    write_matrix_csv(out / "cir_data.csv", data, [f"t{n}" for n in range(data.shape[1])])
    return ["cir_data.csv"], 0


def cir_train_stage(cfg: dict, out: Path, threads: int):
    _, data = read_matrix_csv(_require(out / "cir_data.csv", "cir simulate"))
    tr = cfg["train"]
    tcfg = TrainConfig(
        learning_rate=tr["learning_rate"],
        batch_size=tr["batch_size"],
        n_epochs=tr["n_epochs"],
        n_train_points=tr["n_train_points"],
        seed=cfg["seed"],
        weighting=tr["weighting"],
    )
    sched = _cir_schedule(cfg)
    tasks = [(data, r, tcfg, sched, tr) for r in cfg["radii"]]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
            results = list(pool.map(_train_one, tasks))
    else:
        results = [_train_one(t) for t in tasks]
    arts = []
    for r, (model, trace) in zip(cfg["radii"], results):
        model.save(out / f"model_r{r}.json")
        _write_rows(out / f"train_loss_r{r}.csv", ["epoch", "loss"], [[k, float(v)] for k, v in enumerate(trace)])
        arts += [f"model_r{r}.json", f"train_loss_r{r}.csv"]
    return arts, 0


def cir_generate_stage(cfg: dict, out: Path, threads: int):
    N = _cir_params(cfg).N
    sched = _cir_schedule(cfg).describe()
    arts = []
    for r in cfg["radii"]:
        model = CirModel.load(_require(out / f"model_r{r}.json", "cir train"))
        if model.schedule.describe() != sched:
            raise PipelineError(f"model_r{r}.json was trained with a different noise schedule than the config")
        gen = cir_generate(model, N, cfg["generate"]["n_series"], cfg["seed"], workers=threads)
        write_matrix_csv(out / f"cir_generated_r{r}.csv", gen, [f"t{n}" for n in range(N)])
        arts.append(f"cir_generated_r{r}.csv")
    return arts, 0


def _check_schedules(out: Path, cfg: dict) -> None:
    runs = read_manifest(out)["runs"]
    want = cfg["schedule"]
    for stage in ("cir train", "cir generate"):
        if stage not in runs:
            raise PipelineError(f"no manifest entry for stage '{stage}' in {out}")
        got = runs[stage]["config"]["schedule"]
        if got != want:
            raise PipelineError(f"stage '{stage}' used schedule {got}, evaluation config has {want}")


def cir_evaluate_stage(cfg: dict, out: Path, threads: int):
    _, data = read_matrix_csv(_require(out / "cir_data.csv", "cir simulate"))
    _check_schedules(out, cfg)
    p = _cir_params(cfg)
    ev_cfg = cfg["evaluate"]
    max_lag = min(ev_cfg["max_lag"], data.shape[1] - 1)
    lags = np.arange(1, min(5, max_lag) + 1)
    rows, arts = [], []
    for r in cfg["radii"]:
        _, gen = read_matrix_csv(_require(out / f"cir_generated_r{r}.csv", "cir generate"))
        ev = evaluate_cir(data, gen, r, max_lag, ev_cfg["n_bins"])
        dm, ds, _ = ev.data_acf
        gm, gs, _ = ev.gen_acf
        _write_rows(
            out / f"acf_r{r}.csv",
            ["lag", "data_mean", "data_std", "gen_mean", "gen_std"],
            [[int(k), dm[k], ds[k], gm[k], gs[k]] for k in ev.acf_lags],
        )
        centers, da, db = histogram_densities(data, gen, ev_cfg["n_bins"])
        _write_rows(out / f"hist_r{r}.csv", ["center", "data_density", "gen_density"], zip(centers, da, db))
        rows.append(
            [
                r,
                ev.tv_distance,
                ev.data_mean,
                ev.gen_mean,
                ev.data_var,
                ev.gen_var,
                p.stationary_mean,
                p.stationary_var,
                float(gm[1]) if max_lag >= 1 else float("nan"),
                ev.acf_abs_deviation(lags) if lags.size else 0.0,
                str(ev.acf_within_band(lags)).lower() if lags.size else "true",
            ]
        )
        arts += [f"acf_r{r}.csv", f"hist_r{r}.csv", f"acf_r{r}.svg", f"hist_r{r}.svg"]
    _write_rows(
        out / "cir_eval.csv",
        [
            "r",
            "tv_distance",
            "data_mean",
            "gen_mean",
            "data_var",
            "gen_var",
            "stationary_mean",
            "stationary_var",
            "gen_acf_lag1",
            "acf_dev_lags_1_5",
            "acf_within_band_1_5",
        ],
        rows,
    )
    render_cir(out)
    return ["cir_eval.csv", *arts], 0


def render_cir(out: Path) -> None:
    for path in sorted(out.glob("acf_r*.csv")):
        c = _columns(path)
        lag = c["lag"]
        line_plot(
            path.with_suffix(".svg"),
            [
                Series(lag, c["data_mean"], "data", band=(c["data_mean"] - c["data_std"], c["data_mean"] + c["data_std"])),
                Series(lag, c["gen_mean"], "generated", band=(c["gen_mean"] - c["gen_std"], c["gen_mean"] + c["gen_std"])),
            ],
            title=f"ensemble autocorrelation ({path.stem.split('_')[1]})",
            xlabel="lag",
            ylabel="ACF",
        )
    for path in sorted(out.glob("hist_r*.csv")):
        c = _columns(path)
        line_plot(
            path.with_suffix(".svg"),
            [Series(c["center"], c["data_density"], "data"), Series(c["center"], c["gen_density"], "generated")],
            title=f"marginal density ({path.stem.split('_')[1]})",
            xlabel="x",
            ylabel="density",
        )


CIR_STAGES = {
    "simulate": cir_simulate,
    "train": cir_train_stage,
    "generate": cir_generate_stage,
    "evaluate": cir_evaluate_stage,
}


# ------------------------------------------------------------------- verify


def cmd_verify(suite: str, cfg: dict, out: Path):
    rows = run_verification(suite, cfg["seed"])
    write_report_csv(rows, out / "verify_report.csv")
    failed = [r for r in rows if not r.passed]
    for r in failed:
        print(f"FAILED {r.name} {json.dumps(r.parameters, sort_keys=True)} lhs={r.lhs!r} rhs={r.rhs!r}", file=sys.stderr)
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return ["verify_report.csv"], (1 if failed else 0)


# --------------------------------------------------------------------- main


def _common(p: argparse.ArgumentParser, command: str) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--preset", default="paper", choices=sorted(PRESETS[command]), help="base values before --config")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker processes (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locdiff", description="Localized diffusion model experiments.")
    parser.add_argument("--version", action="version", version=f"locdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("locality-scan", help="r_loc(t) curves and locality bound report"), "locality-scan")
    _common(sub.add_parser("gaussian-tradeoff", help="localization/statistical error tradeoff"), "gaussian-tradeoff")
    cir = sub.add_parser("cir", help="CIR pipeline stages")
    cir_sub = cir.add_subparsers(dest="stage", required=True)
    for stage in CIR_STAGES:
        _common(cir_sub.add_parser(stage), "cir")
    v = sub.add_parser("verify", help="oracle and bound verification suites")
    v.add_argument("suite", choices=["locality", "oracles", "all"])
    _common(v, "verify")
    sub.add_parser("render", help="regenerate SVG figures from the CSVs in --out").add_argument("--out", type=Path, required=True)
    return parser


def _seed_ok(seed: int) -> bool:
    return 0 <= seed < 2**64


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "render":
        out = args.out
        if (out / "rloc_scan.csv").exists():
            render_locality(out)
        if (out / "tradeoff.csv").exists():
            render_tradeoff(out)
        render_cir(out)
        return 0
    schema = "cir" if args.command == "cir" else args.command
    stage = f"cir {args.stage}" if args.command == "cir" else args.command
    try:
        cfg = load_config(schema, args.config, args.preset)
        if args.seed is not None:
            if not _seed_ok(args.seed):
                raise ConfigError("seed", "must be an unsigned 64-bit integer")
            cfg["seed"] = args.seed
        if args.threads < 1:
            raise ConfigError("threads", "must be >= 1")
    except ConfigError as exc:
        print(f"locdiff: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path("out") / stage.replace(" ", "-")
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        if args.command == "locality-scan":
            arts, code = cmd_locality_scan(cfg, out, args.threads)
        elif args.command == "gaussian-tradeoff":
            arts, code = cmd_gaussian_tradeoff(cfg, out, args.threads)
        elif args.command == "cir":
            arts, code = CIR_STAGES[args.stage](cfg, out, args.threads)
        else:
            arts, code = cmd_verify(args.suite, cfg, out)
    except ConfigError as exc:
        print(f"locdiff: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"locdiff: pipeline error: {exc}", file=sys.stderr)
        return 3
    write_manifest(out, stage, cfg, cfg["seed"], arts, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
