"""Command line front end: slabgas <subcommand> --config c.json --out dir."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import (OBSERVABLES, ConfigError, ExperimentConfig, bad_set_decay_study, config_hash,
               convergence_sweep, reference_profiles, simulate_marginals)
from . import plots

log = logging.getLogger("slabgas")

SUBCOMMANDS = ("simulate", "sweep", "badsets", "series", "solver", "verify-kernels")


def _fmt(x) -> str:
    return format(float(x), ".12g")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(c) if isinstance(c, (float, np.floating)) else c for c in row])


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _versions() -> dict:
    from .. import __version__

    return {"slabgas": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _fitted_T(cfg) -> tuple[float, float]:
    from ..duhamel_mc import fit_time_horizon

    n = cfg.norm
    return fit_time_horizon(float(n["beta"]), float(n["mu"]), int(n["fit_samples"]), cfg.seed)


def _centers(bins):
    e = np.linspace(0.0, 1.0, bins + 1)
    return 0.5 * (e[1:] + e[:-1])


def _marginal_rows(cfg, N, data, times):
    mean = data.mean(axis=0)
    se = data.std(axis=0, ddof=1) / np.sqrt(len(data)) if len(data) > 1 else np.zeros_like(mean)
    rows = []
    for i, t in enumerate(times):
        for k, o in enumerate(cfg.observables):
            for b in range(cfg.bins):
                rows.append((N, float(t), b, o, float(mean[i, k, b]), float(se[i, k, b])))
    return rows, mean, se


def cmd_simulate(cfg, out, args):
    times = sorted(float(t) for t in cfg.times)
    rows, written = [], []
    for N in sorted(cfg.N):
        data = simulate_marginals(cfg, N, args.threads, log.info)
        r, mean, se = _marginal_rows(cfg, N, data, times)
        rows += r
        curves = {f"N={N} t={t:g} {o}": (mean[i, k], se[i, k])
                  for i, t in enumerate(times) for k, o in enumerate(cfg.observables) if o == "one"}
        plots.plot_marginals(_centers(cfg.bins), curves, out / f"marginals_N{N}.png", f"density, N={N}")
        written.append(f"marginals_N{N}.png")
    _write_csv(out / "marginals.csv", ["N", "t", "x1_bin", "observable", "mean", "stderr"], rows)
    return ["marginals.csv"] + written


def cmd_sweep(cfg, out, args):
    times = sorted(float(t) for t in cfg.times)
    _, T = _fitted_T(cfg)
    data, rows = {}, []
    for N in sorted(cfg.N):
        data[N] = simulate_marginals(cfg, N, args.threads, log.info)
        rows += _marginal_rows(cfg, N, data[N], times)[0]
    _write_csv(out / "marginals.csv", ["N", "t", "x1_bin", "observable", "mean", "stderr"], rows)
    rep = convergence_sweep(cfg, fitted_T=T, marginals=data)
    (out / "sweep.json").write_text(rep.to_json() + "\n")
    gap_rows = [(e["N"], e["t"], e["observable"], e["gap"], e["uncertainty"]) for e in rep.entries]
    _write_csv(out / "gaps.csv", ["N", "t", "observable", "gap", "uncertainty"], gap_rows)
    plots.plot_gaps(rep, out / "gaps.png")
    log.info("sweep verdict: %s", "pass" if rep.passed else "fail")
    return ["marginals.csv", "sweep.json", "gaps.csv", "gaps.png"]


def cmd_badsets(cfg, out, args):
    b = cfg.badsets
    tables, rows = [], []
    for r in b["r"]:
        tab = bad_set_decay_study(int(b["s"]), int(r), float(b["t"]), epsilons=[float(e) for e in b["epsilons"]],
                                  n_samples=int(b["n_samples"]), seed=cfg.seed, margin=cfg.margin)
        tables.append(tab)
        rows += [(int(r), eps, cls, p, se) for eps, cls, p, se in tab.rows()]
    _write_csv(out / "badsets.csv", ["r", "epsilon", "class", "frequency", "stderr"], rows)
    plots.plot_badsets(tables, out / "badsets.png")
    return ["badsets.csv", "badsets.png"]


def cmd_series(cfg, out, args):
    from ..duhamel_mc import SeriesTruncation, series_observable
    from ..pseudotrajectories import Mode

    sc = cfg.series
    _, T = _fitted_T(cfg)
    f0 = cfg.density()
    trunc = SeriesTruncation(int(sc["R"]), float(sc["E"]), T)
    rows = []
    for t in sorted(float(t) for t in cfg.times):
        for x1 in sc["x1"]:
            for o in cfg.observables:
                tot, by_r = series_observable(Mode.ZERO, [float(x1), 0.5, 0.5], OBSERVABLES[o].phi, t, f0, trunc,
                                              int(sc["n_samples"]), seed=cfg.seed, per_r=True)
                for r, e in sorted(by_r.items()):
                    rows.append((t, float(x1), o, str(r), e.mean, e.stderr))
                rows.append((t, float(x1), o, "total", tot.mean, tot.stderr))
    _write_csv(out / "series.csv", ["t", "x1", "observable", "r", "mean", "stderr"], rows)
    return ["series.csv"]


def cmd_solver(cfg, out, args):
    from ..boltzmann_solver import picard_solve
    from . import _solver_grid

    times = sorted(float(t) for t in cfg.times)
    res = picard_solve(cfg.density(), max(times), tol=cfg.solver["tol"], grid=_solver_grid(cfg),
                       snapshot_times=times, max_iter=int(cfg.solver["max_iter"]))
    with open(out / "solution.csv", "w", newline="") as fh:
        for i, t in enumerate(times):
            text = res.snapshots[t].to_csv()
            fh.write(text if i == 0 else text.split("\n", 1)[1])
    rows, curves = [], {}
    for t in times:
        G = res.snapshots[t]
        for o in cfg.observables:
            m = OBSERVABLES[o].moment
            prof = G.moment_profile(m) if m else np.zeros(len(G.x1))
            rows += [(t, float(x), o, float(y)) for x, y in zip(G.x1, prof)]
            if o == "one":
                curves[f"t={t:g}"] = prof
    _write_csv(out / "profiles.csv", ["t", "x1", "observable", "value"], rows)
    _write_json(out / "solver.json", {"iterations": res.iterations, "gaps": res.gaps, "times": times})
    plots.plot_profiles(res.snapshots[times[0]].x1, curves, out / "profiles.png", "density profile")
    return ["solution.csv", "profiles.csv", "solver.json", "profiles.png"]


def cmd_verify_kernels(cfg, out, args):
    from ..kernels import StripTarget, carleman_pushforward_check, singular_integral, strip_integral

    v = np.array([0.7, -0.3, 0.4])
    E = 9.0
    rep = carleman_pushforward_check(v, E, n_samples=100_000, seed=cfg.seed)
    strip = {}
    for tgt in StripTarget:
        a = strip_integral(v, 0.2, 0.2 + 0.02, E, tgt)
        b = strip_integral(v, 0.2, 0.2 + 0.01, E, tgt)
        strip[tgt.name] = a / b
    sing = {}
    for p in (1, 2):
        for tgt in (StripTarget.V_STAR, StripTarget.V_PRIME):
            sing[f"{tgt.name}_p{p}"] = {_fmt(eps): singular_integral(v, eps, E, p, tgt) for eps in (1e-2, 1e-3, 1e-4)}
    _write_json(out / "kernels.json", {"pushforward_z": dict(zip(rep.names, rep.z_scores.tolist())),
                                       "max_abs_z": rep.max_abs_z, "strip_ratio": strip, "singular": sing})
    return ["kernels.json"]


_COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "badsets": cmd_badsets, "series": cmd_series,
             "solver": cmd_solver, "verify-kernels": cmd_verify_kernels}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slabgas", description=__doc__)
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker processes for replicas")
    p.add_argument("--verbose", action="store_true")
    return p


def _fail(record: dict, code: int) -> int:
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        return _fail({"error": "io", "field": "--config", "message": str(exc)}, 2)
    try:
        cfg = ExperimentConfig.from_json(text)
        if args.seed is not None:
            cfg.seed = int(args.seed)
        C, T = _fitted_T(cfg)
        if cfg.check_horizon and max(cfg.times) > T:
            raise ConfigError("times", f"t={max(cfg.times)} exceeds the fitted horizon T={T:.4g}")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs = _COMMANDS[args.command](cfg, out, args)
        manifest = {"command": args.command, "seed": cfg.seed, "config_hash": config_hash(cfg),
                    "versions": _versions(), "outputs": sorted(outputs), "fitted_C": C, "fitted_T": T}
        _write_json(out / "manifest.json", manifest)
    except ConfigError as exc:
        return _fail(exc.record(), 2)
    except Exception as exc:  # machine-readable record for any failure
        log.debug("failure", exc_info=True)
        return _fail({"error": type(exc).__name__, "message": str(exc)}, 1)
    return 0


def main():
    sys.exit(run_cli())
