"""Command-line entry point: ``cmdis {toy-demo,solve,bench,verify}``.

Exit codes: 0 success, 1 invariant failure, 2 configuration error, 3 solver
divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import checks
from .analysis import (GridSpec, benchmark_solvers, compare_approximations, decision_map,
                       overfit_ablation)
from .config import ExperimentConfig, load_config
from .dynamics import ConsistencyFunction
from .errors import CmdisError, ConfigError, SolverDivergence
from .mixture import GaussianMixture
from .parallel import blocks, pmap
from .schedule import NoiseSchedule
from .solvers import Problem, run_batch
from .streams import stream
from .svg import PALETTE, Figure

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 1, 2, 3

DEMO_POINT = (1.0, 0.4)
DEMO_SIGMA = 1.0
DEMO_LEVELS = (0.1, 0.5, 1.0, 2.0)
DEMO_DOC = {"prior": {"preset": "toy"},
            "schedule": {"kind": "karras", "sigma_min": 0.002, "sigma_max": 4.0, "steps": 100, "rho": 7.0},
            "demo": {"x_t": list(DEMO_POINT), "sigma_t": DEMO_SIGMA, "levels": list(DEMO_LEVELS),
                     "grid": [-2.0, 2.0, 201], "band": 0.05, "draws": 200}}


def fmt(v) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, header: list[str], rows, meta: dict) -> None:
    with open(path, "w", newline="") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def _meta(command: str, digest: str, seed: int) -> dict:
    return {"command": command, "config_sha256": digest, "seed": seed}


# -- toy-demo --------------------------------------------------------------------

def cmd_toy_demo(out: Path, seed: int, threads: int) -> int:
    gmm = GaussianMixture.toy()
    schedule = NoiseSchedule(**DEMO_DOC["schedule"])
    digest = hashlib.sha256(json.dumps(DEMO_DOC, sort_keys=True).encode()).hexdigest()
    meta = _meta("toy-demo", digest, seed)
    x_t = np.array(DEMO_POINT)

    rep = compare_approximations(gmm, schedule, x_t, DEMO_SIGMA, stream(seed, 0, "demo"),
                                 n_draws=DEMO_DOC["demo"]["draws"])
    rows = []
    for method in rep.methods:
        for p, lp, lq in zip(rep.points[method], rep.post_logdensity[method], rep.prior_logdensity[method]):
            rows.append([method, p[0], p[1], lp, lq])
    write_csv(out / "approximations.csv", ["method", "x", "y", "post_logdensity", "prior_logdensity"],
              rows, meta)

    heat = GridSpec(-2.0, 2.0, 81)
    post = gmm.posterior(DEMO_SIGMA, x_t)
    pts = heat.points()
    dens = post.log_density(pts)
    write_csv(out / "posterior_density.csv", ["x", "y", "post_logdensity"],
              ([p[0], p[1], v] for p, v in zip(pts, dens)), meta)

    fig = Figure(480, 500)
    panel = fig.panel(40, 40, 420, -2.0, 2.0,
                      f"exact posterior at x_t=({DEMO_POINT[0]}, {DEMO_POINT[1]}), sigma_t={DEMO_SIGMA}")
    panel.heatmap(np.maximum(dens, dens.max() - 30).reshape(heat.resolution, heat.resolution))
    colors = {"lgd": PALETTE[1], "stsl": PALETTE[4], "posterior_mean": PALETTE[2], "pf_ode": PALETTE[6]}
    for method in ("lgd", "stsl"):
        panel.scatter(rep.points[method], colors[method], 2.0)
    for method in ("posterior_mean", "pf_ode"):
        panel.scatter(rep.points[method], colors[method], 4.0, marker="cross")
    panel.scatter(x_t[None, :], "#000000", 4.0)
    for i, method in enumerate(("lgd", "stsl", "posterior_mean", "pf_ode")):
        fig.text(50 + i * 110, 485, method, anchor="start")
        fig.parts.append(f'<rect x="{38 + i * 110}" y="476" width="9" height="9" fill="{colors[method]}"/>')
    fig.save(out / "approximations.svg")

    grid = GridSpec(*DEMO_DOC["demo"]["grid"][:2], int(DEMO_DOC["demo"]["grid"][2]))
    maps = [decision_map(gmm, schedule, s, grid, DEMO_DOC["demo"]["band"], threads=threads) for s in DEMO_LEVELS]
    write_csv(out / "decision_maps.csv", ["sigma_t", "agreement", "cells", "excluded_band", "failed"],
              ([m.sigma_t, m.agreement, m.ode_mode.size, int(m.boundary.sum()), int((m.ode_mode < 0).sum())]
               for m in maps), meta)
    fig = Figure(40 + 260 * len(maps), 320)
    for i, m in enumerate(maps):
        p = fig.panel(30 + 260 * i, 40, 240, grid.lo, grid.hi, f"sigma_t={m.sigma_t}  agree={m.agreement:.3f}")
        p.labels(m.as_image("ode"))
        p.scatter(gmm.means, "#000000", 3.0, marker="cross")
    fig.text(30, 310, "color: mixture component reached by the PF-ODE; crosses: component means")
    fig.save(out / "decision_maps.svg")
    n = grid.resolution
    cell_rows = ([m.sigma_t, k // n, k % n, m.ode_mode[k], m.voronoi_mode[k], m.boundary[k]]
                 for m in maps for k in range(n * n))
    write_csv(out / "decision_cells.csv", ["sigma_t", "row", "col", "ode_mode", "voronoi_mode", "excluded"],
              cell_rows, meta)
    print(f"toy-demo: wrote 6 files to {out}")
    for m in maps:
        print(f"  sigma_t={m.sigma_t}: decision-map agreement {m.agreement:.4f}")
    return EXIT_OK


# -- solve -----------------------------------------------------------------------

TRAJ_HEADER = ["step", "sigma_t"]


def cmd_solve(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    network = cfg.model_a.build(cfg.prior, cfg.base_dir) if cfg.operator_kind == "mlp" else None
    op = cfg.operator(network)
    cf = ConsistencyFunction(cfg.prior, cfg.schedule, steps=cfg.integrator_steps)
    runs = np.arange(cfg.runs)
    targets = cfg.targets(runs, network)
    d = cfg.prior.dim
    header = (TRAJ_HEADER + [f"x{i}" for i in range(d)] + [f"x0t{i}" for i in range(d)]
              + ["loss", "post_logdensity", "prior_logdensity"])
    failures = []
    for label, scfg in cfg.solvers.items():
        problem = Problem(cfg.prior, cfg.schedule, op, targets[0], scfg, cfg.master_seed, consistency=cf)

        def job(chunk, problem=problem):
            idx = np.array(chunk)
            return run_batch(problem, runs[idx], targets[idx])

        results = [r for part in pmap(job, blocks(range(len(runs))), threads) for r in part]
        for run, res in zip(runs, results):
            meta = _meta("solve", cfg.digest, cfg.master_seed)
            meta.update(solver=label, run=int(run))
            path = out / f"{label}_run{int(run):03d}.csv"
            if isinstance(res, SolverDivergence):
                failures.append((label, int(run), res.step))
                meta["diverged_at_step"] = res.step
                write_csv(path, header, [], meta)
                continue
            rows = ([i + 1, res.sigma[i], *res.x_t[i], *res.x0t[i], res.loss[i],
                     res.post_logdensity[i], res.prior_logdensity[i]] for i in range(len(res)))
            write_csv(path, header, rows, meta)
    print(f"solve: {len(cfg.solvers) * len(runs)} runs written to {out}")
    if failures:
        for label, run, step in failures:
            print(f"  divergence: solver={label} run={run} step={step}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


# -- bench -----------------------------------------------------------------------

def cmd_bench(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    if len(cfg.solvers) < 2:
        raise ConfigError("bench needs at least two solver configurations")
    task = cfg.task()
    results = benchmark_solvers(task, cfg.solvers, cfg.runs, cfg.master_seed, threads)
    meta = _meta("bench", cfg.digest, cfg.master_seed)
    metrics = ["model_b", "model_a"] if task.kind == "classification" else ["mse"]
    header = ["solver", *metrics, "post_logdensity", "final_prior_logdensity", "divergence_rate", "failures"]
    rows = []
    for label, res in results.items():
        s = res.summary()
        failed = ";".join(f"run{r}@step{st}" for r, st in sorted(res.divergence_steps.items()))
        rows.append([label, *[s[m] for m in metrics], s["post_logdensity"], s["final_prior_logdensity"],
                     s["divergence_rate"], failed])
    write_csv(out / "bench_summary.csv", header, rows, meta)
    lines = ["| " + " | ".join(header[:-1]) + " |", "|" + "---|" * (len(header) - 1)]
    for row in rows:
        lines.append("| " + " | ".join([row[0]] + [f"{v:.4f}" for v in row[1:-1]]) + " |")
    if task.kind == "classification" and cfg.ablation is not None:
        abl = overfit_ablation(task, cfg.solvers[cfg.ablation], cfg.taus, cfg.runs, cfg.master_seed, threads)
        arows = [[t, abl.accuracy[t]["model_a"], abl.accuracy[t]["model_b"],
                  abl.no_worse_fraction(t), abl.better_fraction(t)] for t in abl.taus]
        write_csv(out / "ablation.csv", ["tau", "model_a", "model_b", "seeds_no_worse", "seeds_better"],
                  arows, meta)
        lines += ["", f"Smoothing ablation ({cfg.ablation})", "",
                  "| tau | model_a | model_b | seeds no worse than tau=0 |", "|---|---|---|---|"]
        lines += [f"| {r[0]} | {r[1]:.4f} | {r[2]:.4f} | {r[3]:.2f} |" for r in arows]
    (out / "bench_summary.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# -- verify ----------------------------------------------------------------------

def cmd_verify(seed: int) -> int:
    results = checks.run_all(seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"verify: {len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_INVARIANT if failed else EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmdis", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    for name in ("solve", "bench"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--config", type=Path, required=True)
        p.add_argument("--solver", default=None, help="run only this solver (label or name)")
    sub.add_parser("toy-demo", parents=[common])
    sub.add_parser("verify", parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    seed = 0 if args.seed is None else args.seed
    try:
        if args.command == "verify":
            return cmd_verify(seed)
        if args.command == "toy-demo":
            out = args.out or Path("toy_demo_out")
            out.mkdir(parents=True, exist_ok=True)
            return cmd_toy_demo(out, seed, args.threads)
        cfg = load_config(args.config).with_overrides(args.seed, args.solver)
        if args.command == "bench" and len(cfg.solvers) < 2:
            raise ConfigError("bench needs at least two solver configurations")
        out = args.out or Path(cfg.output or f"{args.command}_out")
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "solve":
            return cmd_solve(cfg, out, args.threads)
        return cmd_bench(cfg, out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverDivergence as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CmdisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
