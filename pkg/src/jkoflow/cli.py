"""
Command-line runner for scenario files.

    jkoflow run fp_semiconvex_1d --out results/
    jkoflow oracle oracle_fp_24cells
    jkoflow run a.json b.json --jobs 2

Exit codes: 0 when every hard check passes, 2 when a check fails, 1 on a
parse or solver error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .diagnostics import write_csv
from .errors import JkoFlowError
from .functionals import evaluate
from .grid import write_snapshot
from .jko import jko_step, objective, oracle_step, run
from .ot import SinkhornOptions, sinkhorn
from .scenario import Scenario, bundled_names, load_scenario

logger = logging.getLogger("jkoflow")

EXIT_OK, EXIT_ERROR, EXIT_CHECK = 0, 1, 2
ENV_OUT = "JKO_FLOW_OUT"


def _out_dir(sc: Scenario, out: str | None) -> Path:
    root = out or os.environ.get(ENV_OUT) or sc.out_dir or "out"
    path = Path(root) / sc.name
    path.mkdir(parents=True, exist_ok=True)
    return path


def execute(sc: Scenario, out: str | None = None, snapshot_every: int | None = None):
    """Run a parsed scenario; returns ``(exit_code, trajectory, summary_lines)``."""
    dest = _out_dir(sc, out)
    every = sc.snapshot_every if snapshot_every is None else snapshot_every

    def snap(n, rho):
        if n == 0 or (every and n % every == 0) or n == sc.config.steps:
            write_snapshot(rho, dest / f"rho_{n}.txt")

    start = time.perf_counter()
    ids = [c.id for c in sc.checks]
    by_id = {c.id: c for c in sc.checks}
    traj = run(
        sc.rho0,
        sc.functional,
        sc.config,
        checks=ids,
        params={c.id: c.params for c in sc.checks},
        lp_list=sc.lp_list,
        jp_list=sc.jp_list,
        on_step=snap,
    )
    elapsed = time.perf_counter() - start

    write_csv(dest / "report.csv", traj.reports, sc.lp_list, sc.jp_list, ids)

    lines = [f"scenario {sc.name}", f"steps {len(traj.reports) - 1} of {sc.config.steps}"]
    hard_fail = False
    for cid in ids:
        verdicts = [r.verdicts[cid] for r in traj.reports[1:] if cid in r.verdicts]
        fails = sum(v.status == "fail" for v in verdicts)
        slack = sum(v.status == "slack-pass" for v in verdicts)
        worst = min((v.margin for v in verdicts), default=float("nan"))
        line = f"check {cid} pass {len(verdicts) - fails - slack} slack {slack} fail {fails} worst_margin {worst!r}"
        for key in ("D1", "C"):
            emp = [v.detail[key] for v in verdicts if key in v.detail]
            if emp:
                line += f" max_{key} {max(emp)!r}"
        lines.append(line)
        if fails and by_id[cid].hard:
            hard_fail = True
    if sc.linf_cap is not None:
        tau = sc.config.tau
        ratio = max(float(np.max(r_.values)) / ((1.0 + n * tau) * sc.linf_cap) for n, r_ in enumerate(traj.densities))
        lines.append(f"monitor linf_growth cap {sc.linf_cap!r} max_ratio {ratio!r}")
        if ratio > 1.0:
            hard_fail = True
    for w in sc.warnings:
        lines.append(f"warning {w}")

    code = EXIT_CHECK if hard_fail else EXIT_OK
    if traj.error is not None:
        lines.append(f"error at step {traj.failed_step}: {type(traj.error).__name__}: {traj.error}")
        code = EXIT_ERROR
    lines.append(f"exit {code}")
    (dest / "summary.txt").write_text("\n".join(lines) + "\n")
    logger.info("%s finished in %.1f s (budget %s s)", sc.name, elapsed, sc.budget_seconds)
    if elapsed > sc.budget_seconds:
        logger.warning("%s exceeded its wall-clock budget: %.1f s > %s s", sc.name, elapsed, sc.budget_seconds)
    return code, traj, lines


def run_scenario(path, out: str | None = None, snapshot_every: int | None = None) -> int:
    try:
        sc = load_scenario(path)
    except JkoFlowError as exc:
        logger.error("%s: %s", path, exc)
        return EXIT_ERROR
    try:
        code, _, lines = execute(sc, out, snapshot_every)
    except JkoFlowError as exc:
        logger.error("%s: %s: %s", sc.name, type(exc).__name__, exc)
        return EXIT_ERROR
    for line in lines:
        logger.info(line)
    return code


def oracle_gap(sc: Scenario) -> float:
    """``objective(jko_step) - objective(oracle_step)`` for the first step."""
    F, cfg = sc.functional, sc.config
    eta = sc.rho0
    rho, tr = jko_step(eta, F, cfg)
    ref = oracle_step(eta, F, cfg.tau)
    if sc.grid.dim == 1:
        return objective(rho, eta, F, cfg.tau) - objective(ref, eta, F, cfg.tau)
    # 2D: score both densities with the oracle's entropic cost
    def obj(r):
        t = sinkhorn(r, eta, 1e-4, SinkhornOptions(marginal_tol=1e-11))
        return evaluate(F, r) + t.reg_cost / cfg.tau

    return obj(rho) - obj(ref)


def compare_oracle(path, out: str | None = None) -> int:
    try:
        sc = load_scenario(path)
        gap = oracle_gap(sc)
    except JkoFlowError as exc:
        logger.error("%s: %s: %s", path, type(exc).__name__, exc)
        return EXIT_ERROR
    dest = _out_dir(sc, out)
    ok = abs(gap) <= sc.oracle_tolerance
    (dest / "oracle_gap.txt").write_text(f"gap {gap!r}\ntolerance {sc.oracle_tolerance!r}\npass {int(ok)}\n")
    logger.info("%s oracle gap %.3e (tolerance %.1e)", sc.name, gap, sc.oracle_tolerance)
    return EXIT_OK if ok else EXIT_CHECK


def _dispatch(args) -> int:
    cmd, path, out, every = args
    if cmd == "run":
        return run_scenario(path, out, every)
    return compare_oracle(path, out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jkoflow", description="Run JKO scenarios and check per-step estimates.")
    ap.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run scenarios"), ("oracle", "compare one JKO step with the brute-force oracle")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("scenarios", nargs="+", help="scenario files or bundled scenario names")
        p.add_argument("--out", help=f"output directory (default: ${ENV_OUT} or ./out)")
        p.add_argument("--jobs", type=int, default=1, help="run independent scenarios in k processes")
        p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)
        if name == "run":
            p.add_argument("--snapshot-every", type=int, default=None, help="write rho_<n>.txt every n steps")
    sub.add_parser("list", help="list bundled scenarios")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    if args.command == "list":
        for name in bundled_names():
            print(name)
        return EXIT_OK
    every = getattr(args, "snapshot_every", None)
    tasks = [(args.command, s, args.out, every) for s in args.scenarios]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_dispatch, tasks))
    else:
        codes = [_dispatch(t) for t in tasks]
    if EXIT_ERROR in codes:
        return EXIT_ERROR
    if EXIT_CHECK in codes:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
