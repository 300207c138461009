"""Command-line benchmark runner.

`run` executes one problem/refiner combination; `compare` fans out all five
refiners on one problem.  Outputs per run directory: run CSV, per-step
Bezier-mesh SVGs, per-step sparsity patterns (MatrixMarket) and a
summary.json with fitted convergence rates.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import adaptive, assembly, bench, hiermesh, tmesh
from .adaptive import StepRecord

REFINERS = {"uniform": "uniform", "thb-min": "minimal_thb",
            "thb-safe": "safe_thb", "ts-min": "minimal_ts",
            "ts-safe": "safe_ts"}

# marking fraction per strategy, tuned per benchmark for the best
# asymptotic convergence rate (the effective rate is the singular decay
# per step divided by the per-step DOF growth, so strategies with larger
# refinement closures want smaller marking fractions)
DEFAULT_THETA = {"minimal_thb": 0.10, "minimal_ts": 0.10,
                 "safe_thb": 0.25, "safe_ts": 0.25, "uniform": 0.25}

PROBLEM_THETA = {
    ("lshape", "minimal_thb"): 0.12, ("lshape", "safe_thb"): 0.12,
    ("lshape", "safe_ts"): 0.10, ("lshape", "minimal_ts"): 0.08,
    ("slit", "minimal_thb"): 0.085, ("slit", "safe_thb"): 0.085,
    ("slit", "safe_ts"): 0.07, ("slit", "minimal_ts"): 0.06,
    ("plate_hole", "minimal_thb"): 0.5, ("plate_hole", "safe_thb"): 0.5,
    ("plate_hole", "safe_ts"): 0.5, ("plate_hole", "minimal_ts"): 0.5,
}


def default_theta(problem: str, strategy: str) -> float:
    return PROBLEM_THETA.get((problem, strategy), DEFAULT_THETA[strategy])


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.12g}"
    return str(v)


def write_csv(path: Path, records: list[StepRecord]) -> None:
    lines = [",".join(StepRecord.FIELDS)]
    for r in records:
        lines.append(",".join(_fmt(v) for v in r.row()))
    path.write_text("\n".join(lines) + "\n")


# -- SVG rendering --------------------------------------------------------


def _svg_lines(segments, extensions, M, N) -> str:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" '
           f'viewBox="0 0 {M} {N}" width="{80 * M}" height="{80 * N}">']
    sw = max(M, N) / 400
    for (x1, y1, x2, y2) in segments:
        out.append(f'<line x1="{x1}" y1="{N - y1}" x2="{x2}" y2="{N - y2}" '
                   f'stroke="black" stroke-width="{sw}"/>')
    for (x1, y1, x2, y2) in extensions:
        out.append(f'<line x1="{x1}" y1="{N - y1}" x2="{x2}" y2="{N - y2}" '
                   f'stroke="red" stroke-width="{sw}"/>')
    out.append("</svg>")
    return "\n".join(out)


def _box_segments(boxes) -> list:
    segs = []
    for (xlo, xhi, ylo, yhi) in boxes:
        segs += [(xlo, ylo, xhi, ylo), (xlo, yhi, xhi, yhi),
                 (xlo, ylo, xlo, yhi), (xhi, ylo, xhi, yhi)]
    return segs


def render_snapshot_svg(snapshot: str) -> str:
    """Bezier mesh of a serialized mesh: black element edges, red
    T-junction extensions."""
    if snapshot.startswith("TMESH"):
        mesh = tmesh.TMesh.deserialize(snapshot)
        bez = tmesh.bezier_mesh(mesh)
        boxes = [bez.box(i).float_bounds() for i in range(len(bez.elements))]
        ext = []
        for key, (fixed, lo, hi) in mesh.extensions().items():
            if key[0] == "h":
                ext.append((lo, fixed, hi, fixed))
            else:
                ext.append((fixed, lo, fixed, hi))
        return _svg_lines(_box_segments(boxes), ext,
                          float(mesh.M), float(mesh.N))
    mesh = hiermesh.HierMesh.deserialize(snapshot)
    boxes = [hiermesh.elem_box(e).float_bounds() for e in mesh.elements]
    return _svg_lines(_box_segments(boxes), [], float(mesh.M), float(mesh.N))


# -- orchestration --------------------------------------------------------


def _lower_left_override(state, boxes):
    for i, b in enumerate(boxes):
        xlo, xhi, ylo, yhi = b.float_bounds()
        if xlo == 0.0 and ylo == 0.0:
            return np.array([i])
    raise adaptive.AdaptiveError("no lower-left element found")


def execute(problem_name: str, refiner: str, marking: str,
            theta: float | None, steps: int, dof_cap: int, out: Path,
            emit_svg: bool = True, emit_sparsity: bool = True,
            tag: str = "") -> adaptive.RunResult:
    benchmark = bench.build_problem(problem_name)
    strategy = REFINERS[refiner]
    if theta is None:
        theta = default_theta(problem_name, strategy)
    out.mkdir(parents=True, exist_ok=True)
    suffix = f"_{tag}" if tag else ""

    def on_step(step, state, cells, system, eta_elem):
        if emit_sparsity:
            assembly.export_matrix(system.matrix,
                                   str(out / f"sparsity{suffix}_step{step}.mtx"))

    override = _lower_left_override if problem_name == "worst_case" \
        and strategy != "uniform" else None
    result = adaptive.run(benchmark, strategy, theta=theta, marking=marking,
                          max_steps=steps, dof_cap=dof_cap,
                          on_step=on_step, mark_override=override)
    write_csv(out / f"run{suffix}.csv", result.records)
    if emit_svg:
        for step, snap in enumerate(result.snapshots):
            (out / f"mesh{suffix}_step{step}.svg").write_text(
                render_snapshot_svg(snap))
    return result


def _summarize(results: list[adaptive.RunResult]) -> dict:
    summary = {}
    for r in results:
        entry = {"steps": len(r.records),
                 "final_dof": int(r.records[-1].dof),
                 "theta": r.theta, "marking": r.marking}
        errs = r.errors
        if len(r.records) >= 2 and np.all(np.isfinite(errs)):
            entry["final_h1_error"] = float(errs[-1])
            entry["rate_last4"] = adaptive.fit_rate(r.dofs, errs)
        summary[r.strategy] = entry
    return summary


def _plot_convergence(results, out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for r in results:
        if not np.all(np.isfinite(r.errors)):
            continue
        ax.loglog(r.dofs, r.errors, marker="o", label=r.strategy)
    ax.set_xlabel("degrees of freedom")
    ax.set_ylabel("H1 error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "convergence.png", dpi=150)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aigabench")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--problem", required=True,
                       choices=bench.BENCHMARKS)
        p.add_argument("--marking", default="quantile",
                       choices=adaptive.MARKINGS)
        p.add_argument("--theta", type=float, default=None)
        p.add_argument("--steps", type=int, default=10)
        p.add_argument("--dof-cap", type=int, default=100000)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--no-svg", action="store_true")
        p.add_argument("--no-sparsity", action="store_true")

    run_p = sub.add_parser("run", help="run one refiner on one problem")
    run_p.add_argument("--refiner", required=True, choices=sorted(REFINERS))
    common(run_p)
    cmp_p = sub.add_parser("compare", help="run all refiners on one problem")
    common(cmp_p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            result = execute(args.problem, args.refiner, args.marking,
                             args.theta, args.steps, args.dof_cap, args.out,
                             emit_svg=not args.no_svg,
                             emit_sparsity=not args.no_sparsity)
            summary = _summarize([result])
        else:
            results = []
            for refiner in sorted(REFINERS):
                results.append(execute(
                    args.problem, refiner, args.marking, args.theta,
                    args.steps, args.dof_cap, args.out,
                    emit_svg=not args.no_svg,
                    emit_sparsity=not args.no_sparsity, tag=refiner))
            summary = _summarize(results)
            _plot_convergence(results, args.out)
        (args.out / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except Exception as exc:  # numerical or refinement failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
