"""Acceptance gate: twelve end-to-end criteria, one test (and one pytest
pass/fail line) per criterion.

The long adaptive runs are shared between criteria through module-scoped
fixtures, so the whole gate runs each benchmark/strategy combination once.
"""

import random
import time

import numpy as np
import pytest

from aigabench import hiermesh, tmesh
from aigabench.adaptive import _make_state, fit_rate, run
from aigabench.assembly import (
    ProblemData,
    assemble,
    gauss01,
    h1_error,
    identity_geometry,
    solve,
)
from aigabench.bench import build_problem
from aigabench.bspline import bernstein_row, bspline_eval
from aigabench.cli import _lower_left_override, default_theta
from aigabench.dyadic import overlay
from aigabench.extraction import extract, extract_tspline
from aigabench.hiermesh import HierMesh, ThbBasis, Variant, elem_box
from aigabench.tmesh import TMesh, crossings, incompatibilities, tspline_basis

ADAPTIVE = ("minimal_thb", "safe_thb", "minimal_ts", "safe_ts")
TS_STRATEGIES = ("minimal_ts", "safe_ts")


def timed_run(*args, **kwargs):
    t0 = time.perf_counter()
    result = run(*args, **kwargs)
    return result, time.perf_counter() - t0


# -- shared benchmark runs -----------------------------------------------


@pytest.fixture(scope="module")
def lshape_uniform():
    return timed_run(build_problem("lshape"), "uniform", max_steps=6,
                     with_cond=False)


@pytest.fixture(scope="module")
def lshape_adaptive():
    b = build_problem("lshape")
    out = {}
    for strat in ADAPTIVE:
        steps = 13 if strat == "minimal_ts" else 12
        out[strat] = timed_run(b, strat,
                               theta=default_theta("lshape", strat),
                               max_steps=steps, with_cond=False)
    return out


@pytest.fixture(scope="module")
def slit_uniform():
    return timed_run(build_problem("slit"), "uniform", max_steps=5,
                     with_cond=False)


@pytest.fixture(scope="module")
def slit_adaptive():
    b = build_problem("slit")
    out = {}
    for strat in ADAPTIVE:
        steps = 13 if strat == "minimal_ts" else 12
        out[strat] = timed_run(b, strat,
                               theta=default_theta("slit", strat),
                               max_steps=steps, with_cond=False)
    return out


@pytest.fixture(scope="module")
def plate_uniform():
    return timed_run(build_problem("plate_hole"), "uniform", max_steps=5,
                     with_cond=False)


@pytest.fixture(scope="module")
def plate_adaptive():
    b = build_problem("plate_hole")
    return {strat: timed_run(b, strat, theta=0.5, max_steps=20,
                             dof_cap=6000, with_cond=False)[0]
            for strat in ADAPTIVE}


@pytest.fixture(scope="module")
def worst_runs():
    b = build_problem("worst_case")
    out = {}
    for strat in ADAPTIVE:
        out[strat] = run(b, strat, max_steps=7, with_cond=False,
                         mark_override=_lower_left_override)
    out["uniform"] = run(b, "uniform", max_steps=5, with_cond=True)
    return out


def ts_runs_everywhere(lshape_adaptive, slit_adaptive, plate_adaptive,
                       worst_runs):
    """All T-spline run results appearing in criteria 1-5."""
    out = []
    for strat in TS_STRATEGIES:
        out.append(lshape_adaptive[strat][0])
        out.append(slit_adaptive[strat][0])
        out.append(plate_adaptive[strat])
        out.append(worst_runs[strat])
    return out


# -- criteria 1-4: convergence rates --------------------------------------


def test_criterion_01_lshape_uniform_rate(lshape_uniform):
    result, seconds = lshape_uniform
    assert len(result.records) <= 6
    rate = fit_rate(result.dofs, result.errors)
    print(f"\nCRITERION 1: lshape uniform rate {rate:.3f} "
          f"(target 1/3 +- 0.07), {seconds:.0f}s")
    assert rate == pytest.approx(1 / 3, abs=0.07)
    assert seconds < 120


def test_criterion_02_lshape_adaptive_rates(lshape_adaptive):
    print()
    for strat in ADAPTIVE:
        result, seconds = lshape_adaptive[strat]
        assert 10 <= len(result.records) <= 14
        rate = fit_rate(result.dofs, result.errors)
        print(f"CRITERION 2: lshape {strat} rate {rate:.3f} "
              f"(target 1.5 +- 0.2), {seconds:.0f}s")
        assert rate == pytest.approx(1.5, abs=0.2)
        assert seconds < 600


def test_criterion_03_slit_rates(slit_uniform, slit_adaptive):
    result, _ = slit_uniform
    rate = fit_rate(result.dofs, result.errors)
    print(f"\nCRITERION 3: slit uniform rate {rate:.3f} "
          f"(target 1/4 +- 0.07)")
    assert rate == pytest.approx(0.25, abs=0.07)
    for strat in ADAPTIVE:
        res, _ = slit_adaptive[strat]
        r = fit_rate(res.dofs, res.errors)
        print(f"CRITERION 3: slit {strat} rate {r:.3f} "
              f"(target 1.5 +- 0.25)")
        assert r == pytest.approx(1.5, abs=0.25)


def loglog_interp(dofs, errors, at):
    return float(np.exp(np.interp(np.log(at), np.log(dofs),
                                  np.log(errors))))


def test_criterion_04_plate_hole(plate_uniform, plate_adaptive):
    result, _ = plate_uniform
    rate = fit_rate(result.dofs, result.errors)
    print(f"\nCRITERION 4: plate uniform rate {rate:.3f} "
          f"(target 1.5 +- 0.2)")
    assert rate == pytest.approx(1.5, abs=0.2)
    uni_at_2000 = loglog_interp(result.dofs, result.errors, 2000)
    for strat in ADAPTIVE:
        res = plate_adaptive[strat]
        assert res.dofs[-1] >= 2000 * 0.8
        ad = loglog_interp(res.dofs, res.errors, min(2000, res.dofs[-1]))
        print(f"CRITERION 4: plate {strat} H1 at 2000 DOF {ad:.2e} "
              f"vs uniform {uni_at_2000:.2e}")
        assert ad <= uni_at_2000


# -- criterion 5: worst-case matrix structure ------------------------------


def test_criterion_05_worst_case(worst_runs):
    dofs = {s: worst_runs[s].dofs for s in ADAPTIVE}
    nsteps = min(len(d) for d in dofs.values())
    print()
    for i in range(nsteps):
        others = min(dofs[s][i] for s in ADAPTIVE if s != "minimal_thb")
        print(f"CRITERION 5a: step {i} minimal_thb dof "
              f"{dofs['minimal_thb'][i]} vs best other {others}")
        assert dofs["minimal_thb"][i] <= others
    m6 = worst_runs["minimal_thb"].records[6].max_row_nnz
    s6 = worst_runs["safe_thb"].records[6].max_row_nnz
    print(f"CRITERION 5b: step-6 max_row_nnz minimal {m6} vs safe {s6}")
    uni = worst_runs["uniform"]
    conds = np.array([r.cond for r in uni.records])
    slope = np.polyfit(np.log(uni.dofs), np.log(conds), 1)[0]
    print(f"CRITERION 5c: uniform cond slope {slope:.3f} "
          f"(target 1.0 +- 0.3)")
    assert slope == pytest.approx(1.0, abs=0.3)
    assert m6 > s6


# -- criterion 6: analysis-suitability and Gram rank -----------------------


def ts_gram(mesh):
    basis = tspline_basis(mesh)
    cells = extract_tspline(mesh, basis)
    x, w = gauss01(4)
    S, T = (a.ravel() for a in np.meshgrid(x, x, indexing="ij"))
    W = np.outer(w, w).ravel()
    B = np.einsum("ni,nj->nij", bernstein_row(3, S),
                  bernstein_row(3, T)).reshape(len(S), -1)
    n = len(basis)
    G = np.zeros((n, n))
    for cell in cells:
        x0, x1, y0, y1 = cell.box.float_bounds()
        N = cell.matrix @ B.T
        ids = np.asarray(cell.active_ids)
        G[np.ix_(ids, ids)] += (N * (W * (x1 - x0) * (y1 - y0))) @ N.T
    return G


def test_criterion_06_analysis_suitability(lshape_adaptive, slit_adaptive,
                                           plate_adaptive, worst_runs):
    checked, gram_checked = 0, 0
    for res in ts_runs_everywhere(lshape_adaptive, slit_adaptive,
                                  plate_adaptive, worst_runs):
        meshes = [TMesh.deserialize(s) for s in res.snapshots]
        for a, b in zip(meshes, meshes[1:]):
            assert not incompatibilities(a, b), \
                f"{res.benchmark}/{res.strategy}: nesting violation"
        for m in meshes:
            assert not crossings(m), \
                f"{res.benchmark}/{res.strategy}: extension crossing"
            checked += 1
            basis = tspline_basis(m)
            if len(basis) <= 400:
                G = ts_gram(m)
                d = 1.0 / np.sqrt(np.diag(G))
                ev = np.linalg.eigvalsh(G * np.outer(d, d))
                assert ev[0] > 1e-10 * ev[-1], \
                    f"{res.benchmark}/{res.strategy}: Gram rank deficient"
                gram_checked += 1
    print(f"\nCRITERION 6: {checked} T-spline steps AS-clean, "
          f"{gram_checked} Gram matrices full rank")
    assert checked > 0 and gram_checked > 0


# -- criterion 7: linear complexity ----------------------------------------


def complexity_ratio_hier(variant, seed, frac, J=20):
    rng = random.Random(seed)
    m = HierMesh.initial(8, 8)
    n0 = len(m.elements)
    marked_total = 0
    ratios = {}
    for j in range(1, J + 1):
        els = m.sorted_elements()
        k = max(1, len(els) // frac)
        marked = {els[i] for i in rng.sample(range(len(els)), k)}
        marked_total += k
        cl = hiermesh.closure(m, marked, variant)
        elems = set(m.elements) - cl
        for e in cl:
            elems.update(hiermesh.subdivide(e))
        m = HierMesh(m.M, m.N, m.p, elems)
        ratios[j] = (len(m.elements) - n0) / marked_total
    return ratios


def complexity_ratio_ts(seed, frac, J=20):
    rng = random.Random(seed)
    m = TMesh.tensor(8, 8)
    n0 = len(m.elements)
    marked_total = 0
    ratios = {}
    for j in range(1, J + 1):
        k = max(1, len(m.elements) // frac)
        marked = set(rng.sample(range(len(m.elements)), k))
        marked_total += k
        m, _ = tmesh.refine_safe_ts(m, marked)
        ratios[j] = (len(m.elements) - n0) / marked_total
    return ratios


def test_criterion_07_linear_complexity():
    print()
    for label, fn in (
            ("minimal_thb",
             lambda s: complexity_ratio_hier(Variant.MINIMAL, s, 16)),
            ("safe_thb",
             lambda s: complexity_ratio_hier(Variant.SAFE, s, 16)),
            ("safe_ts", lambda s: complexity_ratio_ts(s, 8))):
        worst = 0.0
        for seed in range(20):
            c = fn(seed)
            worst = max(worst, c[20] / c[5])
        print(f"CRITERION 7: {label} worst ratio(J=20)/ratio(J=5) "
              f"{worst:.3f} (< 2)")
        assert worst < 2.0


# -- criterion 8: bounded overlay -------------------------------------------


def random_hier_history(seed, steps=4):
    rng = random.Random(seed)
    m = HierMesh.initial(4, 4)
    for _ in range(steps):
        els = m.sorted_elements()
        marked = {els[i] for i in
                  rng.sample(range(len(els)), max(1, len(els) // 8))}
        m, _ = hiermesh.refine(m, marked, Variant.SAFE)
    return m


def random_ts_history(seed, steps=4):
    rng = random.Random(seed)
    m = TMesh.tensor(4, 4)
    for _ in range(steps):
        marked = set(rng.sample(range(len(m.elements)),
                                max(1, len(m.elements) // 8)))
        m, _ = tmesh.refine_safe_ts(m, marked)
    return m


def test_criterion_08_bounded_overlay():
    q0 = 16
    print()
    for pair in range(10):
        a = random_hier_history(2 * pair)
        b = random_hier_history(2 * pair + 1)
        ba = [elem_box(e) for e in a.sorted_elements()]
        bb = [elem_box(e) for e in b.sorted_elements()]
        ov = overlay(ba, bb)
        assert len(ov) + q0 <= len(ba) + len(bb), f"THB pair {pair}"
    for pair in range(10):
        a = random_ts_history(100 + 2 * pair)
        b = random_ts_history(101 + 2 * pair)
        ov = overlay(a.boxes(), b.boxes())
        assert len(ov) + q0 <= len(a.boxes()) + len(b.boxes()), \
            f"TS pair {pair}"
    print("CRITERION 8: 10 THB and 10 TS overlay pairs within bound")


# -- criterion 9: cubic reproduction ----------------------------------------


class _Cubic:
    @staticmethod
    def value(pts):
        x, y = pts[:, 0], pts[:, 1]
        return x ** 3 * (y + 1) + y ** 2 * x

    @staticmethod
    def gradient(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([3 * x ** 2 * (y + 1) + y ** 2,
                         x ** 3 + 2 * y * x], axis=1)

    @staticmethod
    def source(pts):
        x, y = pts[:, 0], pts[:, 1]
        return -(6 * x * (y + 1) + 2 * x)


def test_criterion_09_cubic_reproduction():
    geom = identity_geometry(4, 4)

    def flux(pts, normals):
        return np.sum(_Cubic.gradient(pts) * normals, axis=1)

    data = ProblemData("poisson", _Cubic.source,
                       neumann={"u1": flux, "v0": flux, "v1": flux},
                       dirichlet=[("u0", None)])
    print()
    for strat in ADAPTIVE:
        rng = random.Random(sum(map(ord, strat)))
        state = _make_state(strat, 4, 4)
        for _ in range(3):
            cells, _ = state.build()
            n = len(state.element_boxes())
            state.refine(rng.sample(range(n), max(1, n // 6)))
        cells, _ = state.build()
        system = assemble("poisson", cells, geom, data)
        u = solve(system)
        err = h1_error(u, cells, geom, _Cubic)
        norm = h1_error(np.zeros_like(u), cells, geom, _Cubic)
        rel = err / norm
        print(f"CRITERION 9: {strat} relative H1 {rel:.2e} (< 1e-8)")
        assert rel < 1e-8


# -- criterion 10: partition of unity ---------------------------------------


def test_criterion_10_partition_of_unity(lshape_adaptive, slit_adaptive,
                                         plate_adaptive, worst_runs,
                                         lshape_uniform):
    worst = 0.0
    count = 0
    results = [lshape_uniform[0]]
    for store in (lshape_adaptive, slit_adaptive):
        results += [store[s][0] for s in ADAPTIVE]
    results += [plate_adaptive[s] for s in ADAPTIVE]
    results += [worst_runs[s] for s in ADAPTIVE]
    for res in results:
        for d in res.diagnostics:
            worst = max(worst, d["pou_error"])
            count += 1
    print(f"\nCRITERION 10: max |sum - 1| = {worst:.2e} over {count} "
          f"recorded steps (< 1e-12)")
    assert worst < 1e-12


# -- criterion 11: span nesting ---------------------------------------------


def _eval_thb_basis(mesh, basis, xs, ys):
    A = np.empty((len(xs), len(basis.functions)))
    for k, f in enumerate(basis.functions):
        A[:, k] = f.eval(mesh, xs, ys)
    return A


def _eval_ts_basis(basis, xs, ys):
    A = np.empty((len(xs), len(basis)))
    for k, f in enumerate(basis):
        A[:, k] = bspline_eval(f.knots_x, xs) * bspline_eval(f.knots_y, ys)
    return A


def test_criterion_11_span_nesting(lshape_adaptive):
    rng = np.random.default_rng(11)
    print()
    for strat in ADAPTIVE:
        res, _ = lshape_adaptive[strat]
        snaps = res.snapshots
        pairs_checked = 0
        worst = 0.0
        for a, b in zip(snaps, snaps[1:]):
            if strat.endswith("thb"):
                ma, mb = HierMesh.deserialize(a), HierMesh.deserialize(b)
                ba, bb = ThbBasis(ma), ThbBasis(mb)
                ncoarse, nfine = len(ba), len(bb)
                if ncoarse > 300 or nfine > 300:
                    break
                xs = rng.uniform(0, ma.M, 3 * nfine + 200)
                ys = rng.uniform(0, ma.N, len(xs))
                A = _eval_thb_basis(mb, bb, xs, ys)
                B = _eval_thb_basis(ma, ba, xs, ys)
            else:
                ma, mb = TMesh.deserialize(a), TMesh.deserialize(b)
                ba, bb = tspline_basis(ma), tspline_basis(mb)
                if len(ba) > 300 or len(bb) > 300:
                    break
                xs = rng.uniform(0, ma.M, 3 * len(bb) + 200)
                ys = rng.uniform(0, ma.N, len(xs))
                A = _eval_ts_basis(bb, xs, ys)
                B = _eval_ts_basis(ba, xs, ys)
            X, *_ = np.linalg.lstsq(A, B, rcond=None)
            worst = max(worst, float(np.abs(A @ X - B).max()))
            pairs_checked += 1
        print(f"CRITERION 11: {strat} max sampled nesting residual "
              f"{worst:.2e} over {pairs_checked} refinement pairs (< 1e-10)")
        assert pairs_checked > 0
        assert worst < 1e-10


# -- criterion 12: estimator sanity ------------------------------------------


def test_criterion_12_estimator_sanity(lshape_adaptive):
    print()
    for strat in ADAPTIVE:
        res, _ = lshape_adaptive[strat]
        ratios = np.array([r.eta_total / r.h1_error for r in res.records])
        med = np.median(ratios)
        band = max(float((ratios / med).max()), float((med / ratios).max()))
        print(f"CRITERION 12: {strat} eta/error band factor {band:.2f} "
              f"around median {med:.2f} (< 5)")
        assert band < 5.0
