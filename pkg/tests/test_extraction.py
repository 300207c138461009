"""Bezier extraction against direct basis-function evaluation.

Oracle: on every extraction cell, the extraction matrix applied to the
tensor Bernstein rows must reproduce the pointwise values of each active
global basis function.
"""

import random

import numpy as np
import pytest

from aigabench.bspline import bernstein_row, bspline_eval
from aigabench.extraction import extract, extract_thb, extract_tspline
from aigabench.hiermesh import HierMesh, ThbBasis, Variant, elem_box, refine
from aigabench.tmesh import TMesh, refine_safe_ts, refine_scott, tspline_basis

RNG = np.random.default_rng(7)


def cell_points(box, n=5):
    x0, x1, y0, y1 = box.float_bounds()
    s = RNG.uniform(0.02, 0.98, n)
    t = RNG.uniform(0.02, 0.98, n)
    return (x0 + (x1 - x0) * s, y0 + (y1 - y0) * t, s, t)


def bernstein_tensor(s, t, p, q):
    bs = bernstein_row(p, s)
    bt = bernstein_row(q, t)
    return np.einsum("ni,nj->nij", bs, bt).reshape(len(s), -1)


def check_thb(mesh, basis, atol=1e-11):
    cells = extract_thb(basis)
    assert {c.box.float_bounds() for c in cells} == \
        {elem_box(e).float_bounds() for e in mesh.elements}
    for cell in cells:
        xs, ys, s, t = cell_points(cell.box)
        bern = bernstein_tensor(s, t, mesh.p, mesh.p)
        vals = cell.matrix @ bern.T
        for row, fid in enumerate(cell.active_ids):
            direct = basis.functions[fid].eval(mesh, xs, ys)
            np.testing.assert_allclose(vals[row], direct, atol=atol)


def test_extract_thb_uniform():
    m = HierMesh.initial(3, 3)
    check_thb(m, ThbBasis(m))


@pytest.mark.parametrize("variant", [Variant.MINIMAL, Variant.SAFE])
def test_extract_thb_refined(variant):
    rng = random.Random(13)
    m = HierMesh.initial(4, 4)
    basis = ThbBasis(m)
    for _ in range(3):
        els = m.sorted_elements()
        marked = {els[i] for i in rng.sample(range(len(els)), 3)}
        m, basis = refine(m, marked, variant)
    check_thb(m, basis)


def ts_direct(f, xs, ys):
    return bspline_eval(f.knots_x, xs) * bspline_eval(f.knots_y, ys)


def check_ts(mesh, atol=1e-11):
    basis = tspline_basis(mesh)
    cells = extract_tspline(mesh, basis)
    covered = 0.0
    for cell in cells:
        xs, ys, s, t = cell_points(cell.box)
        bern = bernstein_tensor(s, t, mesh.p, mesh.q)
        vals = cell.matrix @ bern.T
        for row, fid in enumerate(cell.active_ids):
            np.testing.assert_allclose(vals[row],
                                       ts_direct(basis[fid], xs, ys),
                                       atol=atol)
        # every function with support overlapping the cell must be active
        x0, x1, y0, y1 = cell.box.float_bounds()
        for fid, f in enumerate(basis):
            if (f.knots_x[0] < x1 and f.knots_x[-1] > x0
                    and f.knots_y[0] < y1 and f.knots_y[-1] > y0):
                assert fid in cell.active_ids
        covered += (x1 - x0) * (y1 - y0)
    assert covered == pytest.approx(mesh.M * mesh.N)


def test_extract_tspline_tensor():
    check_ts(TMesh.tensor(3, 3))


def test_extract_tspline_safe_refined():
    rng = random.Random(17)
    m = TMesh.tensor(4, 4)
    for _ in range(3):
        m, _ = refine_safe_ts(m, set(rng.sample(range(len(m.elements)), 2)))
    check_ts(m)


def test_extract_tspline_scott_refined():
    rng = random.Random(19)
    m = TMesh.tensor(5, 5)
    for _ in range(3):
        m, _ = refine_scott(m, set(rng.sample(range(len(m.elements)), 2)))
    check_ts(m)


def test_extract_dispatch():
    m = HierMesh.initial(2, 2)
    basis = ThbBasis(m)
    assert len(extract(basis)) == len(m.elements)
    tm = TMesh.tensor(2, 2)
    assert len(extract(tspline_basis(tm), tm)) == len(tm.elements)
