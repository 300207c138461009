"""Unified Bezier-extraction element view.

For either basis family the solver sees the same thing: a list of cells,
each with the ids of the active global functions and a matrix expressing
those functions in the tensor Bernstein basis of the cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .bspline import bernstein_row, bspline_eval
from .dyadic import DyadicBox
from .hiermesh import HierMesh, ThbBasis, function_window
from .tmesh import TMesh, TMeshError, TSplineFunction, bezier_mesh


@dataclass
class BezierElement:
    box: DyadicBox
    active_ids: list[int]
    matrix: np.ndarray  # (#active) x (p+1)(q+1)


_NODES = np.linspace(0.0, 1.0, 4)
_BERN_INV: dict[int, np.ndarray] = {}


def _bern_inv(p: int) -> np.ndarray:
    inv = _BERN_INV.get(p)
    if inv is None:
        nodes = np.linspace(0.0, 1.0, p + 1)
        inv = np.linalg.inv(bernstein_row(p, nodes))
        _BERN_INV[p] = inv
    return inv


def _bernstein_coeffs(window, lo: float, hi: float, p: int) -> np.ndarray:
    """Bernstein coefficients of one B-spline on [lo, hi] (a knot span)."""
    pts = lo + (hi - lo) * np.linspace(0.0, 1.0, p + 1)
    vals = bspline_eval([float(v) for v in window], pts)
    return _bern_inv(p) @ vals


_THB_U_CACHE: dict = {}


def _thb_univariate(level: int, cx: int, extent: int, p: int) -> np.ndarray:
    """Rows a=0..p: Bernstein coefficients of level function cx+a on the
    level cell [cx, cx+1]*2**-level."""
    g = Fraction(1, 1 << level)
    lo = cx * g
    windows = [function_window(level, cx + a, extent, p) for a in range(p + 1)]
    sig = tuple(tuple((v - lo) / g for v in w) for w in windows)
    hit = _THB_U_CACHE.get(sig)
    if hit is None:
        hit = np.vstack([_bernstein_coeffs(w, float(lo), float(lo + g), p)
                         for w in windows])
        _THB_U_CACHE[sig] = hit
    return hit


def extract_thb(basis: ThbBasis) -> list[BezierElement]:
    """THB extraction: cells are the mesh elements themselves."""
    mesh = basis.mesh
    p = mesh.p
    blocks = basis.element_blocks()
    out = []
    for e in sorted(mesh.elements, key=lambda e: _corner_key_hier(e)):
        m, cx, cy = e
        U = _thb_univariate(m, cx, mesh.M, p)
        V = _thb_univariate(m, cy, mesh.N, p)
        ids = sorted(blocks[e])
        rows = np.empty((len(ids), (p + 1) * (p + 1)))
        for r, fid in enumerate(ids):
            rows[r] = (U.T @ blocks[e][fid] @ V).reshape(-1)
        out.append(BezierElement(_hier_box(e), ids, rows))
    return out


def _corner_key_hier(e):
    k, ix, iy = e
    return (Fraction(iy, 1 << k), Fraction(ix, 1 << k))


def _hier_box(e) -> DyadicBox:
    from .hiermesh import elem_box
    return elem_box(e)


def extract_tspline(mesh: TMesh, basis: list[TSplineFunction]
                    ) -> list[BezierElement]:
    """T-spline extraction on the Bezier mesh cells."""
    if not mesh.is_analysis_suitable():
        raise TMeshError("extraction requires an analysis-suitable mesh")
    p, q = mesh.p, mesh.q
    bez = bezier_mesh(mesh)
    supports = np.array([[f.knots_x[0], f.knots_x[-1],
                          f.knots_y[0], f.knots_y[-1]] for f in basis])
    out = []
    for (a, b, c, d) in bez.elements:
        u = bez.unit
        xlo, xhi, ylo, yhi = a / u, b / u, c / u, d / u
        act = np.nonzero((supports[:, 0] < xhi) & (supports[:, 1] > xlo) &
                         (supports[:, 2] < yhi) & (supports[:, 3] > ylo))[0]
        rows = np.empty((len(act), (p + 1) * (q + 1)))
        for r, fid in enumerate(act):
            f = basis[fid]
            bx = _bernstein_coeffs(f.knots_x, xlo, xhi, p)
            by = _bernstein_coeffs(f.knots_y, ylo, yhi, q)
            rows[r] = np.outer(bx, by).reshape(-1)
        out.append(BezierElement(bez.box(bez.elements.index((a, b, c, d))),
                                 [int(i) for i in act], rows))
    out.sort(key=lambda el: (float(el.box.y_lo), float(el.box.x_lo)))
    return out


def extract(basis, mesh=None) -> list[BezierElement]:
    """Dispatch on the basis family."""
    if isinstance(basis, ThbBasis):
        return extract_thb(basis)
    if isinstance(mesh, TMesh):
        return extract_tspline(mesh, basis)
    raise TypeError("unsupported basis/mesh combination")
