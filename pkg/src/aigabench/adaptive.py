"""Marking strategies and the SOLVE -> ESTIMATE -> MARK -> REFINE loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import assembly, hiermesh, tmesh
from .bspline import bernstein_row
from .extraction import extract

STRATEGIES = ("minimal_thb", "safe_thb", "minimal_ts", "safe_ts", "uniform")
MARKINGS = ("quantile", "doerfler", "maximum")


class AdaptiveError(RuntimeError):
    pass


def mark(eta: np.ndarray, theta: float, rule: str = "quantile",
         squared: bool = False) -> np.ndarray:
    """Indices of marked elements, ascending; ties broken by element id."""
    eta = np.asarray(eta, dtype=float)
    if eta.size == 0:
        raise AdaptiveError("cannot mark on an empty estimate")
    if not 0 < theta <= 1:
        raise AdaptiveError(f"marking parameter must be in (0, 1], "
                            f"got {theta}")
    order = np.lexsort((np.arange(len(eta)), -eta))
    if rule == "quantile":
        k = math.ceil(theta * len(eta))
        return np.sort(order[:k])
    if rule == "doerfler":
        contrib = eta[order] ** 2 if squared else eta[order]
        total = contrib.sum()
        csum = np.cumsum(contrib)
        k = int(np.searchsorted(csum, theta * total)) + 1
        return np.sort(order[:min(k, len(eta))])
    if rule == "maximum":
        return np.nonzero(eta >= theta * eta.max())[0]
    raise AdaptiveError(f"unknown marking rule {rule!r}")


# -- refinement state per strategy ---------------------------------------


class _HierState:
    def __init__(self, M, N, p, variant):
        self.mesh = hiermesh.HierMesh.initial(M, N, p)
        self.variant = variant

    def build(self):
        basis = hiermesh.ThbBasis(self.mesh)
        return extract(basis), len(basis)

    def element_boxes(self):
        key = lambda e: (hiermesh.elem_box(e).y_lo, hiermesh.elem_box(e).x_lo)
        self._sorted = sorted(self.mesh.elements, key=key)
        return [hiermesh.elem_box(e) for e in self._sorted]

    def refine(self, marked_idx):
        marked = [self._sorted[i] for i in marked_idx]
        self.mesh, _ = hiermesh.refine(self.mesh, marked, self.variant)

    def serialize(self):
        return self.mesh.serialize()


class _UniformState(_HierState):
    def __init__(self, M, N, p):
        super().__init__(M, N, p, hiermesh.Variant.SAFE)

    def refine(self, marked_idx):
        self.mesh = hiermesh.uniform_refine(self.mesh)


class _TsState:
    def __init__(self, M, N, p, q, safe):
        self.mesh = tmesh.TMesh.tensor(M, N, p, q, with_levels=safe)
        self.safe = safe

    def build(self):
        if self.safe:
            basis = tmesh.tspline_basis(self.mesh)
        else:
            basis = self._pending if self._pending is not None \
                else tmesh.tspline_basis(self.mesh)
        self._pending = None
        return extract(basis, self.mesh), len(basis)

    _pending = None

    def element_boxes(self):
        return [self.mesh.box(i) for i in range(len(self.mesh.elements))]

    def refine(self, marked_idx):
        if self.safe:
            # one adaptive step = one full dyadic level: the half-level
            # routine is applied twice (x-split, then y-split of the
            # children) so marked elements end up quartered like in the
            # hierarchical strategies
            boxes = [self.mesh.elements[i] for i in marked_idx]
            scale = self.mesh.scale
            mid, _ = tmesh.refine_safe_ts(self.mesh, set(marked_idx))
            f = 2 ** (mid.scale - scale)
            targets = [(a * f, b * f, c * f, d * f) for a, b, c, d in boxes]
            second = {i for i, (a, b, c, d) in enumerate(mid.elements)
                      if any(A <= a and b <= B and C <= c and d <= D
                             for A, B, C, D in targets)}
            self.mesh, self._pending = tmesh.refine_safe_ts(mid, second)
        else:
            self.mesh, self._pending = tmesh.refine_scott(
                self.mesh, set(marked_idx))

    def serialize(self):
        return self.mesh.serialize()


def _make_state(strategy, M, N, p=3, q=3):
    if strategy == "minimal_thb":
        return _HierState(M, N, p, hiermesh.Variant.MINIMAL)
    if strategy == "safe_thb":
        return _HierState(M, N, p, hiermesh.Variant.SAFE)
    if strategy == "minimal_ts":
        return _TsState(M, N, p, q, safe=False)
    if strategy == "safe_ts":
        return _TsState(M, N, p, q, safe=True)
    if strategy == "uniform":
        return _UniformState(M, N, p)
    raise AdaptiveError(f"unknown strategy {strategy!r}")


# -- run loop -------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    dof: int
    h1_error: float
    eta_total: float
    cond: float
    nnz: int
    max_row_nnz: int
    elements: int
    seconds: float

    FIELDS = ("step", "dof", "h1_error", "eta_total", "cond",
              "nnz", "max_row_nnz", "elements", "seconds")

    def row(self):
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class RunResult:
    benchmark: str
    strategy: str
    marking: str
    theta: float
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)   # serialized mesh per step
    diagnostics: list = field(default_factory=list)

    @property
    def dofs(self):
        return np.array([r.dof for r in self.records])

    @property
    def errors(self):
        return np.array([r.h1_error for r in self.records])


def _cells_per_element(cells, boxes):
    """For each cell the index of the containing element."""
    eb = np.array([b.float_bounds() for b in boxes])
    out = np.empty(len(cells), dtype=int)
    for i, c in enumerate(cells):
        xlo, xhi, ylo, yhi = c.box.float_bounds()
        cx, cy = (xlo + xhi) / 2, (ylo + yhi) / 2
        hit = np.nonzero((eb[:, 0] <= cx) & (eb[:, 1] >= cx)
                         & (eb[:, 2] <= cy) & (eb[:, 3] >= cy))[0]
        if len(hit) != 1:
            raise AdaptiveError("cell is not contained in a unique element")
        out[i] = hit[0]
    return out


_POU_GRID = None


def _pou_error(cells) -> float:
    """Max |sum of active functions - 1| on a 10x10 grid per cell."""
    global _POU_GRID
    if _POU_GRID is None:
        x = (np.arange(10) + 0.5) / 10
        S, T = np.meshgrid(x, x, indexing='ij')
        _POU_GRID = np.einsum('ni,nj->nij', bernstein_row(3, S.ravel()),
                              bernstein_row(3, T.ravel())).reshape(100, -1)
    sums = np.stack([c.matrix.sum(axis=0) for c in cells])
    return float(np.abs(sums @ _POU_GRID.T - 1.0).max())


def run(benchmark, strategy: str, theta: float = 0.25,
        marking: str = "quantile", max_steps: int = 10,
        dof_cap: int = 100000, with_cond: bool = True,
        on_step=None, mark_override=None, squared: bool = False
        ) -> RunResult:
    """Run the adaptive loop for one benchmark/strategy combination.

    `mark_override(state, boxes)` replaces estimator-based marking (used by
    the structured worst-case sequence); `on_step` receives
    (step, state, cells, system, eta) after each step's solve."""
    state = _make_state(strategy, benchmark.M, benchmark.N)
    result = RunResult(benchmark.name, strategy, marking, theta)
    geom, data = benchmark.geometry, benchmark.data
    matrix_only = benchmark.kind == "matrix_only"
    kind = "poisson" if matrix_only else benchmark.kind
    for step in range(max_steps):
        t0 = time.perf_counter()
        cells, nfun = state.build()
        system = assembly.assemble(kind, cells, geom, data)
        if system.dof > dof_cap:
            break
        boxes = state.element_boxes()
        owner = _cells_per_element(cells, boxes)
        if matrix_only:
            err, eta, eta_elem = float("nan"), float("nan"), None
        else:
            coeffs = assembly.solve(system)
            err = assembly.h1_error(coeffs, cells, geom, benchmark.exact,
                                    kind)
            hq_elem = assembly._cell_diameters(
                [_BoxCell(b) for b in boxes], geom)
            eta_cells = assembly.estimate(kind, coeffs, cells, geom, data,
                                          diameters=hq_elem[owner])
            eta_elem = np.sqrt(np.bincount(owner, eta_cells ** 2,
                                           minlength=len(boxes)))
            eta = float(np.sqrt((eta_elem ** 2).sum()))
        cond = assembly.condition_number(system.matrix) if with_cond \
            else float("nan")
        stats = assembly.sparsity_stats(system.matrix)
        seconds = time.perf_counter() - t0
        result.records.append(StepRecord(
            step, system.dof, err, eta, cond, stats["nnz"],
            stats["max_row_nnz"], len(boxes), seconds))
        result.snapshots.append(state.serialize())
        result.diagnostics.append({
            "functions": nfun, "cells": len(cells),
            "pou_error": _pou_error(cells)})
        if on_step is not None:
            on_step(step, state, cells, system, eta_elem)
        if step == max_steps - 1:
            break
        if mark_override is not None:
            marked = mark_override(state, boxes)
        elif strategy == "uniform" or matrix_only and eta_elem is None:
            marked = np.arange(len(boxes))
        else:
            marked = mark(eta_elem, theta, marking, squared)
        state.refine(marked)
    return result


class _BoxCell:
    """Just enough of the cell interface for geometric helpers."""

    def __init__(self, box):
        self.box = box
        self.active_ids = ()


def fit_rate(dofs, errors, last: int = 4) -> float:
    """Least-squares slope of log(error) against log(dof), negated."""
    d = np.log(np.asarray(dofs, dtype=float)[-last:])
    e = np.log(np.asarray(errors, dtype=float)[-last:])
    if len(d) < 2:
        raise AdaptiveError("need at least two data points to fit a rate")
    return float(-np.polyfit(d, e, 1)[0])
