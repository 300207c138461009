"""Hierarchical rectangular meshes and the (truncated) hierarchical B-spline
basis, with the one-level-graded ("minimal") and 2-admissible ("safe")
refinement routines.

Elements are level-k squares of side 2**-k addressed by integer cell
coordinates, so all mesh predicates are exact integer arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .bspline import single_function_refine
from .dyadic import DyadicBox, DyadicValue


class MeshError(ValueError):
    pass


class Variant(Enum):
    MINIMAL = "minimal"
    SAFE = "safe"


Elem = tuple[int, int, int]  # (level, ix, iy)


def elem_box(e: Elem) -> DyadicBox:
    k, ix, iy = e
    return DyadicBox(DyadicValue(ix, k), DyadicValue(ix + 1, k),
                     DyadicValue(iy, k), DyadicValue(iy + 1, k))


def subdivide(e: Elem) -> list[Elem]:
    """The four level-(k+1) quadrants of a level-k element."""
    k, ix, iy = e
    return [(k + 1, 2 * ix + dx, 2 * iy + dy)
            for dy in (0, 1) for dx in (0, 1)]


def knot_value(level: int, idx: int, extent: int, p: int) -> Fraction:
    """Entry idx of the clamped uniform knot vector of one direction.

    The vector is [0]*p ++ [0, g, 2g, .., extent] ++ [extent]*p with
    g = 2**-level; there are extent*2**level + p basis functions.
    """
    cells = extent << level
    if idx < p:
        return Fraction(0)
    if idx > p + cells:
        return Fraction(extent)
    return Fraction(idx - p, 1 << level)


def function_window(level: int, i: int, extent: int, p: int) -> list[Fraction]:
    return [knot_value(level, i + a, extent, p) for a in range(p + 2)]


def function_cells(level: int, i: int, extent: int, p: int) -> tuple[int, int]:
    """Closed range [lo, hi] of level cells in the support of function i."""
    cells = extent << level
    return max(0, i - p), min(cells - 1, i)


_REFINE_MEMO: dict = {}


def refine_entry(level: int, i: int, extent: int, p: int
                 ) -> list[tuple[int, Fraction]]:
    """Level -> level+1 expansion of clamped function i of one direction.

    Returns (fine index, coefficient) pairs for the nonzero coefficients.
    """
    window = function_window(level, i, extent, p)
    t0 = window[0]
    g = Fraction(1, 1 << level)
    sig = tuple((v - t0) / g for v in window)
    hit = _REFINE_MEMO.get((p, sig))
    if hit is None:
        fine = []
        for v in window:
            fine.append(v)
        # insert midpoints of nonzero spans (each once)
        mids = sorted({(window[a] + window[a + 1]) / 2
                       for a in range(p + 1)
                       if window[a] != window[a + 1]})
        merged = sorted(fine + mids)
        coeffs = single_function_refine(window, merged)
        hit = ([(sl, c) for sl, c in enumerate(coeffs) if c != 0],
               tuple((v - t0) / g for v in merged))
        _REFINE_MEMO[(p, sig)] = hit
    pairs, _ = hit
    # global start index of the first fine window
    if t0 == 0:
        zeros = sum(1 for v in window if v == 0)
        s0 = (p + 1) - zeros
    else:
        s0 = p + int(t0 / (g / 2))
    return [(s0 + sl, c) for sl, c in pairs]


@dataclass(frozen=True)
class LevelFunction:
    """One tensor-product B-spline of the level-k basis."""

    level: int
    i: int
    j: int

    def knots_x(self, mesh: "HierMesh") -> list[Fraction]:
        return function_window(self.level, self.i, mesh.M, mesh.p)

    def knots_y(self, mesh: "HierMesh") -> list[Fraction]:
        return function_window(self.level, self.j, mesh.N, mesh.p)


class HierMesh:
    """Immutable snapshot of a hierarchical mesh on [0,M]x[0,N]."""

    def __init__(self, M: int, N: int, p: int, elements):
        self.M = M
        self.N = N
        self.p = p
        self.elements: frozenset[Elem] = frozenset(elements)
        self.max_level = max(e[0] for e in self.elements)
        self._by_level: dict[int, dict[tuple[int, int], Elem]] = {}
        for e in self.elements:
            self._by_level.setdefault(e[0], {})[(e[1], e[2])] = e
        self._omega_cells: dict[int, set] = {}

    @staticmethod
    def initial(M: int, N: int, p: int = 3) -> "HierMesh":
        if M < 1 or N < 1:
            raise MeshError("extents must be positive")
        if p % 2 == 0 or p < 1:
            raise MeshError("degree must be positive odd")
        return HierMesh(M, N, p, [(0, ix, iy)
                                  for ix in range(M) for iy in range(N)])

    def sorted_elements(self) -> list[Elem]:
        return sorted(self.elements)

    def levels(self) -> list[int]:
        return sorted(self._by_level)

    def is_uniform(self) -> bool:
        ks = {e[0] for e in self.elements}
        if len(ks) != 1:
            return False
        k = ks.pop()
        return len(self.elements) == self.M * self.N * 4 ** k

    def covering_element(self, k: int, cx: int, cy: int) -> Elem | None:
        """The mesh element of level <= k whose box covers the level-k cell,
        or None if the cell is subdivided further."""
        for lv in range(k, -1, -1):
            d = k - lv
            e = self._by_level.get(lv, {}).get((cx >> d, cy >> d))
            if e is not None:
                return e
        return None

    def element_at_point(self, x: float, y: float) -> Elem:
        """Element whose closed box contains the point; finest-level walk."""
        for lv in range(self.max_level, -1, -1):
            cx = min(int(x * (1 << lv)), self.M * (1 << lv) - 1)
            cy = min(int(y * (1 << lv)), self.N * (1 << lv) - 1)
            e = self._by_level.get(lv, {}).get((cx, cy))
            if e is not None:
                return e
        raise MeshError(f"point ({x},{y}) not covered")

    def omega_cells(self, k: int) -> set:
        """Level-k cells covered by level-k-or-finer elements."""
        if k not in self._omega_cells:
            cells = set()
            for e in self.elements:
                lv, ix, iy = e
                if lv >= k:
                    d = lv - k
                    cells.add((ix >> d, iy >> d))
            self._omega_cells[k] = cells
        return self._omega_cells[k]

    def validate(self) -> None:
        """Exact interior-disjointness and full-cover check."""
        area = Fraction(0)
        for (k, ix, iy) in self.elements:
            if not (0 <= ix < self.M << k and 0 <= iy < self.N << k):
                raise MeshError(f"element {(k, ix, iy)} outside domain")
            area += Fraction(1, 1 << (2 * k))
        if area != self.M * self.N:
            raise MeshError("element areas do not sum to the domain area")
        for e in self.elements:
            k, ix, iy = e
            for lv in range(0, k):
                if (ix >> (k - lv), iy >> (k - lv)) in self._by_level.get(lv, {}):
                    raise MeshError(f"{e} nested inside a coarser element")

    # -- serialization -------------------------------------------------

    def serialize(self) -> str:
        lines = [f"HIERMESH {self.M} {self.N} {self.p}"]
        for (k, ix, iy) in self.sorted_elements():
            x = DyadicValue(ix, k)
            y = DyadicValue(iy, k)
            lines.append(f"{k} {x.numerator} {x.scale} {y.numerator} {y.scale}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def deserialize(text: str) -> "HierMesh":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        head = lines[0].split()
        if head[0] != "HIERMESH":
            raise MeshError("not a HIERMESH dump")
        M, N, p = int(head[1]), int(head[2]), int(head[3])
        elems = []
        for ln in lines[1:]:
            k, xn, xs, yn, ys = (int(v) for v in ln.split())
            elems.append((k, xn << (k - xs), yn << (k - ys)))
        mesh = HierMesh(M, N, p, elems)
        mesh.validate()
        return mesh


def uniform_refine(mesh: HierMesh) -> HierMesh:
    if not mesh.is_uniform():
        raise MeshError("uniform_refine requires a uniform mesh")
    elems = [c for e in mesh.elements for c in subdivide(e)]
    return HierMesh(mesh.M, mesh.N, mesh.p, elems)


def level_domain(mesh: HierMesh, k: int) -> set[Elem]:
    """Elements of level >= k (their union is the level-k domain)."""
    return {e for e in mesh.elements if e[0] >= k}


# -- neighbourhoods and closures ---------------------------------------


def _coarse_touching(mesh: HierMesh, e: Elem) -> set[Elem]:
    """Mesh elements of strictly coarser level whose closed box touches e."""
    k, ix, iy = e
    out = set()
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            cx, cy = ix + dx, iy + dy
            if not (0 <= cx < mesh.M << k and 0 <= cy < mesh.N << k):
                continue
            nb = mesh.covering_element(k, cx, cy)
            if nb is not None and nb[0] < k:
                out.add(nb)
    return out


def _coarse_safe(mesh: HierMesh, e: Elem) -> set[Elem]:
    """Coarser elements containing a same-level cell that shares a level-k
    B-spline support with e."""
    k, ix, iy = e
    p = mesh.p
    out = set()
    for cx in range(max(0, ix - p), min(mesh.M << k, ix + p + 1)):
        for cy in range(max(0, iy - p), min(mesh.N << k, iy + p + 1)):
            nb = mesh.covering_element(k, cx, cy)
            if nb is not None and nb[0] < k:
                out.add(nb)
    return out


def closure(mesh: HierMesh, marked, variant: Variant) -> set[Elem]:
    """Fixed point of the variant's coarse-neighbourhood operator."""
    marked = set(marked)
    if not marked <= mesh.elements:
        raise MeshError("marked elements not in mesh")
    variant = Variant(variant)
    nbr = _coarse_touching if variant is Variant.MINIMAL else _coarse_safe
    result = set(marked)
    work = list(marked)
    while work:
        e = work.pop()
        for nb in nbr(mesh, e):
            if nb not in result:
                result.add(nb)
                work.append(nb)
    return result


def refine(mesh: HierMesh, marked, variant: Variant
           ) -> tuple[HierMesh, "ThbBasis"]:
    cl = closure(mesh, marked, variant)
    elems = set(mesh.elements) - cl
    for e in cl:
        elems.update(subdivide(e))
    new_mesh = HierMesh(mesh.M, mesh.N, mesh.p, elems)
    return new_mesh, ThbBasis(new_mesh)


# -- HB / THB bases ----------------------------------------------------


def _supp_in_omega(mesh: HierMesh, k: int, i: int, j: int,
                   omega_k: set, shift: int = 0) -> bool:
    """Is the support of level-k function (i,j) inside Omega^(k+shift)?

    With shift=1 the check runs on the children cells at level k+1.
    """
    xlo, xhi = function_cells(k, i, mesh.M, mesh.p)
    ylo, yhi = function_cells(k, j, mesh.N, mesh.p)
    if shift:
        xlo, xhi, ylo, yhi = 2 * xlo, 2 * xhi + 1, 2 * ylo, 2 * yhi + 1
    for cx in range(xlo, xhi + 1):
        for cy in range(ylo, yhi + 1):
            if (cx, cy) not in omega_k:
                return False
    return True


def hb_sets(mesh: HierMesh) -> dict[int, set[tuple[int, int]]]:
    """Per level, the (i,j) index pairs of the hierarchical basis."""
    p = mesh.p
    out: dict[int, set] = {}
    for k in range(mesh.max_level + 1):
        omega_k = mesh.omega_cells(k)
        if not omega_k:
            continue
        omega_k1 = mesh.omega_cells(k + 1)
        cand = set()
        for (cx, cy) in omega_k:
            for i in range(cx, cx + p + 1):
                for j in range(cy, cy + p + 1):
                    cand.add((i, j))
        nx = (mesh.M << k) + p
        ny = (mesh.N << k) + p
        sel = set()
        for (i, j) in cand:
            if i >= nx or j >= ny:
                continue
            if not _supp_in_omega(mesh, k, i, j, omega_k):
                continue
            if _supp_in_omega(mesh, k, i, j, omega_k1, shift=1):
                continue  # entirely inside the next-finer domain
            sel.add((i, j))
        if sel:
            out[k] = sel
    return out


def hb_basis(mesh: HierMesh) -> list[LevelFunction]:
    out = []
    for k, sel in sorted(hb_sets(mesh).items()):
        for (i, j) in sorted(sel, key=lambda ij: (ij[1], ij[0])):
            out.append(LevelFunction(k, i, j))
    return out


class ThbFunction:
    """A truncated hierarchical basis function.

    coeffs[m] maps level-m tensor indices (i,j) to the coefficient of the
    level-m representation after truncation up to level m; entries are kept
    only where the support meets the level-m domain, which is exactly where
    the representation is needed for evaluation on level-m elements.
    """

    def __init__(self, base: LevelFunction, coeffs: dict):
        self.base = base
        self.coeffs = coeffs

    @property
    def level(self) -> int:
        return self.base.level

    def eval(self, mesh: "HierMesh", xs, ys, deriv=(0, 0)) -> np.ndarray:
        """Pointwise evaluation (oracle-grade, not assembly-grade speed)."""
        from .bspline import bspline_eval
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        out = np.zeros_like(xs)
        for n, (x, y) in enumerate(zip(xs, ys)):
            k = mesh.element_at_point(x, y)[0]
            m = min(k, max(self.coeffs))
            for (i, j), c in self.coeffs.get(m, {}).items():
                wx = function_window(m, i, mesh.M, mesh.p)
                wy = function_window(m, j, mesh.N, mesh.p)
                out[n] += c * bspline_eval(wx, x, deriv[0]) * \
                    bspline_eval(wy, y, deriv[1])
        return out


class ThbBasis:
    """THB basis of a mesh snapshot with per-element coefficient blocks."""

    def __init__(self, mesh: HierMesh):
        self.mesh = mesh
        p = mesh.p
        self.hb = hb_sets(mesh)
        self.functions: list[ThbFunction] = []
        max_lv = mesh.max_level
        for k in sorted(self.hb):
            for (i, j) in sorted(self.hb[k], key=lambda ij: (ij[1], ij[0])):
                coeffs = self._truncate(k, i, j, max_lv)
                self.functions.append(ThbFunction(LevelFunction(k, i, j),
                                                  coeffs))
        self._element_blocks: dict | None = None

    def _truncate(self, k: int, i: int, j: int, max_lv: int) -> dict:
        mesh = self.mesh
        p = mesh.p
        coeffs = {k: {(i, j): Fraction(1)}}
        cur = coeffs[k]
        for m in range(k + 1, max_lv + 1):
            omega = mesh.omega_cells(m)
            if not omega:
                break
            hb_m = self.hb.get(m, set())
            nxt: dict = {}
            for (ci, cj), c in cur.items():
                rx = refine_entry(m - 1, ci, mesh.M, p)
                ry = refine_entry(m - 1, cj, mesh.N, p)
                for fi, ax in rx:
                    for fj, ay in ry:
                        key = (fi, fj)
                        nxt[key] = nxt.get(key, Fraction(0)) + c * ax * ay
            # truncation: drop children that belong to the level-m HB basis
            # and prune children whose support misses the level-m domain
            pruned: dict = {}
            for (fi, fj), c in nxt.items():
                if c == 0 or (fi, fj) in hb_m:
                    continue
                if self._touches_omega(m, fi, fj, omega):
                    pruned[(fi, fj)] = c
            if not pruned:
                break
            coeffs[m] = pruned
            cur = pruned
        return {m: {ij: float(c) for ij, c in d.items()}
                for m, d in coeffs.items()}

    def _touches_omega(self, m: int, i: int, j: int, omega: set) -> bool:
        mesh = self.mesh
        xlo, xhi = function_cells(m, i, mesh.M, mesh.p)
        ylo, yhi = function_cells(m, j, mesh.N, mesh.p)
        return any((cx, cy) in omega
                   for cx in range(xlo, xhi + 1)
                   for cy in range(ylo, yhi + 1))

    def __len__(self) -> int:
        return len(self.functions)

    def element_blocks(self) -> dict[Elem, dict[int, np.ndarray]]:
        """Per element: function id -> (p+1)x(p+1) level-local coefficients.

        Block entry (a, b) is the coefficient of the level-m tensor
        function (cx + a, cy + b) on element (m, cx, cy).
        """
        if self._element_blocks is not None:
            return self._element_blocks
        mesh = self.mesh
        p = mesh.p
        blocks: dict[Elem, dict[int, np.ndarray]] = {
            e: {} for e in mesh.elements}
        by_level = mesh._by_level
        for fid, f in enumerate(self.functions):
            for m, entries in f.coeffs.items():
                lv_elems = by_level.get(m)
                if not lv_elems:
                    continue
                for (i, j), c in entries.items():
                    xlo, xhi = function_cells(m, i, mesh.M, p)
                    ylo, yhi = function_cells(m, j, mesh.N, p)
                    for cx in range(xlo, xhi + 1):
                        for cy in range(ylo, yhi + 1):
                            e = lv_elems.get((cx, cy))
                            if e is None:
                                continue
                            blk = blocks[e].get(fid)
                            if blk is None:
                                blk = np.zeros((p + 1, p + 1))
                                blocks[e][fid] = blk
                            blk[i - cx, j - cy] += c
        self._element_blocks = blocks
        return blocks


def truncate(mesh: HierMesh, f: LevelFunction) -> ThbFunction:
    """Truncation of a single HB-basis function (convenience wrapper)."""
    basis = ThbBasis(mesh)
    for g in basis.functions:
        if g.base == f:
            return g
    raise MeshError(f"{f} is not in the hierarchical basis of this mesh")
