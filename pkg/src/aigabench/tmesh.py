"""T-meshes over the index domain [0,M]x[0,N]: T-junctions, extensions,
analysis-suitability, the repair-based minimal refinement, the half-level
safe refinement, the T-spline basis, and the Bezier mesh.

Coordinates are binary rationals stored as integers at a per-mesh scale,
so every predicate is exact; floats are used only where they represent
the same dyadic values exactly (scales stay far below 2**53).
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass

import numpy as np

from .dyadic import DyadicBox, DyadicValue, dy


class TMeshError(ValueError):
    pass


MAX_SCALE = 48  # floats remain exact for all coordinates up to this depth


def _dv(numer: int, scale: int) -> DyadicValue:
    if numer < 0:
        return -DyadicValue(-numer, scale)
    return DyadicValue(numer, scale)


def bisect_box(box: DyadicBox, direction: int, ratio) -> list[DyadicBox]:
    """Split a box at x_lo + ratio*width (direction 1) or the y analogue."""
    ratio = dy(ratio)
    if not (DyadicValue(0) < ratio < DyadicValue(1)):
        raise TMeshError(f"bisection ratio {ratio} outside (0,1)")
    if direction == 1:
        cut = box.x_lo + ratio * (box.x_hi - box.x_lo)
        return [DyadicBox(box.x_lo, cut, box.y_lo, box.y_hi),
                DyadicBox(cut, box.x_hi, box.y_lo, box.y_hi)]
    if direction == 2:
        cut = box.y_lo + ratio * (box.y_hi - box.y_lo)
        return [DyadicBox(box.x_lo, box.x_hi, box.y_lo, cut),
                DyadicBox(box.x_lo, box.x_hi, cut, box.y_hi)]
    raise TMeshError(f"direction must be 1 or 2, got {direction}")


@dataclass(frozen=True)
class TJunction:
    """A hanging mesh vertex; coordinates in index units (exact floats)."""

    x: float
    y: float
    orientation: str  # 'h': on a vertical element side, 'v': horizontal side
    host_index: int

    @property
    def key(self):
        return (self.orientation, self.x, self.y)


@dataclass(frozen=True)
class TSplineFunction:
    """Anchor-based bivariate B-spline with 5-entry local knot vectors."""

    anchor: tuple[float, float]
    knots_x: tuple[float, ...]
    knots_y: tuple[float, ...]


class TMesh:
    """Immutable T-mesh snapshot.

    elements: tuple of (xlo, xhi, ylo, yhi) integer tuples in units of
    2**-scale.  half_levels (optional) stores, per element, twice the
    half-level for meshes produced by the safe routine.
    """

    def __init__(self, M, N, p, q, scale, elements, half_levels=None):
        if scale > MAX_SCALE:
            raise TMeshError("mesh too deep for exact float coordinates")
        order = sorted(range(len(elements)),
                       key=lambda i: (elements[i][2], elements[i][0]))
        self.M, self.N, self.p, self.q = M, N, p, q
        self.scale = scale
        self.elements = tuple(tuple(elements[i]) for i in order)
        if half_levels is not None:
            half_levels = tuple(half_levels[i] for i in order)
        self.half_levels = half_levels
        self._arr = None
        self._junctions = None
        self._extensions = None
        self._lines: dict = {}
        self._vkeys = None

    @staticmethod
    def tensor(M: int, N: int, p: int = 3, q: int = 3,
               with_levels: bool = True) -> "TMesh":
        elems = [(ix, ix + 1, iy, iy + 1)
                 for iy in range(N) for ix in range(M)]
        half = (0,) * (M * N) if with_levels else None
        return TMesh(M, N, p, q, 0, elems, half)

    @property
    def unit(self) -> int:
        return 1 << self.scale

    def arr(self) -> np.ndarray:
        if self._arr is None:
            self._arr = np.asarray(self.elements, dtype=np.int64)
        return self._arr

    def box(self, i: int) -> DyadicBox:
        a, b, c, d = self.elements[i]
        s = self.scale
        return DyadicBox(_dv(a, s), _dv(b, s), _dv(c, s), _dv(d, s))

    def boxes(self) -> list[DyadicBox]:
        return [self.box(i) for i in range(len(self.elements))]

    def index_of(self, box: DyadicBox) -> int:
        target = (int(float(box.x_lo) * self.unit),
                  int(float(box.x_hi) * self.unit),
                  int(float(box.y_lo) * self.unit),
                  int(float(box.y_hi) * self.unit))
        try:
            return self.elements.index(target)
        except ValueError:
            raise TMeshError(f"{box} is not an element of this mesh")

    def __len__(self):
        return len(self.elements)

    def validate(self) -> None:
        area = sum((b - a) * (d - c) for a, b, c, d in self.elements)
        if area != self.M * self.N * self.unit ** 2:
            raise TMeshError("element areas do not tile the domain")
        arr = self.arr()
        for i, (a, b, c, d) in enumerate(self.elements):
            if not (0 <= a < b <= self.M * self.unit
                    and 0 <= c < d <= self.N * self.unit):
                raise TMeshError(f"element {i} degenerate or out of bounds")
            ov = (arr[:, 0] < b) & (arr[:, 1] > a) & \
                 (arr[:, 2] < d) & (arr[:, 3] > c)
            if ov.sum() != 1:
                raise TMeshError(f"element {i} overlaps another element")

    # -- vertices and T-junctions ---------------------------------------

    def _vertex_keys(self):
        """Sorted key arrays of the vertex set, x-major and y-major."""
        if self._vkeys is None:
            arr = self.arr()
            stride = max(self.M, self.N) * self.unit + 2
            xs = np.concatenate([arr[:, 0], arr[:, 1], arr[:, 0], arr[:, 1]])
            ys = np.concatenate([arr[:, 2], arr[:, 2], arr[:, 3], arr[:, 3]])
            xmaj = np.unique(xs * stride + ys)
            ymaj = np.unique(ys * stride + xs)
            self._vkeys = (xmaj, ymaj, stride)
        return self._vkeys

    def vertices(self) -> list[tuple[float, float]]:
        xmaj, _, stride = self._vertex_keys()
        u = self.unit
        return [((k // stride) / u, (k % stride) / u) for k in xmaj]

    def junctions(self) -> list[TJunction]:
        """All hanging vertices with host element and orientation."""
        if self._junctions is not None:
            return self._junctions
        xmaj, ymaj, stride = self._vertex_keys()
        u = self.unit
        out = {}

        def emit(x, y, orient, host):
            j = TJunction(x / u, y / u, orient, host)
            if j.key in out:
                raise TMeshError(f"T-junction host not unique at {j.key}")
            out[j.key] = j

        for i, (a, b, c, d) in enumerate(self.elements):
            for x in (a, b):  # vertical sides -> horizontal junctions
                lo = bisect_right(xmaj, x * stride + c)
                hi = bisect_left(xmaj, x * stride + d)
                for k in range(lo, hi):
                    emit(x, xmaj[k] % stride, "h", i)
            for y in (c, d):  # horizontal sides -> vertical junctions
                lo = bisect_right(ymaj, y * stride + a)
                hi = bisect_left(ymaj, y * stride + b)
                for k in range(lo, hi):
                    emit(ymaj[k] % stride, y, "v", i)
        self._junctions = sorted(out.values(),
                                 key=lambda j: (j.y, j.x, j.orientation))
        return self._junctions

    # -- global lines and extensions ------------------------------------

    def _line(self, axis: int, coord: int) -> np.ndarray:
        """Sorted scaled points of the global line (axis 1: X-line at a
        given y; axis 2: Y-line at a given x), with ghost integer points."""
        key = (axis, coord)
        line = self._lines.get(key)
        if line is None:
            arr = self.arr()
            u = self.unit
            g = -(-self.p // 2) if axis == 1 else -(-self.q // 2)
            if axis == 1:
                mask = (arr[:, 2] <= coord) & (arr[:, 3] >= coord)
                pts = np.concatenate([arr[mask, 0], arr[mask, 1]])
                ghosts = [t * u for t in range(-g, 0)] + \
                         [(self.M + 1 + t) * u for t in range(g)]
            else:
                mask = (arr[:, 0] <= coord) & (arr[:, 1] >= coord)
                pts = np.concatenate([arr[mask, 2], arr[mask, 3]])
                ghosts = [t * u for t in range(-g, 0)] + \
                         [(self.N + 1 + t) * u for t in range(g)]
            line = np.unique(np.concatenate([pts, np.asarray(ghosts,
                                                             dtype=np.int64)]))
            self._lines[key] = line
        return line

    def global_line(self, v: tuple[float, float], direction: int
                    ) -> list[float]:
        u = self.unit
        coord = int((v[1] if direction == 1 else v[0]) * u)
        return [t / u for t in self._line(direction, coord)]

    def _window(self, line: np.ndarray, lo: int, hi: int, p: int
                ) -> tuple[int, int]:
        """Extension span: p+1 consecutive line points with (lo,hi) as the
        two middle entries; returns the scaled end coordinates."""
        i = int(np.searchsorted(line, lo))
        if not (line[i] == lo and line[i + 1] == hi):
            raise TMeshError("host side points missing from global line")
        w = (p - 1) // 2
        if i - w < 0 or i + 1 + w >= len(line):
            raise TMeshError("global line too short for extension")
        return int(line[i - w]), int(line[i + 1 + w])

    def extensions(self) -> dict:
        """Per junction key: (fixed, lo, hi) of the extension segment,
        in index units.  Horizontal segments vary in x, vertical in y."""
        if self._extensions is not None:
            return self._extensions
        out = {}
        u = self.unit
        for j in self.junctions():
            a, b, c, d = self.elements[j.host_index]
            if j.orientation == "h":
                line = self._line(1, int(j.y * u))
                lo, hi = self._window(line, a, b, self.p)
            else:
                line = self._line(2, int(j.x * u))
                lo, hi = self._window(line, c, d, self.q)
            out[j.key] = (j.y if j.orientation == "h" else j.x,
                          lo / u, hi / u)
        self._extensions = out
        return out

    def crossing_count(self) -> int:
        h, v = [], []
        for (orient, _, _), seg in self.extensions().items():
            (h if orient == "h" else v).append(seg)
        if not h or not v:
            return 0
        hy, hlo, hhi = np.asarray(h).T.reshape(3, -1, 1)
        vx, vlo, vhi = np.asarray(v).T.reshape(3, 1, -1)
        hit = (vx >= hlo) & (vx <= hhi) & (hy >= vlo) & (hy <= vhi)
        return int(hit.sum())

    def is_analysis_suitable(self) -> bool:
        return self.crossing_count() == 0

    # -- serialization ---------------------------------------------------

    def serialize(self, header: str = "TMESH") -> str:
        lines = [f"{header} {self.M} {self.N} {self.p} {self.q}"]
        for i, coords in enumerate(self.elements):
            parts = []
            for cval in coords:
                v = _dv(cval, self.scale)
                parts += [str(v.numerator), str(v.scale)]
            if self.half_levels is not None:
                parts.append(str(self.half_levels[i]))
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @staticmethod
    def deserialize(text: str) -> "TMesh":
        rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        head = rows[0]
        if head[0] not in ("TMESH", "BEZIER"):
            raise TMeshError("not a TMESH dump")
        M, N, p, q = (int(v) for v in head[1:5])
        scale = 0
        for row in rows[1:]:
            scale = max(scale, *(int(s) for s in row[1:8:2]))
        elems, halves = [], []
        for row in rows[1:]:
            nums = [int(v) for v in row]
            coords = tuple(nums[2 * k] << (scale - nums[2 * k + 1])
                           for k in range(4))
            elems.append(coords)
            if len(nums) == 9:
                halves.append(nums[8])
        half = tuple(halves) if len(halves) == len(elems) else None
        mesh = TMesh(M, N, p, q, scale, elems, half)
        mesh.validate()
        return mesh


def t_junctions(mesh: TMesh) -> list[TJunction]:
    return mesh.junctions()


def extension(mesh: TMesh, j: TJunction):
    """(fixed coordinate, lo, hi) of the junction's extension segment."""
    return mesh.extensions()[j.key]


def crossings(mesh: TMesh) -> set:
    """All (horizontal key, vertical key) pairs with intersecting
    extensions."""
    h, v = [], []
    for key, seg in mesh.extensions().items():
        (h if key[0] == "h" else v).append((key, seg))
    out = set()
    for hk, (hy, hlo, hhi) in h:
        for vk, (vx, vlo, vhi) in v:
            if hlo <= vx <= hhi and vlo <= hy <= vhi:
                out.add((hk, vk))
    return out


def refines(old: TMesh, new: TMesh) -> bool:
    """Every new element sits inside some old element."""
    oa = old.arr() * (new.unit // old.unit if new.scale >= old.scale else 1)
    if new.scale < old.scale:
        return False
    na = new.arr()
    for a, b, c, d in na:
        inside = (oa[:, 0] <= a) & (oa[:, 1] >= b) & \
                 (oa[:, 2] <= c) & (oa[:, 3] >= d)
        if not inside.any():
            return False
    return True


def _shrunk_keys(old_exts: dict, new: TMesh) -> set:
    out = set()
    for key, (_, nlo, nhi) in new.extensions().items():
        seg = old_exts.get(key)
        if seg is None:
            continue
        _, olo, ohi = seg
        if nlo >= olo and nhi <= ohi and (nlo > olo or nhi < ohi):
            out.add(key)
    return out


def _shrunk_count(old_exts: dict, new: TMesh) -> int:
    return len(_shrunk_keys(old_exts, new))


def incompatibilities(old: TMesh, new: TMesh) -> set:
    """Junctions alive in both meshes whose extension strictly shrank."""
    if not refines(old, new):
        raise TMeshError("second mesh does not refine the first")
    old_exts = old.extensions()
    out = set()
    for key, (_, nlo, nhi) in new.extensions().items():
        seg = old_exts.get(key)
        if seg is None:
            continue
        _, olo, ohi = seg
        if nlo >= olo and nhi <= ohi and (nlo > olo or nhi < ohi):
            out.add(key)
    return out


def _replace(mesh: TMesh, idx_to_children: dict) -> TMesh:
    """New snapshot with the given element rows replaced by children given
    in scaled coordinates at `scale` (>= mesh.scale)."""
    grow = max((s for s, _ in idx_to_children.values()), default=mesh.scale)
    grow = max(grow, mesh.scale)
    f = 1 << (grow - mesh.scale)
    elems, halves = [], []
    has_half = mesh.half_levels is not None
    for i, e in enumerate(mesh.elements):
        if i in idx_to_children:
            s, children = idx_to_children[i]
            ff = 1 << (grow - s)
            for child in children:
                elems.append(tuple(v * ff for v in child[0]))
                if has_half:
                    halves.append(child[1])
        else:
            elems.append(tuple(v * f for v in e))
            if has_half:
                halves.append(mesh.half_levels[i])
    return TMesh(mesh.M, mesh.N, mesh.p, mesh.q, grow, elems,
                 tuple(halves) if has_half else None)


def ref_tj(mesh: TMesh, j: TJunction) -> TMesh:
    """Bisect the host through the junction so it stops being one."""
    a, b, c, d = mesh.elements[j.host_index]
    u = mesh.unit
    if j.orientation == "h":
        cut = int(j.y * u)
        children = [((a, b, c, cut), None), ((a, b, cut, d), None)]
    else:
        cut = int(j.x * u)
        children = [((a, cut, c, d), None), ((cut, b, c, d), None)]
    return _replace(mesh, {j.host_index: (mesh.scale, children)})


def quad_subdivide(mesh: TMesh, marked) -> TMesh:
    """Replace each marked element by its four mid-quadrants."""
    repl = {}
    for i in marked:
        a, b, c, d = (v * 2 for v in mesh.elements[i])
        mx, my = (a + b) // 2, (c + d) // 2
        kids = [((a, mx, c, my), None), ((mx, b, c, my), None),
                ((a, mx, my, d), None), ((mx, b, my, d), None)]
        repl[i] = (mesh.scale + 1, kids)
    return _replace(mesh, repl)


def refine_scott(mesh: TMesh, marked) -> tuple[TMesh, list[TSplineFunction]]:
    """Minimal T-spline refinement: quad-subdivide the marked elements and
    repair with single-element bisections chosen by the crossing +
    incompatibility count, until the mesh is analysis-suitable and nested.
    """
    marked = set(marked)
    if mesh.half_levels is not None:
        mesh = TMesh(mesh.M, mesh.N, mesh.p, mesh.q, mesh.scale,
                     mesh.elements)
    new = quad_subdivide(mesh, marked) if marked else mesh
    old_exts = mesh.extensions()
    guard = 4 * mesh.M * mesh.N * 4 ** (new.scale + 1)
    for _ in range(guard):
        bad = set(_shrunk_keys(old_exts, new))
        for hk, vk in crossings(new):
            bad.add(hk)
            bad.add(vk)
        if not bad:
            break
        # only junctions participating in a violation are candidates;
        # bisecting any other element cannot be required for termination
        best = None
        for j in new.junctions():
            if j.key not in bad:
                continue
            trial = ref_tj(new, j)
            score = trial.crossing_count() + _shrunk_count(old_exts, trial)
            key = (score, j.y, j.x, 0 if j.orientation == "h" else 1)
            if best is None or key < best[0]:
                best = (key, trial)
        new = best[1]
    else:
        raise TMeshError("repair loop failed to terminate")
    return new, tspline_basis(new)


# -- safe (half-level) refinement ---------------------------------------


def half_children(box: DyadicBox, half_level) -> list[DyadicBox]:
    """The two children one half-level down: x-halving when the box is a
    level-k square, y-halving when it is a half-level box."""
    h = int(round(2 * float(half_level)))
    w = box.x_hi - box.x_lo
    t = box.y_hi - box.y_lo
    k = h // 2
    if h % 2 == 0:
        if w != DyadicValue(1, k) or t != DyadicValue(1, k):
            raise TMeshError(f"box shape does not match level {k}")
        return bisect_box(box, 1, DyadicValue(1, 1))
    if w != DyadicValue(1, k + 1) or t != DyadicValue(1, k):
        raise TMeshError(f"box shape does not match half-level {k}+1/2")
    return bisect_box(box, 2, DyadicValue(1, 1))


def _distance_bound(h: int, p: int, q: int) -> tuple[float, float]:
    """Componentwise midpoint distance bound D for half-level h/2."""
    if h % 2 == 0:
        s = 2.0 ** (-h // 2)
        return s * (p // 2 + 0.5), s * (-(-q // 2) + 0.5)
    s = 2.0 ** (-(h + 1) // 2)
    return s * (-(-p // 2) + 0.5), s * (2 * (q // 2) + 1)


def closure_safe_ts(mesh: TMesh, marked) -> set[int]:
    """Fixed point of adding half-level-coarser elements with midpoints
    within the degree-dependent distance bound."""
    if mesh.half_levels is None:
        raise TMeshError("mesh lacks half-level provenance")
    marked = set(marked)
    if any(i >= len(mesh.elements) for i in marked):
        raise TMeshError("marked index out of range")
    arr = mesh.arr()
    u = mesh.unit
    mx = (arr[:, 0] + arr[:, 1]) / (2 * u)
    my = (arr[:, 2] + arr[:, 3]) / (2 * u)
    halves = np.asarray(mesh.half_levels)
    result = set(marked)
    work = list(marked)
    while work:
        i = work.pop()
        h = mesh.half_levels[i]
        if h == 0:
            continue
        dx, dy_ = _distance_bound(h, mesh.p, mesh.q)
        near = (halves == h - 1) & (np.abs(mx - mx[i]) <= dx) & \
            (np.abs(my - my[i]) <= dy_)
        for k in np.nonzero(near)[0]:
            k = int(k)
            if k not in result:
                result.add(k)
                work.append(k)
    return result


def refine_safe_ts(mesh: TMesh, marked
                   ) -> tuple[TMesh, list[TSplineFunction]]:
    """Half-split every element of the safe closure."""
    cl = closure_safe_ts(mesh, marked)
    repl = {}
    for i in cl:
        a, b, c, d = mesh.elements[i]
        h = mesh.half_levels[i]
        if h % 2 == 0:
            m = a + b  # x-split at doubled scale
            kids = [((2 * a, m, 2 * c, 2 * d), h + 1),
                    ((m, 2 * b, 2 * c, 2 * d), h + 1)]
        else:
            m = c + d
            kids = [((2 * a, 2 * b, 2 * c, m), h + 1),
                    ((2 * a, 2 * b, m, 2 * d), h + 1)]
        repl[i] = (mesh.scale + 1, kids)
    new = _replace(mesh, repl)
    return new, tspline_basis(new)


# -- basis and Bezier mesh ----------------------------------------------


def _extended_line(mesh: TMesh, axis: int, coord: int) -> list[float]:
    """Global line in index units with enough extra ghost integers that
    windows centered at the outermost ghost anchors exist."""
    u = mesh.unit
    p = mesh.p if axis == 1 else mesh.q
    end = mesh.M if axis == 1 else mesh.N
    extra = (p - 1) // 2
    pts = [t / u for t in mesh._line(axis, coord)]
    return [pts[0] - s for s in range(extra, 0, -1)] + pts + \
        [pts[-1] + s for s in range(1, extra + 1)]


def _window_at(line: list[float], value: float, p: int) -> tuple[float, ...]:
    i = line.index(value)
    w = (p + 1) // 2
    return tuple(line[i - w: i + w + 1])


def _clamp_window(window, end: float) -> tuple[float, ...]:
    """Clamp ghost knots onto the domain boundary (open knot vectors).

    Keeps boundary functions interpolatory and the restricted basis
    well-conditioned; the unclamped ghost tails otherwise become nearly
    dependent on interior functions under deep boundary refinement."""
    return tuple(min(max(float(k), 0.0), end) for k in window)


def tspline_basis(mesh: TMesh) -> list[TSplineFunction]:
    """One function per mesh vertex plus one anchor layer beyond each
    boundary side, with knot windows clamped onto the domain (open knot
    vectors), so the span is the full spline space over the domain
    (partition of unity and cubic reproduction hold up to the boundary
    and boundary functions are interpolatory)."""
    if not mesh.is_analysis_suitable():
        raise TMeshError("mesh is not analysis-suitable")
    u = mesh.unit
    p, q, M, N = mesh.p, mesh.q, mesh.M, mesh.N
    gx = {0.0: [float(-t) for t in range(1, (p - 1) // 2 + 1)],
          float(M): [float(M + t) for t in range(1, (p - 1) // 2 + 1)]}
    gy = {0.0: [float(-t) for t in range(1, (q - 1) // 2 + 1)],
          float(N): [float(N + t) for t in range(1, (q - 1) // 2 + 1)]}
    anchors = set(mesh.vertices())
    for (vx, vy) in mesh.vertices():
        for g in gx.get(vx, ()):
            anchors.add((g, vy))
        for g in gy.get(vy, ()):
            anchors.add((vx, g))
    for a in gx[0.0] + gx[float(M)]:
        for b in gy[0.0] + gy[float(N)]:
            anchors.add((a, b))
    out = []
    for (vx, vy) in sorted(anchors, key=lambda v: (v[1], v[0])):
        line_y = vy if 0 <= vy <= N else (0.0 if vy < 0 else float(N))
        line_x = vx if 0 <= vx <= M else (0.0 if vx < 0 else float(M))
        lx = _extended_line(mesh, 1, int(line_y * u))
        ly = _extended_line(mesh, 2, int(line_x * u))
        kx = _clamp_window(_window_at(lx, vx, p), float(M))
        ky = _clamp_window(_window_at(ly, vy, q), float(N))
        out.append(TSplineFunction((vx, vy), kx, ky))
    return out


def bezier_mesh(mesh: TMesh) -> TMesh:
    """Partition induced by the element edges plus all extensions.

    Extension segments never break inside an element interior (their
    breakpoints are skeleton points), so each one that meets an interior
    cuts the element across its full width or height.
    """
    u = mesh.unit
    hsegs, vsegs = [], []
    for key, (fixed, lo, hi) in mesh.extensions().items():
        seg = (int(fixed * u), int(lo * u), int(hi * u))
        (hsegs if key[0] == "h" else vsegs).append(seg)
    cells = []
    for (a, b, c, d) in mesh.elements:
        xcuts = {x for x, lo, hi in vsegs if a < x < b and lo < d and hi > c}
        ycuts = {y for y, lo, hi in hsegs if c < y < d and lo < b and hi > a}
        xs = sorted({a, b} | xcuts)
        ys = sorted({c, d} | ycuts)
        for i in range(len(xs) - 1):
            for k in range(len(ys) - 1):
                cells.append((xs[i], xs[i + 1], ys[k], ys[k + 1]))
    return TMesh(mesh.M, mesh.N, mesh.p, mesh.q, mesh.scale, cells)
