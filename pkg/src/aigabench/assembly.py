"""Geometry mapping, Galerkin assembly, boundary conditions, linear solve,
H1 errors, residual error estimation, conditioning and sparsity reports.

Everything operates on the unified Bezier-extraction cell view, so the same
code serves THB-spline and T-spline discretizations of the Poisson and
plane-stress elasticity problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bspline import bernstein_deriv_row, bernstein_row, bspline_eval
from .extraction import BezierElement


class AssemblyError(RuntimeError):
    pass


_GAUSS_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [0, 1]."""
    if n not in _GAUSS_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GAUSS_CACHE[n] = ((x + 1) / 2, w / 2)
    return _GAUSS_CACHE[n]


# -- geometry ------------------------------------------------------------


@dataclass
class GeometryMap:
    """Tensor-product (rational) spline patch on the index domain."""

    deg_u: int
    deg_v: int
    knots_u: list[float]
    knots_v: list[float]
    ctrl: np.ndarray       # (nu, nv, 2)
    weights: np.ndarray    # (nu, nv)
    c0_lines_u: tuple = ()    # u = const parametric lines that are sub-C1
    c0_lines_v: tuple = ()
    degenerate_edges: tuple = ()  # parametric side names with J singular

    def _basis(self, axis: int, t: np.ndarray, deriv: int = 0) -> np.ndarray:
        deg = self.deg_u if axis == 0 else self.deg_v
        knots = self.knots_u if axis == 0 else self.knots_v
        n = len(knots) - deg - 1
        return np.stack([bspline_eval(knots[i:i + deg + 2], t, deriv)
                         for i in range(n)])

    def eval(self, U, V, jacobian: bool = True):
        """Physical points (n,2) and, optionally, Jacobians (n,2,2)."""
        U = np.atleast_1d(np.asarray(U, dtype=float))
        V = np.atleast_1d(np.asarray(V, dtype=float))
        bu, bv = self._basis(0, U), self._basis(1, V)
        wgt = self.weights
        num = np.einsum('ijc,ij,in,jn->nc', self.ctrl, wgt, bu, bv)
        den = np.einsum('ij,in,jn->n', wgt, bu, bv)
        pts = num / den[:, None]
        if not jacobian:
            return pts, None
        du, dv = self._basis(0, U, 1), self._basis(1, V, 1)
        num_u = np.einsum('ijc,ij,in,jn->nc', self.ctrl, wgt, du, bv)
        num_v = np.einsum('ijc,ij,in,jn->nc', self.ctrl, wgt, bu, dv)
        den_u = np.einsum('ij,in,jn->n', wgt, du, bv)
        den_v = np.einsum('ij,in,jn->n', wgt, bu, dv)
        jac = np.empty((len(U), 2, 2))
        jac[:, :, 0] = (num_u - pts * den_u[:, None]) / den[:, None]
        jac[:, :, 1] = (num_v - pts * den_v[:, None]) / den[:, None]
        return pts, jac

    def hessians(self, U, V, step: float = 1e-6) -> np.ndarray:
        """Second derivatives of the map per component, (n,2,2,2):
        out[:, c] is the parametric Hessian of F_c, via central differences
        of the analytic Jacobian."""
        _, jup = self.eval(U + step, V)
        _, jum = self.eval(U - step, V)
        _, jvp = self.eval(U, V + step)
        _, jvm = self.eval(U, V - step)
        dJu = (jup - jum) / (2 * step)   # d/du of J
        dJv = (jvp - jvm) / (2 * step)
        out = np.empty((len(dJu), 2, 2, 2))
        for c in range(2):
            out[:, c, 0, 0] = dJu[:, c, 0]
            out[:, c, 0, 1] = dJv[:, c, 0]
            out[:, c, 1, 0] = dJv[:, c, 0]
            out[:, c, 1, 1] = dJv[:, c, 1]
        return out


def identity_geometry(M: int, N: int) -> GeometryMap:
    ctrl = np.array([[[0.0, 0.0], [0.0, N]], [[M, 0.0], [M, N]]])
    return GeometryMap(1, 1, [0, 0, M, M], [0, 0, N, N],
                       ctrl, np.ones((2, 2)))


# -- problem data --------------------------------------------------------


@dataclass
class ProblemData:
    """Everything assemble() needs besides cells and geometry."""

    kind: str                      # 'poisson' | 'elasticity'
    source: object                 # f(points) -> (n,) or (n,2)
    neumann: dict = field(default_factory=dict)   # side -> g(points, normals)
    dirichlet: list = field(default_factory=list)  # (side, component|None)
    material: tuple = ()           # (E, nu) for elasticity, plane stress


@dataclass
class LinearSystem:
    matrix: sp.csr_matrix          # reduced (free) system
    rhs: np.ndarray
    reduction: sp.csr_matrix       # maps free coefficients -> full vector
    kind: str

    @property
    def dof(self) -> int:
        return self.matrix.shape[0]


def _material_tensor(E: float, nu: float) -> np.ndarray:
    """Plane-stress constitutive matrix in Voigt order (xx, yy, xy)."""
    c = E / (1 - nu * nu)
    return c * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])


def _cell_geometry(cell: BezierElement) -> tuple[float, float, float, float]:
    xlo, xhi, ylo, yhi = cell.box.float_bounds()
    return xlo, ylo, xhi - xlo, yhi - ylo


def _tensor_rows(p: int, q: int, s: np.ndarray, t: np.ndarray,
                 ds: int, dt: int) -> np.ndarray:
    """Tensor Bernstein rows (npts, (p+1)(q+1)) at reference points."""
    ru = bernstein_deriv_row(p, s, ds) if ds else bernstein_row(p, s)
    rv = bernstein_deriv_row(q, t, dt) if dt else bernstein_row(q, t)
    return np.einsum('ni,nj->nij', ru, rv).reshape(len(s), -1)


class CellField:
    """Values/derivatives of all active functions of one cell at reference
    points, with derivatives scaled to index coordinates."""

    def __init__(self, cell: BezierElement, s, t, p=3, q=3,
                 second: bool = False):
        self.cell = cell
        xlo, ylo, w, h = _cell_geometry(cell)
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        self.u = xlo + w * s
        self.v = ylo + h * t
        E = cell.matrix
        self.N = E @ _tensor_rows(p, q, s, t, 0, 0).T
        self.Nu = (E @ _tensor_rows(p, q, s, t, 1, 0).T) / w
        self.Nv = (E @ _tensor_rows(p, q, s, t, 0, 1).T) / h
        if second:
            self.Nuu = (E @ _tensor_rows(p, q, s, t, 2, 0).T) / w ** 2
            self.Nuv = (E @ _tensor_rows(p, q, s, t, 1, 1).T) / (w * h)
            self.Nvv = (E @ _tensor_rows(p, q, s, t, 0, 2).T) / h ** 2


def _grid(npts: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = gauss01(npts)
    S, T = np.meshgrid(x, x, indexing='ij')
    W = np.outer(w, w).reshape(-1)
    return S.reshape(-1), T.reshape(-1), W


class _CellBatch:
    """Cells of identical size and active count, evaluated together."""

    def __init__(self, cells, idxs, s, t, p, q, geom, second=False):
        self.idxs = np.asarray(idxs)
        xlo, xhi, ylo, yhi = cells[idxs[0]].box.float_bounds()
        w, h = xhi - xlo, yhi - ylo
        self.w, self.h = w, h
        self.area = w * h
        org = np.array([cells[i].box.float_bounds() for i in idxs])
        self.ids = np.array([cells[i].active_ids for i in idxs])
        E = np.stack([cells[i].matrix for i in idxs])       # (g, nact, 16)
        self.U = org[:, 0:1] + w * s[None, :]               # (g, npts)
        self.V = org[:, 2:3] + h * t[None, :]
        g, npts = self.U.shape
        pts, jac = geom.eval(self.U.ravel(), self.V.ravel())
        self.pts = pts.reshape(g, npts, 2)
        jac = jac.reshape(g, npts, 2, 2)
        self.det = (jac[..., 0, 0] * jac[..., 1, 1]
                    - jac[..., 0, 1] * jac[..., 1, 0])
        if np.any(self.det <= 0):
            raise AssemblyError("non-positive Jacobian inside a cell")
        self.jac = jac
        inv = np.empty_like(jac)
        inv[..., 0, 0] = jac[..., 1, 1] / self.det
        inv[..., 1, 1] = jac[..., 0, 0] / self.det
        inv[..., 0, 1] = -jac[..., 0, 1] / self.det
        inv[..., 1, 0] = -jac[..., 1, 0] / self.det
        self.inv = inv
        B0 = _tensor_rows(p, q, s, t, 0, 0)
        Bu = _tensor_rows(p, q, s, t, 1, 0)
        Bv = _tensor_rows(p, q, s, t, 0, 1)
        self.N = E @ B0.T                                   # (g, nact, npts)
        Nu = (E @ Bu.T) / w
        Nv = (E @ Bv.T) / h
        self.Nu, self.Nv = Nu, Nv
        self.gx = Nu * inv[..., 0, 0][:, None, :] + \
            Nv * inv[..., 1, 0][:, None, :]
        self.gy = Nu * inv[..., 0, 1][:, None, :] + \
            Nv * inv[..., 1, 1][:, None, :]
        if second:
            self.Nuu = (E @ _tensor_rows(p, q, s, t, 2, 0).T) / w ** 2
            self.Nuv = (E @ _tensor_rows(p, q, s, t, 1, 1).T) / (w * h)
            self.Nvv = (E @ _tensor_rows(p, q, s, t, 0, 2).T) / h ** 2
            self.geom_hess = geom.hessians(self.U.ravel(), self.V.ravel()) \
                .reshape(g, npts, 2, 2, 2)


def _batches(cells, s, t, p, q, geom, second=False):
    groups: dict = {}
    for i, c in enumerate(cells):
        xlo, xhi, ylo, yhi = c.box.float_bounds()
        key = (xhi - xlo, yhi - ylo, len(c.active_ids))
        groups.setdefault(key, []).append(i)
    for idxs in groups.values():
        yield _CellBatch(cells, idxs, s, t, p, q, geom, second)


_SIDES = {"u0": (0, 0.0), "u1": (0, None), "v0": (1, 0.0), "v1": (1, None)}


def _side_coord(side: str, geom_extent: tuple[float, float]) -> tuple:
    axis, val = _SIDES[side]
    if val is None:
        val = geom_extent[axis]
    return axis, val


def _cells_on_side(cells, side, extent):
    axis, val = _side_coord(side, extent)
    out = []
    for cell in cells:
        xlo, xhi, ylo, yhi = cell.box.float_bounds()
        lo, hi = (xlo, xhi) if axis == 0 else (ylo, yhi)
        if lo == val or hi == val:
            out.append(cell)
    return out


def _edge_points(cell, side, extent, npts):
    """Reference (s, t) arrays for Gauss points along the given side."""
    axis, val = _side_coord(side, extent)
    x, w = gauss01(npts)
    xlo, xhi, ylo, yhi = cell.box.float_bounds()
    if axis == 0:
        s = np.full_like(x, 0.0 if xlo == val else 1.0)
        return s, x, w, (yhi - ylo)
    t = np.full_like(x, 0.0 if ylo == val else 1.0)
    return x, t, w, (xhi - xlo)


def assemble(kind: str, cells: list[BezierElement], geom: GeometryMap,
             data: ProblemData, degree: tuple[int, int] = (3, 3),
             quad: int | None = None) -> LinearSystem:
    """Galerkin system with (p+1)^2 Gauss points per cell; homogeneous
    Dirichlet constraints imposed through the boundary trace kernel."""
    p, q = degree
    nfun = 1 + max(max(c.active_ids) for c in cells if c.active_ids)
    ncomp = 2 if kind == "elasticity" else 1
    n = nfun * ncomp
    extent = (float(geom.knots_u[-1]), float(geom.knots_v[-1]))
    s, t, wq = _grid(quad or (p + 1))
    C = _material_tensor(*data.material) if kind == "elasticity" else None

    rows, cols, vals = [], [], []
    b = np.zeros(n)
    for bt in _batches(cells, s, t, p, q, geom):
        wdet = wq[None, :] * bt.det * bt.area          # (g, npts)
        fv = data.source(bt.pts.reshape(-1, 2))
        if kind == "poisson":
            ke = np.einsum('gap,gp,gbp->gab', bt.gx, wdet, bt.gx) + \
                np.einsum('gap,gp,gbp->gab', bt.gy, wdet, bt.gy)
            fe = np.einsum('gap,gp->ga', bt.N,
                           wdet * fv.reshape(bt.det.shape))
            _scatter_batch(rows, cols, vals, bt.ids, bt.ids, ke)
            np.add.at(b, bt.ids, fe)
        else:
            f = fv.reshape(bt.det.shape + (2,))
            kxx = np.einsum('gap,gp,gbp->gab', bt.gx, wdet * C[0, 0], bt.gx) \
                + np.einsum('gap,gp,gbp->gab', bt.gy, wdet * C[2, 2], bt.gy)
            kyy = np.einsum('gap,gp,gbp->gab', bt.gy, wdet * C[1, 1], bt.gy) \
                + np.einsum('gap,gp,gbp->gab', bt.gx, wdet * C[2, 2], bt.gx)
            kxy = np.einsum('gap,gp,gbp->gab', bt.gx, wdet * C[0, 1], bt.gy) \
                + np.einsum('gap,gp,gbp->gab', bt.gy, wdet * C[2, 2], bt.gx)
            ix, iy = 2 * bt.ids, 2 * bt.ids + 1
            _scatter_batch(rows, cols, vals, ix, ix, kxx)
            _scatter_batch(rows, cols, vals, iy, iy, kyy)
            _scatter_batch(rows, cols, vals, ix, iy, kxy)
            _scatter_batch(rows, cols, vals, iy, ix,
                           np.swapaxes(kxy, 1, 2))
            np.add.at(b, ix, np.einsum('gap,gp->ga', bt.N, wdet * f[..., 0]))
            np.add.at(b, iy, np.einsum('gap,gp->ga', bt.N, wdet * f[..., 1]))

    # Neumann boundary terms
    for side, g in data.neumann.items():
        for cell in _cells_on_side(cells, side, extent):
            se, te, we, span = _edge_points(cell, side, extent, p + 2)
            fld = CellField(cell, se, te, p, q)
            pts, jac = geom.eval(fld.u, fld.v)
            axis, val = _side_coord(side, extent)
            tang = jac[:, :, 1 - axis]          # d(edge)/d(running param)
            ds = np.linalg.norm(tang, axis=1) * span
            normals = _outward_normal(jac, axis, val, extent)
            gv = g(pts, normals)
            ids = np.asarray(cell.active_ids)
            if kind == "poisson":
                b[ids] += (fld.N * (we * ds)) @ gv
            else:
                b[2 * ids] += (fld.N * (we * ds)) @ gv[:, 0]
                b[2 * ids + 1] += (fld.N * (we * ds)) @ gv[:, 1]

    A = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    A.sum_duplicates()
    Z = _dirichlet_reduction(cells, data, extent, nfun, ncomp, p, q)
    A_red = (Z.T @ A @ Z).tocsr()
    A_red.eliminate_zeros()
    b_red = Z.T @ b
    return LinearSystem(A_red, b_red, Z, kind)


def _cell_area(cell) -> float:
    xlo, ylo, w, h = _cell_geometry(cell)
    return w * h


def _inv2(jac: np.ndarray) -> np.ndarray:
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv = np.empty_like(jac)
    inv[:, 0, 0] = jac[:, 1, 1] / det
    inv[:, 1, 1] = jac[:, 0, 0] / det
    inv[:, 0, 1] = -jac[:, 0, 1] / det
    inv[:, 1, 0] = -jac[:, 1, 0] / det
    return inv


def _scatter(rows, cols, vals, ridx, cidx, ke):
    r, c = np.meshgrid(ridx, cidx, indexing='ij')
    rows.append(r.reshape(-1))
    cols.append(c.reshape(-1))
    vals.append(np.asarray(ke).reshape(-1))


def _scatter_batch(rows, cols, vals, ridx, cidx, ke):
    """ridx/cidx (g, n), ke (g, n, n)."""
    g, n = ridx.shape
    rows.append(np.repeat(ridx, n, axis=1).reshape(-1))
    cols.append(np.tile(cidx, (1, n)).reshape(-1))
    vals.append(ke.reshape(-1))


def _outward_normal(jac, axis, val, extent):
    """Unit physical outward normal on a parametric side."""
    ref = np.zeros(2)
    ref[axis] = -1.0 if val == 0.0 else 1.0
    inv = _inv2(jac)
    nrm = np.einsum('nij,i->nj', inv, ref)   # J^{-T} ref
    return nrm / np.linalg.norm(nrm, axis=1)[:, None]


def _dirichlet_reduction(cells, data, extent, nfun, ncomp, p, q
                         ) -> sp.csr_matrix:
    """Sequentially intersect the kernels of the boundary trace Gram
    matrices.  For clamped bases this reduces to eliminating the boundary
    rows/columns; for unclamped (ghost-anchor) bases it constrains the
    correct trace combinations without over-constraining."""
    n = nfun * ncomp
    Z = sp.identity(n, format='csr')
    for side, comp in data.dirichlet:
        T = _trace_gram(cells, side, extent, nfun, ncomp, comp, p, q)
        S = (Z.T @ T @ Z).tocsr()
        d = np.abs(S.diagonal())
        if d.max() == 0:
            continue
        sup = np.nonzero(d > 0)[0]
        Tm = S[np.ix_(sup, sup)].toarray()
        # scale-free kernel: normalize by the diagonal so that functions
        # with tiny (but nonzero) boundary trace are not misclassified
        ds = 1.0 / np.sqrt(np.diag(Tm))
        w, V = np.linalg.eigh(Tm * np.outer(ds, ds))
        kernel = ds[:, None] * V[:, w <= 1e-10 * w[-1]]
        if kernel.shape[1]:
            kernel, _ = np.linalg.qr(kernel)
        m = Z.shape[1]
        keep = np.setdiff1d(np.arange(m), sup)
        K = sp.lil_matrix((m, len(keep) + kernel.shape[1]))
        for new, old in enumerate(keep):
            K[old, new] = 1.0
        K[sup, len(keep):] = kernel
        Z = (Z @ K.tocsr()).tocsr()
    return Z


def _trace_gram(cells, side, extent, nfun, ncomp, comp, p, q
                ) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for cell in _cells_on_side(cells, side, extent):
        se, te, we, span = _edge_points(cell, side, extent, p + 2)
        fld = CellField(cell, se, te, p, q)
        gram = (fld.N * (we * span)) @ fld.N.T
        ids = np.asarray(cell.active_ids) * ncomp + (comp or 0)
        _scatter(rows, cols, vals, ids, ids, gram)
    n = nfun * ncomp
    if not rows:
        return sp.csr_matrix((n, n))
    T = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    T.sum_duplicates()
    return T


def solve(system: LinearSystem) -> np.ndarray:
    """Full coefficient vector (constrained combinations folded back in)."""
    A, b = system.matrix, system.rhs
    if A.shape[0] == 0:
        return np.zeros(system.reduction.shape[0])
    if A.shape[0] < 20000:
        u = spla.spsolve(A.tocsc(), b)
    else:
        d = 1.0 / np.sqrt(A.diagonal())
        D = sp.diags(d)
        u, info = spla.cg(D @ A @ D, D @ b, rtol=1e-14, atol=0.0,
                          maxiter=20 * A.shape[0])
        if info != 0:
            raise AssemblyError(f"conjugate gradient failed (info={info})")
        u = d * u
    bnorm = np.linalg.norm(b)
    if bnorm > 0:
        rel = np.linalg.norm(A @ u - b) / bnorm
        if rel > 1e-8:
            raise AssemblyError(f"solver residual {rel:.2e} too large")
    return system.reduction @ u


# -- solution evaluation, error, estimator ------------------------------


def _phys_gradients(fld: CellField, inv: np.ndarray):
    gx = fld.Nu * inv[:, 0, 0] + fld.Nv * inv[:, 1, 0]
    gy = fld.Nu * inv[:, 0, 1] + fld.Nv * inv[:, 1, 1]
    return gx, gy


def h1_error(coeffs: np.ndarray, cells, geom: GeometryMap, exact,
             kind: str = "poisson", degree=(3, 3)) -> float:
    """Full H1 norm of (discrete - exact), (p+2)^2 Gauss points."""
    p, q = degree
    s, t, wq = _grid(p + 2)
    ncomp = 2 if kind == "elasticity" else 1
    total = 0.0
    for bt in _batches(cells, s, t, p, q, geom):
        w = wq[None, :] * bt.det * bt.area
        flat = bt.pts.reshape(-1, 2)
        ue = exact.value(flat)
        ge = exact.gradient(flat)
        for c in range(ncomp):
            cf = coeffs[bt.ids * ncomp + c] if ncomp == 2 else coeffs[bt.ids]
            uh = np.einsum('ga,gap->gp', cf, bt.N)
            dxh = np.einsum('ga,gap->gp', cf, bt.gx)
            dyh = np.einsum('ga,gap->gp', cf, bt.gy)
            uec = (ue[:, c] if ncomp == 2 else ue).reshape(bt.det.shape)
            gec = (ge[:, c] if ncomp == 2 else ge).reshape(
                bt.det.shape + (2,))
            e = uh - uec
            total += np.sum(w * (e * e + (dxh - gec[..., 0]) ** 2
                                 + (dyh - gec[..., 1]) ** 2))
    return float(np.sqrt(total))


def estimate(kind: str, coeffs: np.ndarray, cells, geom: GeometryMap,
             data: ProblemData, degree=(3, 3),
             diameters=None) -> np.ndarray:
    """Residual indicator per cell: volume residual plus edge terms on
    Neumann sides and on flagged sub-C1 geometry lines.  `diameters`
    overrides the per-cell h (e.g. with owning-element diameters when the
    cells subdivide mesh elements)."""
    p, q = degree
    extent = (float(geom.knots_u[-1]), float(geom.knots_v[-1]))
    s, t, wq = _grid(p + 1)
    C = _material_tensor(*data.material) if kind == "elasticity" else None
    eta2 = np.zeros(len(cells))
    locator = _CellLocator(cells)
    hq = _cell_diameters(cells, geom) if diameters is None \
        else np.asarray(diameters, dtype=float)
    for bt in _batches(cells, s, t, p, q, geom, second=True):
        w = wq[None, :] * bt.det * bt.area
        f = data.source(bt.pts.reshape(-1, 2))
        if kind == "poisson":
            cf = coeffs[bt.ids]
            H = _batch_hessian(cf, bt)
            res = H[..., 0, 0] + H[..., 1, 1] + f.reshape(bt.det.shape)
            eta2[bt.idxs] += hq[bt.idxs] ** 2 * np.sum(w * res * res, axis=1)
        else:
            f = f.reshape(bt.det.shape + (2,))
            Hx = _batch_hessian(coeffs[bt.ids * 2], bt)
            Hy = _batch_hessian(coeffs[bt.ids * 2 + 1], bt)
            # sigma = C @ (exx, eyy, gxy); divergence per component
            div_x = C[0, 0] * Hx[..., 0, 0] + C[0, 1] * Hy[..., 1, 0] + \
                C[2, 2] * (Hx[..., 1, 1] + Hy[..., 0, 1])
            div_y = C[1, 0] * Hx[..., 0, 1] + C[1, 1] * Hy[..., 1, 1] + \
                C[2, 2] * (Hx[..., 1, 0] + Hy[..., 0, 0])
            r2 = (div_x + f[..., 0]) ** 2 + (div_y + f[..., 1]) ** 2
            eta2[bt.idxs] += hq[bt.idxs] ** 2 * np.sum(w * r2, axis=1)
    for ic, cell in enumerate(cells):
        eta2[ic] += _edge_terms(kind, coeffs, cell, ic, cells, locator,
                                geom, data, extent, C, p, q)
    return np.sqrt(eta2)


def _batch_hessian(cf: np.ndarray, bt: _CellBatch) -> np.ndarray:
    """Physical Hessians (g, npts, 2, 2) of one solution component."""
    g, npts = bt.det.shape
    Hxi = np.empty((g, npts, 2, 2))
    Hxi[..., 0, 0] = np.einsum('ga,gap->gp', cf, bt.Nuu)
    Hxi[..., 0, 1] = Hxi[..., 1, 0] = np.einsum('ga,gap->gp', cf, bt.Nuv)
    Hxi[..., 1, 1] = np.einsum('ga,gap->gp', cf, bt.Nvv)
    gp = np.stack([np.einsum('ga,gap->gp', cf, bt.gx),
                   np.einsum('ga,gap->gp', cf, bt.gy)], axis=-1)
    M = Hxi - np.einsum('gpc,gpcij->gpij', gp, bt.geom_hess)
    return np.einsum('gpki,gpkl,gplj->gpij', bt.inv, M, bt.inv)


def _cell_diameters(cells, geom) -> np.ndarray:
    """Physical diameters estimated from mapped corners and the center."""
    if not cells:
        return np.zeros(0)
    b = np.array([c.box.float_bounds() for c in cells])
    U = np.stack([b[:, 0], b[:, 1], b[:, 0], b[:, 1],
                  (b[:, 0] + b[:, 1]) / 2], axis=1)
    V = np.stack([b[:, 2], b[:, 2], b[:, 3], b[:, 3],
                  (b[:, 2] + b[:, 3]) / 2], axis=1)
    pts, _ = geom.eval(U.ravel(), V.ravel(), jacobian=False)
    pts = pts.reshape(len(cells), 5, 2)
    d = pts[:, :, None, :] - pts[:, None, :, :]
    return np.sqrt((d * d).sum(-1)).max(axis=(1, 2))


class _CellLocator:
    def __init__(self, cells):
        self.bounds = np.array([c.box.float_bounds() for c in cells])
        self.cells = cells

    def find(self, u: float, v: float):
        b = self.bounds
        hit = np.nonzero((b[:, 0] <= u) & (b[:, 1] >= u) &
                         (b[:, 2] <= v) & (b[:, 3] >= v))[0]
        # prefer the smallest cell containing the point
        if len(hit) == 0:
            return None
        areas = (b[hit, 1] - b[hit, 0]) * (b[hit, 3] - b[hit, 2])
        return int(hit[np.argmin(areas)])


def _flux(kind, coeffs, cell, geom, u, v, normals, C, p, q):
    """Normal flux (Poisson) or traction (elasticity) at given points."""
    xlo, ylo, w, h = _cell_geometry(cell)
    # nudge into the open cell so one-sided geometry data is used on
    # lines where the map is only C0
    sref = np.clip((u - xlo) / w, 1e-9, 1 - 1e-9)
    tref = np.clip((v - ylo) / h, 1e-9, 1 - 1e-9)
    fld = CellField(cell, sref, tref, p, q)
    _, jac = geom.eval(fld.u, fld.v)
    inv = _inv2(jac)
    gx, gy = _phys_gradients(fld, inv)
    ids = np.asarray(cell.active_ids)
    if kind == "poisson":
        cf = coeffs[ids]
        return (cf @ gx) * normals[:, 0] + (cf @ gy) * normals[:, 1]
    cfx, cfy = coeffs[ids * 2], coeffs[ids * 2 + 1]
    exx = cfx @ gx
    eyy = cfy @ gy
    gxy = cfx @ gy + cfy @ gx
    sxx = C[0, 0] * exx + C[0, 1] * eyy
    syy = C[1, 0] * exx + C[1, 1] * eyy
    sxy = C[2, 2] * gxy
    tx = sxx * normals[:, 0] + sxy * normals[:, 1]
    ty = sxy * normals[:, 0] + syy * normals[:, 1]
    return np.stack([tx, ty], axis=1)


def _edge_terms(kind, coeffs, cell, ic, cells, locator, geom, data,
                extent, C, p, q) -> float:
    xlo, xhi, ylo, yhi = cell.box.float_bounds()
    total = 0.0
    xg, wg = gauss01(p + 2)
    edges = [("u", xlo, -1), ("u", xhi, +1), ("v", ylo, -1), ("v", yhi, +1)]
    for axis, val, sign in edges:
        if axis == "u":
            on_boundary = val in (0.0, extent[0])
            flagged = val in geom.c0_lines_u
            u = np.full_like(xg, val)
            v = ylo + (yhi - ylo) * xg
            span = yhi - ylo
            side = "u0" if val == 0.0 else ("u1" if val == extent[0] else None)
            ref = np.array([float(sign), 0.0])
        else:
            on_boundary = val in (0.0, extent[1])
            flagged = val in geom.c0_lines_v
            u = xlo + (xhi - xlo) * xg
            v = np.full_like(xg, val)
            span = xhi - xlo
            side = "v0" if val == 0.0 else ("v1" if val == extent[1] else None)
            ref = np.array([0.0, float(sign)])
        neumann = on_boundary and side in data.neumann
        if not (neumann or (flagged and not on_boundary)):
            continue
        _, jac = geom.eval(u, v)
        inv = _inv2(jac)
        nrm = np.einsum('nij,i->nj', inv, ref)
        nlen = np.linalg.norm(nrm, axis=1)
        nrm = nrm / nlen[:, None]
        tang = jac[:, :, 0 if axis == "v" else 1]
        ds = np.linalg.norm(tang, axis=1) * span
        he = float(ds @ wg)
        own = _flux(kind, coeffs, cell, geom, u, v, nrm, C, p, q)
        if neumann:
            pts, _ = geom.eval(u, v, jacobian=False)
            g = data.neumann[side](pts, nrm)
            r = g - own
        else:
            eps = 1e-7
            other_u = u + eps * ref[0]
            other_v = v + eps * ref[1]
            vals = own.copy()
            for k in range(len(u)):
                oc = locator.find(other_u[k], other_v[k])
                if oc is None or oc == ic:
                    continue
                ov = _flux(kind, coeffs, cells[oc], geom,
                           np.array([u[k]]), np.array([v[k]]),
                           nrm[k:k + 1], C, p, q)
                vals[k] = ov[0]
            r = 0.5 * (own - vals)
        if kind == "poisson":
            total += he * float((wg * ds) @ (r * r))
        else:
            total += he * float((wg * ds) @ (r * r).sum(axis=1))
    return total


# -- conditioning and sparsity -------------------------------------------


def condition_number(A: sp.spmatrix, dense_threshold: int = 6000) -> float:
    n = A.shape[0]
    if n == 0:
        raise AssemblyError("empty matrix has no condition number")
    if n <= dense_threshold:
        w = np.linalg.eigvalsh(A.toarray())
        if w[0] <= 0:
            raise AssemblyError("matrix not positive definite")
        return float(w[-1] / w[0])
    amax = spla.eigsh(A, k=1, which="LA", return_eigenvectors=False,
                      tol=1e-3)[0]
    amin = spla.eigsh(A, k=1, sigma=0, which="LM",
                      return_eigenvectors=False, tol=1e-3)[0]
    if amin <= 0:
        raise AssemblyError("matrix not positive definite")
    return float(amax / amin)


def sparsity_stats(A: sp.spmatrix) -> dict:
    A = A.tocsr()
    A.eliminate_zeros()
    row_counts = np.diff(A.indptr)
    coo = A.tocoo()
    bandwidth = int(np.abs(coo.row - coo.col).max()) if coo.nnz else 0
    return {"nnz": int(A.nnz),
            "max_row_nnz": int(row_counts.max()) if A.shape[0] else 0,
            "bandwidth": bandwidth}


def export_matrix(A: sp.spmatrix, path: str) -> None:
    scipy.io.mmwrite(path, sp.coo_matrix(A), symmetry="symmetric")
