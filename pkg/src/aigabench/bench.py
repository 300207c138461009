"""Benchmark problems: geometry patches, exact solutions, boundary data.

All patches are defined on the index domain [0,M] x [0,N] so that the
spline meshes refine them directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assembly import GeometryMap, ProblemData, identity_geometry

SIGMA0 = 1.0
E_MOD = 1.0e5
NU = 0.3


class CornerSingular:
    """u = r^alpha * sin(alpha * (phi - phi0)), harmonic away from the
    origin, with the polar angle measured in [0, 2*pi) so that the
    positive x-axis carries phi = 0 (where the function vanishes for
    phi0 = 0)."""

    def __init__(self, alpha: float, phi0: float):
        self.alpha = alpha
        self.phi0 = phi0

    def _polar(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        r = np.hypot(x, y)
        phi = np.arctan2(y, x)
        phi = np.where(phi < 0, phi + 2 * np.pi, phi)
        return r, phi

    def value(self, pts):
        r, phi = self._polar(pts)
        a = self.alpha
        return r ** a * np.sin(a * (phi - self.phi0))

    def gradient(self, pts):
        r, phi = self._polar(pts)
        a = self.alpha
        psi = a * (phi - self.phi0)
        rad = a * r ** (a - 1)
        ux = rad * (np.sin(psi) * np.cos(phi) - np.cos(psi) * np.sin(phi))
        uy = rad * (np.sin(psi) * np.sin(phi) + np.cos(psi) * np.cos(phi))
        return np.stack([ux, uy], axis=1)


class PlateHoleExact:
    """Infinite plate with a circular hole (radius 1) under uniaxial
    tension SIGMA0 along x; plane stress."""

    def __init__(self, E=E_MOD, nu=NU, sigma0=SIGMA0):
        self.E, self.nu, self.sigma0 = E, nu, sigma0
        self.G = E / (2 * (1 + nu))
        self.kappa = (3 - nu) / (1 + nu)

    def value(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        r = np.hypot(x, y)
        phi = np.arctan2(y, x)
        s0, G, k = self.sigma0, self.G, self.kappa
        ir = 1.0 / r
        ux = s0 / (8 * G) * (r * (k + 1) * np.cos(phi)
                             + 2 * ir * ((1 + k) * np.cos(phi)
                                         + np.cos(3 * phi))
                             - 2 * ir ** 3 * np.cos(3 * phi))
        uy = s0 / (8 * G) * (r * (k - 3) * np.sin(phi)
                             + 2 * ir * ((1 - k) * np.sin(phi)
                                         + np.sin(3 * phi))
                             - 2 * ir ** 3 * np.sin(3 * phi))
        return np.stack([ux, uy], axis=1)

    def gradient(self, pts, step: float = 1e-6):
        out = np.empty((len(pts), 2, 2))
        for d in range(2):
            dp = np.zeros(2)
            dp[d] = step
            out[:, :, d] = (self.value(pts + dp) - self.value(pts - dp)) \
                / (2 * step)
        return out

    def stress(self, pts):
        """Cartesian stresses (n, 3) in Voigt order (xx, yy, xy)."""
        x, y = pts[:, 0], pts[:, 1]
        r = np.hypot(x, y)
        phi = np.arctan2(y, x)
        s0 = self.sigma0
        q = 1.0 / r ** 2
        sr = s0 / 2 * (1 - q + (1 - 4 * q + 3 * q * q) * np.cos(2 * phi))
        sp = s0 / 2 * (1 + q - (1 + 3 * q * q) * np.cos(2 * phi))
        srp = s0 / 2 * (-1 - 2 * q + 3 * q * q) * np.sin(2 * phi)
        c, s = np.cos(phi), np.sin(phi)
        sxx = sr * c * c + sp * s * s - 2 * srp * s * c
        syy = sr * s * s + sp * c * c + 2 * srp * s * c
        sxy = (sr - sp) * s * c + srp * (c * c - s * s)
        return np.stack([sxx, syy, sxy], axis=1)

    def traction(self, pts, normals):
        s = self.stress(pts)
        tx = s[:, 0] * normals[:, 0] + s[:, 2] * normals[:, 1]
        ty = s[:, 2] * normals[:, 0] + s[:, 1] * normals[:, 1]
        return np.stack([tx, ty], axis=1)


def _interp_curve(deg: int, knots: list, fn) -> np.ndarray:
    """Control points reproducing a curve that lies in the spline space,
    by collocation at the Greville abscissae."""
    from .bspline import bspline_eval, greville_points
    kn = np.asarray(knots, dtype=float)
    n = len(kn) - deg - 1
    grev = greville_points(kn, deg)
    B = np.stack([bspline_eval(kn[i:i + deg + 2], grev)
                  for i in range(n)], axis=1)
    ctrl = np.linalg.solve(B, fn(grev))
    check = np.linspace(kn[0], kn[-1], 257)
    Bc = np.stack([bspline_eval(kn[i:i + deg + 2], check)
                   for i in range(n)], axis=1)
    resid = np.abs(Bc @ ctrl - fn(check)).max()
    if resid > 1e-10:
        raise ValueError(f"curve not reproduced exactly ({resid:.2e})")
    return ctrl


def _interp_surface(deg, M, N, fn):
    """Control net of a tensor-product patch on [0,M] x [0,N]
    reproducing a map that lies in the (polynomial) spline space, by
    collocation at the tensor Greville abscissae."""
    from .bspline import bspline_eval, greville_points
    ku = np.array([0.0] * (deg + 1) + [float(M)] * (deg + 1))
    kv = np.array([0.0] * (deg + 1) + [float(N)] * (deg + 1))
    gu = greville_points(ku, deg)
    gv = greville_points(kv, deg)
    Bu = np.stack([bspline_eval(ku[i:i + deg + 2], gu)
                   for i in range(deg + 1)], axis=1)
    Bv = np.stack([bspline_eval(kv[i:i + deg + 2], gv)
                   for i in range(deg + 1)], axis=1)
    U, V = np.meshgrid(gu, gv, indexing="ij")
    vals = fn(U.ravel(), V.ravel()).reshape(len(gu), len(gv), 2)
    ctrl = np.einsum("ia,jb,abk->ijk", np.linalg.inv(Bu),
                     np.linalg.inv(Bv), vals)
    # verify exact reproduction on a fine grid
    cu = np.linspace(0, M, 65)
    cv = np.linspace(0, N, 65)
    Bcu = np.stack([bspline_eval(ku[i:i + deg + 2], cu)
                    for i in range(deg + 1)], axis=1)
    Bcv = np.stack([bspline_eval(kv[i:i + deg + 2], cv)
                    for i in range(deg + 1)], axis=1)
    Uc, Vc = np.meshgrid(cu, cv, indexing="ij")
    ref = fn(Uc.ravel(), Vc.ravel()).reshape(len(cu), len(cv), 2)
    resid = np.abs(np.einsum("ia,jb,abk->ijk", Bcu, Bcv, ctrl)
                   - ref).max()
    if resid > 1e-10:
        raise ValueError(f"surface not reproduced exactly ({resid:.2e})")
    return ku, kv, ctrl


def lshape_geometry() -> GeometryMap:
    """Smooth, everywhere non-degenerate biquadratic patch for the
    re-entrant-corner (opening 3*pi/2) regularity class.

    The bottom edge v=0 lies on the positive x-axis with the singular
    point of the exact solution at the origin (the parametric corner
    (0,0)); the other edges bulge outward so the Jacobian is genuinely
    non-constant."""

    def fn(u, v):
        s, t = u / 4.0, v / 4.0
        x = s * (1 + 0.25 * t * t)
        y = t * (1 + 0.2 * s * s - 0.1 * s * t)
        return np.stack([x, y], axis=-1)

    ku, kv, ctrl = _interp_surface(2, 4, 4, fn)
    return GeometryMap(2, 2, ku, kv, ctrl, np.ones(ctrl.shape[:2]))


def slit_geometry() -> GeometryMap:
    """Smooth, everywhere non-degenerate biquadratic patch for the
    slit (opening 2*pi) regularity class.

    Same construction as the companion corner patch with a different
    deformation; the singular point of the exact solution sits at the
    origin, the parametric corner (0,0)."""

    def fn(u, v):
        s, t = u / 8.0, v / 8.0
        x = s * (1 + 0.3 * t * t - 0.1 * t)
        y = t * (1 + 0.25 * s * s)
        return np.stack([x, y], axis=-1)

    ku, kv, ctrl = _interp_surface(2, 8, 8, fn)
    return GeometryMap(2, 2, ku, kv, ctrl, np.ones(ctrl.shape[:2]))


def plate_geometry() -> GeometryMap:
    """Quarter annulus 1 <= r <= 8 in the first quadrant, exact NURBS;
    u runs from the y-axis (u=0) to the x-axis (u=M)."""
    w = math.sqrt(2) / 2
    arc = np.array([[0, 1], [1, 1], [1, 0]], dtype=float)
    ctrl = np.stack([arc, 8 * arc], axis=1)       # (3, 2, 2)
    weights = np.array([[1, 1], [w, w], [1, 1]])
    return GeometryMap(2, 1, [0, 0, 0, 4, 4, 4], [0, 0, 4, 4],
                       ctrl, weights)


def _flux_closure(exact):
    def g(pts, normals):
        return np.sum(exact.gradient(pts) * normals, axis=1)
    return g


@dataclass
class Benchmark:
    name: str
    kind: str                 # 'poisson' | 'elasticity' | 'matrix_only'
    geometry: GeometryMap
    M: int
    N: int
    data: ProblemData
    exact: object             # None for matrix_only
    rate_uniform: float       # expected H1 rate w.r.t. DOF
    rate_adaptive: float


def _zero_scalar(pts):
    return np.zeros(len(pts))


def _zero_vector(pts):
    return np.zeros((len(pts), 2))


def build_problem(name: str) -> Benchmark:
    if name == "worst_case":
        # constrain only the two sides away from the refined corner so the
        # coarse-with-fine couplings near the corner stay in the matrix
        data = ProblemData("poisson", _zero_scalar,
                           dirichlet=[("u1", None), ("v1", None)])
        return Benchmark(name, "matrix_only", identity_geometry(8, 8),
                         8, 8, data, None, float("nan"), float("nan"))
    if name == "lshape":
        exact = CornerSingular(2.0 / 3.0, 0.0)
        g = _flux_closure(exact)
        data = ProblemData("poisson", _zero_scalar,
                           neumann={"u0": g, "u1": g, "v1": g},
                           dirichlet=[("v0", None)])
        return Benchmark(name, "poisson", lshape_geometry(), 4, 4,
                         data, exact, 1 / 3, 1.5)
    if name == "slit":
        exact = CornerSingular(0.5, 0.0)
        g = _flux_closure(exact)
        data = ProblemData("poisson", _zero_scalar,
                           neumann={"u0": g, "u1": g, "v1": g},
                           dirichlet=[("v0", None)])
        return Benchmark(name, "poisson", slit_geometry(), 8, 8,
                         data, exact, 0.25, 1.5)
    if name == "plate_hole":
        exact = PlateHoleExact()
        data = ProblemData("elasticity", _zero_vector,
                           neumann={"v0": exact.traction,
                                    "v1": exact.traction},
                           dirichlet=[("u0", 0), ("u1", 1)],
                           material=(E_MOD, NU))
        return Benchmark(name, "elasticity", plate_geometry(), 4, 4,
                         data, exact, 1.5, 1.5)
    raise ValueError(f"unknown benchmark {name!r}")


BENCHMARKS = ("worst_case", "lshape", "slit", "plate_hole")
