"""Sound-soft exterior Helmholtz solver (Burton-Miller, piecewise-constant Galerkin).

With ``Phi(x, y) = exp(ik|x-y|) / (4 pi |x-y|)`` and ``nu`` the normal pointing
out of the obstacle, the normal derivative ``v = du/dnu`` of the total field
satisfies

    v/2 + K'v - i eta S v = du^i/dnu - i eta u^i   on Gamma,

which is the usual combined equation written with un-doubled operators.  The
coupling parameter defaults to ``eta = k``.  Given ``v``,

    u^s(x)      = -int Phi(x, y) v(y) ds(y),
    u_inf(xhat) = -1/(4 pi) int exp(-ik xhat.y) v(y) ds(y).

The Galerkin matrix is stored in the L2-normalized basis ``1_T / sqrt(|T|)``,
so face-area disparities of marching-cubes meshes do not degrade GMRES.

Integration
-----------
Distances are centroid distances in units of the larger face size.

* far pairs (>= 3): 3-point rule on both faces;
* medium pairs (1.5 to 3): 6-point rule on both faces;
* near and self pairs (< 1.5): singularity subtraction.  The static part
  ``1 / (4 pi r)`` and its gradient are integrated in closed form over the
  source triangle and with a 24-point subdivided rule over the test
  triangle; the bounded remainder with 6-point rules on both.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import gmres
from scipy.spatial import cKDTree

from . import _kernels
from .errors import DegenerateMesh, NoConvergence
from .geometry import ORDER2_RULE, ORDER4_RULE, TriangleMesh, graded_rule, quadrature_points, subdivided_rule

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
NEAR_FACTOR = 1.5
MEDIUM_FACTOR = 3.0
OUTER_NEAR_RULE = subdivided_rule(ORDER4_RULE, 1)
# faces sharing a vertex: the closed-form part has edge singularities in its derivatives
OUTER_TOUCH_RULE = graded_rule(5)


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class IncidentWave:
    """Superposition ``sum_p c_p exp(ik d_p . x)`` of plane waves."""

    k: float
    directions: np.ndarray
    coefficients: np.ndarray
    kind: str = "plane"

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=float))
        c = np.atleast_1d(np.asarray(self.coefficients, dtype=complex))
        if not self.k > 0:
            raise ValueError("wavenumber must be positive")
        if d.shape[1] != 3 or len(d) != len(c):
            raise ValueError("directions and coefficients must have matching lengths")
        if not np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-10):
            raise ValueError("incident directions must be unit vectors")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def plane(cls, k: float, d) -> "IncidentWave":
        return cls(k, np.asarray(d, dtype=float)[None, :], np.ones(1), "plane")

    @classmethod
    def superposition(cls, k: float, coefficients, directions) -> "IncidentWave":
        return cls(k, directions, coefficients, "adjoint")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.exp(1j * self.k * (x @ self.directions.T)) @ self.coefficients

    def normal_derivative(self, x: np.ndarray, normals: np.ndarray) -> np.ndarray:
        phase = np.exp(1j * self.k * (x @ self.directions.T))
        return (1j * self.k * (normals @ self.directions.T) * phase) @ self.coefficients


@dataclass(frozen=True, eq=False)
class SurfaceDensity:
    """Piecewise-constant density on ``mesh`` (one complex value per face)."""

    mesh: TriangleMesh
    values: np.ndarray
    residual: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != (self.mesh.n_faces,):
            raise ValueError("density length must equal face count")
        object.__setattr__(self, "values", vals)

    def to_csv(self, path) -> None:
        rows = ["face,re,im"] + [f"{i},{float(v.real)!r},{float(v.imag)!r}" for i, v in enumerate(self.values)]
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


@dataclass(frozen=True, eq=False)
class BemSystem:
    """Assembled combined-field operator in the normalized basis."""

    mesh: TriangleMesh
    k: float
    eta: float
    matrix: np.ndarray = field(repr=False)
    scale: np.ndarray = field(repr=False)  # sqrt(face areas)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def rhs(self, incident: IncidentWave) -> np.ndarray:
        """Normalized right-hand side ``<du^i/dnu - i eta u^i, phi_i>``."""
        pts, wts = quadrature_points(self.mesh, ORDER4_RULE)
        flat = pts.reshape(-1, 3)
        normals = np.repeat(self.mesh.normals, pts.shape[1], axis=0)
        g = incident.normal_derivative(flat, normals) - 1j * self.eta * incident(flat)
        return (g.reshape(wts.shape) * wts).sum(axis=1) / self.scale


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------
def _remainder_kernels(k, diff, nx):
    """Bounded remainders ``Phi - 1/(4 pi r)`` and its ``nu_x`` derivative."""
    r = np.sqrt(np.einsum("...d,...d->...", diff, diff))
    s = 1j * k * r
    small = np.abs(s) < 1e-3
    r_safe = np.where(small, 1.0, r)
    s_safe = np.where(small, 1.0, s)
    em1 = np.expm1(s_safe)
    g = np.where(small, 1j * k * (1 + s / 2 + s * s / 6), em1 / r_safe) / FOUR_PI
    dg_big = (s_safe * (em1 + 1.0) - em1) / r_safe**2
    dg_small = (1j * k) ** 2 * (0.5 + s / 3 + s * s / 8 + s**3 / 30)
    dg = np.where(small, dg_small, dg_big) / FOUR_PI
    with np.errstate(invalid="ignore", divide="ignore"):
        cosine = np.where(r > 0, np.einsum("...d,...d->...", nx, diff) / np.where(r > 0, r, 1.0), 0.0)
    return g, cosine * dg


def triangle_potential(x: np.ndarray, tri: np.ndarray, normal: np.ndarray):
    """Closed-form ``int_T 1/|x-y| dy`` and its gradient in ``x``.

    Parameters
    ----------
    x : (P, 3) observation points
    tri : (P, 3, 3) triangle corners, counter-clockwise about ``normal``
    normal : (P, 3) unit normals

    Returns
    -------
    value : (P,)
    grad : (P, 3)
    """
    d = np.einsum("pd,pd->p", x - tri[:, 0], normal)
    # in-plane points take the principal value (zero normal gradient)
    size = np.linalg.norm(tri[:, 1] - tri[:, 0], axis=1)
    d = np.where(np.abs(d) < 1e-10 * size, 0.0, d)
    ad = np.abs(d)
    rho = x - d[:, None] * normal
    value = np.zeros(len(x))
    grad = np.zeros_like(x)
    solid = np.zeros(len(x))
    for e in range(3):
        a = tri[:, e]
        b = tri[:, (e + 1) % 3]
        edge = b - a
        length = np.linalg.norm(edge, axis=1)
        lhat = edge / length[:, None]
        uhat = np.cross(lhat, normal)
        l_plus = np.einsum("pd,pd->p", b - rho, lhat)
        l_minus = np.einsum("pd,pd->p", a - rho, lhat)
        p0 = np.einsum("pd,pd->p", a - rho, uhat)
        r0_sq = p0 * p0 + d * d
        r_plus = np.linalg.norm(x - b, axis=1)
        r_minus = np.linalg.norm(x - a, axis=1)
        # pick the cancellation-free form of log((R+ + l+)/(R- + l-))
        fwd = (l_plus + l_minus) >= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            log_fwd = np.log((r_plus + l_plus) / (r_minus + l_minus))
            log_bwd = np.log((r_minus - l_minus) / (r_plus - l_plus))
        f = np.where(fwd, log_fwd, log_bwd)
        on_line = r0_sq <= (1e-14 * length) ** 2
        f = np.where(on_line & ~np.isfinite(f), 0.0, f)
        beta = np.arctan2(p0 * l_plus, r0_sq + ad * r_plus) - np.arctan2(p0 * l_minus, r0_sq + ad * r_minus)
        value += p0 * f - ad * beta
        grad -= uhat * f[:, None]
        solid += beta
    grad -= normal * (np.sign(d) * solid)[:, None]
    return value, grad


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------
def _pair_lists(mesh: TriangleMesh):
    """Return (near, medium) index-pair arrays classified by centroid distance.

    Distances are measured in units of the larger of the two face sizes,
    where a face size is its longest edge but at least the mean edge length.
    """
    c = mesh.centroids
    size = np.maximum(mesh.diameters, mesh.mean_edge_length)
    tree = cKDTree(c)
    radius = MEDIUM_FACTOR * float(size.max())
    pairs = tree.query_pairs(radius, output_type="ndarray").reshape(-1, 2)
    diag = np.repeat(np.arange(mesh.n_faces)[:, None], 2, axis=1)
    pairs = np.concatenate([pairs, pairs[:, ::-1], diag])
    dist = np.linalg.norm(c[pairs[:, 0]] - c[pairs[:, 1]], axis=1)
    scale = np.maximum(size[pairs[:, 0]], size[pairs[:, 1]])
    near = pairs[dist < NEAR_FACTOR * scale]
    medium = pairs[(dist >= NEAR_FACTOR * scale) & (dist < MEDIUM_FACTOR * scale)]
    return near, medium


def _touching(mesh: TriangleMesh, pairs: np.ndarray) -> np.ndarray:
    """True where the two faces share at least one vertex."""
    a = mesh.faces[pairs[:, 0]]
    b = mesh.faces[pairs[:, 1]]
    return (a[:, :, None] == b[:, None, :]).any(axis=(1, 2))


def assemble_operator(mesh: TriangleMesh, k: float, c_s: complex, c_k: complex) -> np.ndarray:
    """Galerkin matrix of ``c_k K' + c_s S`` in the indicator basis."""
    n = mesh.n_faces
    out = np.empty((n, n), dtype=complex)
    pts, wts = quadrature_points(mesh, ORDER2_RULE)
    normals = np.ascontiguousarray(mesh.normals)
    _kernels.far_block(pts, wts, normals, k, c_s, c_k, out)

    near, medium = _pair_lists(mesh)
    pts4, wts4 = quadrature_points(mesh, ORDER4_RULE)
    if len(medium):
        out[medium[:, 0], medium[:, 1]] = _kernels.pair_entries(
            medium[:, 0], medium[:, 1], pts4, wts4, normals, k, c_s, c_k)
    corners = np.ascontiguousarray(mesh.corners)
    touch = _touching(mesh, near)
    for sel, rule in ((touch, OUTER_TOUCH_RULE), (~touch, OUTER_NEAR_RULE)):
        rows, cols = near[sel, 0], near[sel, 1]
        if not len(rows):
            continue
        outer_pts, outer_wts = quadrature_points(mesh, rule)
        out[rows, cols] = _kernels.near_entries(
            rows, cols, corners, normals, outer_pts, outer_wts, pts4, wts4, k, c_s, c_k)
    logger.debug("assembled %d x %d operator (near pairs %d, touching %d, medium pairs %d)",
                 n, n, len(near), int(touch.sum()), len(medium))
    return out


def assemble(mesh: TriangleMesh, k: float, eta: float | None = None) -> BemSystem:
    """Assemble the Galerkin matrix of ``I/2 + K' - i eta S``.

    Parameters
    ----------
    mesh : TriangleMesh
        Closed, outward-oriented surface.
    k : float
        Wavenumber.
    eta : float, optional
        Coupling parameter, defaults to ``k``.
    """
    if not k > 0:
        raise ValueError("wavenumber must be positive")
    if mesh.n_faces == 0 or np.any(mesh.areas <= 0) or not np.all(np.isfinite(mesh.vertices)):
        raise DegenerateMesh("mesh has empty or zero-area faces")
    eta = float(k if eta is None else eta)
    a = assemble_operator(mesh, float(k), -1j * eta, 1.0 + 0j)
    a[np.diag_indices(mesh.n_faces)] += 0.5 * mesh.areas
    scale = np.sqrt(mesh.areas)
    a /= scale[:, None]
    a /= scale[None, :]
    if not np.all(np.isfinite(a)):
        raise DegenerateMesh("assembled matrix is not finite")
    return BemSystem(mesh, float(k), eta, a, scale)


def single_layer_matrix(mesh: TriangleMesh, k: float) -> np.ndarray:
    """Galerkin matrix of ``S`` in the indicator basis."""
    return assemble_operator(mesh, float(k), 1.0 + 0j, 0j)


# ---------------------------------------------------------------------------
# Solve and post-process
# ---------------------------------------------------------------------------
def solve_density(system: BemSystem, incident: IncidentWave, tol: float = 1e-5,
                  max_iters: int = 500) -> SurfaceDensity:
    """Solve for ``v = du/dnu`` with unrestarted GMRES.

    Raises
    ------
    NoConvergence
        If the relative residual in the normalized basis exceeds ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if abs(incident.k - system.k) > 1e-12 * system.k:
        raise ValueError("incident wavenumber differs from the assembled one")
    b = system.rhs(incident)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SurfaceDensity(system.mesh, np.zeros(system.size, dtype=complex))
    count = [0]

    def _tick(_):
        count[0] += 1

    restart = min(max_iters, system.size)
    x, _ = gmres(system.matrix, b, rtol=tol, atol=0.0, restart=restart, maxiter=1,
                 callback=_tick, callback_type="pr_norm")
    residual = float(np.linalg.norm(system.matrix @ x - b) / bnorm)
    if residual > tol:
        raise NoConvergence(max_iters, residual)
    return SurfaceDensity(system.mesh, x / system.scale, residual, count[0])


def far_field(mesh: TriangleMesh, density: SurfaceDensity, k: float, directions) -> np.ndarray:
    """Far-field pattern ``u_inf(xhat)`` for every row of ``directions``."""
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    pts, wts = quadrature_points(mesh, ORDER4_RULE)
    phase = np.exp(-1j * k * np.einsum("fqd,md->fqm", pts, directions))
    weighted = wts * density.values[:, None]
    return -np.einsum("fq,fqm->m", weighted, phase) / FOUR_PI


def scattered_field_at(mesh: TriangleMesh, density: SurfaceDensity, k: float, points) -> np.ndarray:
    """Scattered field ``u^s = -S v`` at exterior points.

    Faces closer than three diameters to a point are integrated with the
    closed-form static part plus a regular remainder.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    pts, wts = quadrature_points(mesh, ORDER4_RULE)
    out = np.empty(len(points), dtype=complex)
    v = density.values
    tree = cKDTree(mesh.centroids)
    near_radius = 3.0 * float(mesh.diameters.max())
    for i, x in enumerate(points):
        diff = x - pts
        r = np.linalg.norm(diff, axis=2)
        kernel = np.exp(1j * k * r) / (FOUR_PI * r)
        contrib = (wts * kernel).sum(axis=1)
        near = np.asarray(tree.query_ball_point(x, near_radius), dtype=int)
        if near.size:
            xs = np.repeat(x[None, :], len(near), axis=0)
            value, _ = triangle_potential(xs, mesh.corners[near], mesh.normals[near])
            g, _ = _remainder_kernels(k, x - pts[near], mesh.normals[near][:, None, :])
            contrib[near] = value / FOUR_PI + (wts[near] * g).sum(axis=1)
        out[i] = -(contrib * v).sum()
    return out
