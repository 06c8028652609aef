"""Triangle surface meshes, marching-cubes extraction and surface quadrature.

Sign convention throughout: a scalar field is negative inside the obstacle and
positive outside, and face normals point out of the obstacle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from skimage import measure

from .errors import DegenerateMesh, NoSurface, OpenSurface

logger = logging.getLogger(__name__)

DEGENERATE_AREA_FACTOR = 1e-12


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GridSpec:
    """Cartesian lattice of spacing ``h`` centered in the box ``[lower, upper]``."""

    lower: tuple = (-1.0, -1.0, -1.0)
    upper: tuple = (1.0, 1.0, 1.0)
    h: float = 0.06

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("grid corners must be 3-vectors")
        if not np.all(hi > lo):
            raise ValueError("grid upper corner must exceed lower corner componentwise")
        if not self.h > 0:
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))
        object.__setattr__(self, "h", float(self.h))

    @property
    def shape(self) -> tuple:
        extent = np.asarray(self.upper) - np.asarray(self.lower)
        return tuple(int(n) for n in np.floor(extent / self.h + 1e-9).astype(int) + 1)

    def axes(self) -> list:
        """Node coordinates per axis, centered inside the box."""
        out = []
        for lo, hi, n in zip(self.lower, self.upper, self.shape):
            offset = 0.5 * ((hi - lo) - (n - 1) * self.h)
            out.append(lo + offset + self.h * np.arange(n))
        return out

    def points(self) -> np.ndarray:
        """All grid nodes as an ``(N, 3)`` array in C order of the index triple."""
        xs, ys, zs = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.lower, self.upper, self.h / factor)


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable triangulated surface with a per-face geometry cache.

    Attributes
    ----------
    vertices : np.ndarray, shape (V, 3)
    faces : np.ndarray, shape (F, 3)
        Vertex indices, counter-clockwise when seen from outside.
    """

    vertices: np.ndarray
    faces: np.ndarray = field(repr=False)

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise DegenerateMesh("face index out of range")
        verts.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    def __repr__(self):
        return f"TriangleMesh(n_vertices={len(self.vertices)}, n_faces={len(self.faces)})"

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def corners(self) -> np.ndarray:
        """Face corner coordinates, shape ``(F, 3, 3)``."""
        return self.vertices[self.faces]

    @cached_property
    def _cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def normals(self) -> np.ndarray:
        norm = np.linalg.norm(self._cross, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return self._cross / norm

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        """Longest edge of every face."""
        c = self.corners
        edges = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1], c[:, 0] - c[:, 2]], axis=1)
        return np.linalg.norm(edges, axis=2).max(axis=1)

    @cached_property
    def mean_edge_length(self) -> float:
        c = self.corners
        edges = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1], c[:, 0] - c[:, 2]], axis=1)
        return float(np.linalg.norm(edges, axis=2).mean())

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    def boundary_edge_count(self) -> int:
        """Number of directed edges without a matching opposite edge.

        Zero for a closed, consistently oriented two-manifold.
        """
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        n = max(len(self.vertices), 1)
        fwd = directed[:, 0] * n + directed[:, 1]
        rev = directed[:, 1] * n + directed[:, 0]
        uniq, counts = np.unique(fwd, return_counts=True)
        unmatched = np.count_nonzero(~np.isin(rev, fwd))
        # an edge used twice in the same direction breaks orientability
        return int(unmatched + np.sum(counts[counts > 1]))

    def is_closed(self) -> bool:
        return self.n_faces > 0 and self.boundary_edge_count() == 0

    def check(self, min_area: float = 0.0) -> None:
        """Raise :class:`DegenerateMesh` unless the mesh is a valid closed surface."""
        if self.n_faces == 0:
            raise DegenerateMesh("mesh has no faces")
        if np.any(self.areas <= min_area):
            raise DegenerateMesh(f"{np.count_nonzero(self.areas <= min_area)} faces with non-positive area")
        if not self.is_closed():
            raise DegenerateMesh(f"mesh is not closed ({self.boundary_edge_count()} boundary edges)")
        if mesh_volume(self) <= 0:
            raise DegenerateMesh("mesh normals point inward")

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces[:, ::-1])

    def translated(self, t) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(t, dtype=float), self.faces)

    def write_obj(self, path) -> None:
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in self.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces.tolist()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_obj(cls, path) -> "TriangleMesh":
        verts, faces = [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                # accept "f 1/1/1 2/2/2 3/3/3" style records as well
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        return cls(np.array(verts), np.array(faces))


def mesh_volume(mesh: TriangleMesh) -> float:
    """Signed enclosed volume via the divergence theorem (positive if outward)."""
    c = mesh.corners
    return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Rule on the reference triangle; weights are normalized to sum to one."""

    points: np.ndarray  # barycentric, shape (n, 3)
    weights: np.ndarray
    order: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)


def _symmetric_rule(groups, order) -> QuadratureRule:
    pts, wts = [], []
    for kind, a, w in groups:
        if kind == 1:
            pts.append((1 / 3, 1 / 3, 1 / 3))
            wts.append(w)
        else:
            b = 1.0 - 2.0 * a
            for p in ((a, a, b), (a, b, a), (b, a, a)):
                pts.append(p)
                wts.append(w)
    return QuadratureRule(np.array(pts), np.array(wts), order)


CENTROID_RULE = _symmetric_rule([(1, None, 1.0)], order=1)
# Strang-Fix 3-point rule, exact for quadratics
ORDER2_RULE = _symmetric_rule([(3, 1 / 6, 1 / 3)], order=2)
# Dunavant rules
ORDER4_RULE = _symmetric_rule(
    [
        (3, 0.445948490915964886318329253883, 0.223381589678011465944827190802),
        (3, 0.091576213509770743459571463402, 0.109951743655321867388506142531),
    ],
    order=4,
)
ORDER5_RULE = _symmetric_rule(
    [
        (1, None, 0.225),
        (3, 0.470142064105115089770441209513, 0.132394152788506181085375270393),
        (3, 0.101286507323456338800987361915, 0.125939180544827152595683945501),
    ],
    order=5,
)


def collapsed_gauss_rule(n: int) -> QuadratureRule:
    """Gauss-Legendre tensor rule mapped onto the triangle by the Duffy collapse.

    Exact for polynomials of total degree ``2n - 2``.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (x + 1.0)
    wt = 0.5 * w
    u, v = np.meshgrid(t, t, indexing="ij")
    wu, wv = np.meshgrid(wt, wt, indexing="ij")
    l1 = u.ravel()
    l2 = ((1.0 - u) * v).ravel()
    weights = (wu * wv * (1.0 - u)).ravel() * 2.0
    pts = np.stack([1.0 - l1 - l2, l1, l2], axis=1)
    return QuadratureRule(pts, weights, 2 * n - 2)


def subdivided_rule(rule: QuadratureRule, levels: int = 1) -> QuadratureRule:
    """Apply ``rule`` on the 4**levels congruent sub-triangles of the reference triangle."""
    pts, wts = rule.points, rule.weights
    for _ in range(levels):
        # corners of the four children in barycentric coordinates
        e = np.eye(3)
        m01, m12, m20 = (e[0] + e[1]) / 2, (e[1] + e[2]) / 2, (e[2] + e[0]) / 2
        children = [(e[0], m01, m20), (m01, e[1], m12), (m20, m12, e[2]), (m12, m20, m01)]
        new_pts = [pts @ np.array(ch) for ch in children]
        pts = np.concatenate(new_pts)
        wts = np.concatenate([wts / 4.0] * 4)
    return QuadratureRule(pts, wts, rule.order)


def graded_rule(n: int, power: int = 3) -> QuadratureRule:
    """Rule clustered toward the edges and corners of the reference triangle.

    The triangle is split into six pieces (centroid, corner, edge midpoint) and
    each piece carries an ``n x n`` Gauss rule under the map ``1 - (1 - s)^power``
    toward the edge and ``s^power`` toward the corner.  Suited to integrands
    whose derivatives blow up on the boundary, such as closed-form potentials
    of a neighbouring face.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    eta = 0.5 * (x + 1.0)
    weta = 0.5 * w
    jac = power * eta ** (power - 1)
    u = 1.0 - eta**power
    t = eta**power
    uu, tt = np.meshgrid(u, t, indexing="ij")
    ww = np.outer(weta * jac, weta * jac)
    c = np.full(3, 1 / 3)
    e = np.eye(3)
    pts, wts = [], []
    for a in range(3):
        for b in ((a + 1) % 3, (a + 2) % 3):
            mid = 0.5 * (e[a] + e[b])
            p = c + uu[..., None] * ((1 - tt)[..., None] * e[a] + tt[..., None] * mid - c)
            pts.append(p.reshape(-1, 3))
            # piece area is 1/6 of the triangle, radial Jacobian is u
            wts.append((2.0 / 6.0 * uu * ww).ravel())
    return QuadratureRule(np.concatenate(pts), np.concatenate(wts), 0)


def quadrature_points(mesh: TriangleMesh, rule: QuadratureRule = ORDER2_RULE):
    """Physical quadrature nodes and weights on every face.

    Returns
    -------
    points : np.ndarray, shape (F, n, 3)
    weights : np.ndarray, shape (F, n)
        Weights on each face sum to the face area.
    """
    points = np.einsum("qk,fkd->fqd", rule.points, mesh.corners)
    weights = mesh.areas[:, None] * rule.weights[None, :]
    return points, weights


# ---------------------------------------------------------------------------
# Marching cubes
# ---------------------------------------------------------------------------
def sample_field(field: Callable, grid: GridSpec, chunk: int = 200_000) -> np.ndarray:
    """Evaluate a vectorized field on all grid nodes, returned with shape ``grid.shape``."""
    pts = grid.points()
    out = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        out[start:start + chunk] = np.asarray(field(pts[start:start + chunk]), dtype=float)
    return out.reshape(grid.shape)


def marching_cubes(field, grid: GridSpec) -> TriangleMesh:
    """Extract the zero level set of ``field`` as a closed, outward-oriented mesh.

    Parameters
    ----------
    field : callable or np.ndarray
        Vectorized ``f(points[N, 3]) -> values[N]``, or precomputed node values
        of shape ``grid.shape``.
    grid : GridSpec
    """
    values = field if isinstance(field, np.ndarray) else sample_field(field, grid)
    values = np.array(values, dtype=float)
    if values.shape != grid.shape:
        raise ValueError(f"field values have shape {values.shape}, grid is {grid.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("field is not finite on all grid nodes")
    if np.all(values > 0) or np.all(values < 0):
        raise NoSurface("field has uniform sign on the grid")
    boundary = np.concatenate([
        values[0].ravel(), values[-1].ravel(), values[:, 0].ravel(),
        values[:, -1].ravel(), values[:, :, 0].ravel(), values[:, :, -1].ravel(),
    ])
    if np.any(boundary <= 0):
        raise OpenSurface(f"zero set reaches the grid boundary at {np.count_nonzero(boundary <= 0)} nodes")

    # nodes exactly on the level set would produce coincident vertices
    values[values == 0.0] = 1e-12 * grid.h
    verts, faces, _, _ = measure.marching_cubes(
        values, level=0.0, spacing=(grid.h,) * 3, method="lewiner", allow_degenerate=True
    )
    verts = verts.astype(float) + np.array([ax[0] for ax in grid.axes()])
    mesh = _cleanup(verts, faces.astype(np.int64), DEGENERATE_AREA_FACTOR * grid.h**2)
    if mesh_volume(mesh) < 0:
        mesh = mesh.flipped()
    if not mesh.is_closed():
        raise DegenerateMesh(f"extracted surface has {mesh.boundary_edge_count()} boundary edges")
    logger.debug("marching cubes: %d vertices, %d faces", len(mesh.vertices), mesh.n_faces)
    return mesh


def _cleanup(verts: np.ndarray, faces: np.ndarray, min_area: float) -> TriangleMesh:
    """Collapse the shortest edge of every face with area below ``min_area``."""
    for _ in range(100):
        corners = verts[faces]
        areas = 0.5 * np.linalg.norm(
            np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=1
        )
        bad = np.flatnonzero(areas < min_area)
        if bad.size == 0:
            break
        parent = np.arange(len(verts))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for f in bad:
            a, b, c = faces[f]
            pairs = ((a, b), (b, c), (c, a))
            lengths = [np.linalg.norm(verts[p] - verts[q]) for p, q in pairs]
            p, q = pairs[int(np.argmin(lengths))]
            rp, rq = find(p), find(q)
            if rp != rq:
                parent[max(rp, rq)] = min(rp, rq)
        roots = np.array([find(i) for i in range(len(verts))])
        faces = roots[faces]
        keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 2] != faces[:, 0])
        faces = _drop_folded_pairs(faces[keep])
    used, inverse = np.unique(faces, return_inverse=True)
    return TriangleMesh(verts[used], inverse.reshape(-1, 3))


def _drop_folded_pairs(faces: np.ndarray) -> np.ndarray:
    """Remove pairs of faces spanning the same vertex triple (zero-volume folds)."""
    if len(faces) == 0:
        return faces
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return faces[counts[inverse.ravel()] == 1]


# ---------------------------------------------------------------------------
# Reference meshes
# ---------------------------------------------------------------------------
def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere from a subdivided icosahedron (20 * 4**subdivisions faces)."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    mesh = TriangleMesh(radius * np.array(verts) + np.asarray(center, dtype=float), np.array(faces))
    return mesh if mesh_volume(mesh) > 0 else mesh.flipped()
