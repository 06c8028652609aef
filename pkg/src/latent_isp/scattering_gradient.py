"""Data misfit and its latent gradient via one adjoint solve per incident wave.

For ``J(z) = 1/(2LM) sum_lm |u_inf(xhat_m, d_l) - u*_lm|^2`` the shape
derivative reduces to a boundary integral of the forward and adjoint
normal derivatives,

    dJ/dz = -(1/L) Re sum_l int (du_l/dnu)(dw_l/dnu) V_z ds,

where ``w_l`` is the total field for the incident superposition
``sum_m c_m exp(-ik xhat_m . y)`` with ``c_m = conj(r_lm) / (4 pi M)`` and
``V_z = -grad_z f / |grad_x f|`` is the normal velocity of ``{f(z, .) = 0}``
per unit change of ``z``.  Everything is evaluated face by face at centroids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigMismatch, DimensionMismatch, IrregularSurface, ModeMismatch, NonPositiveEpsilon
from .geometry import GridSpec, TriangleMesh
from .helmholtz_bem import IncidentWave, SurfaceDensity, solve_density
from .latent_shape import extract_surface
from .measurement import FarFieldData, ForwardSolution, smoothed_modulus, solve_forward

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
G_MIN = 1e-6


# ---------------------------------------------------------------------------
# Losses and residuals
# ---------------------------------------------------------------------------
def _check_pair(sim: FarFieldData, obs: FarFieldData) -> None:
    if not sim.config.matches(obs.config):
        raise ConfigMismatch("simulated and observed data use different measurement configurations")


def loss(sim: FarFieldData, obs: FarFieldData) -> float:
    """``1/(2LM) sum |sim - obs|^2``."""
    _check_pair(sim, obs)
    if sim.is_phaseless:
        return phaseless_loss(sim, obs, obs.config.eps)
    return 0.5 * float(np.mean(np.abs(sim.values - obs.values) ** 2))


def _transformed(data: FarFieldData, eps: float) -> np.ndarray:
    return data.values if data.is_transformed else smoothed_modulus(data.values, eps)


def phaseless_loss(sim: FarFieldData, obs: FarFieldData, eps: float) -> float:
    """Misfit of smoothed moduli; raw complex inputs are transformed with ``eps``."""
    if eps is None or not eps > 0:
        raise NonPositiveEpsilon(f"phaseless smoothing must be positive, got {eps}")
    if sim.values.shape != obs.values.shape:
        raise ConfigMismatch("data arrays differ in shape")
    diff = _transformed(sim, eps) - _transformed(obs, eps)
    return 0.5 * float(np.mean(np.abs(diff) ** 2))


@dataclass(frozen=True, eq=False)
class Residuals:
    """Misfit ``values`` for the current shape and the simulated far field it came from."""

    values: np.ndarray
    sim: np.ndarray
    mode: str = "full"
    eps: float | None = None

    def __post_init__(self):
        if self.mode == "phaseless" and (self.eps is None or not self.eps > 0):
            raise NonPositiveEpsilon("phaseless residuals need eps > 0")
        if np.shape(self.values) != np.shape(self.sim):
            raise DimensionMismatch("residual and far-field arrays differ in shape")

    @classmethod
    def compute(cls, sim_far, obs: FarFieldData) -> "Residuals":
        sim_far = np.asarray(sim_far, dtype=complex)
        if sim_far.shape != obs.values.shape:
            raise ConfigMismatch(f"simulated shape {sim_far.shape} differs from data {obs.values.shape}")
        cfg = obs.config
        if cfg.mode == "phaseless":
            eps = cfg.eps
            if eps is None:
                raise NonPositiveEpsilon("phaseless data carry no smoothing parameter")
            return cls(smoothed_modulus(sim_far, eps) - _transformed(obs, eps), sim_far, "phaseless", eps)
        return cls(sim_far - obs.values, sim_far, cfg.mode)

    @property
    def loss(self) -> float:
        return 0.5 * float(np.mean(np.abs(self.values) ** 2))

    def weights(self) -> np.ndarray:
        """``q_lm`` with ``dJ = (1/LM) Re sum q_lm du_lm``."""
        if self.mode == "phaseless":
            s = np.abs(self.sim) ** 2
            return self.values * (s + 2 * self.eps) / (s + self.eps) ** 1.5 * np.conj(self.sim)
        return np.conj(self.values)


@dataclass(frozen=True, eq=False)
class AdjointSource:
    coefficients: np.ndarray
    directions: np.ndarray

    def incident(self, k: float) -> IncidentWave:
        return IncidentWave.superposition(k, self.coefficients, self.directions)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coefficients)


def adjoint_source(residuals: Residuals, l: int, observation) -> AdjointSource:
    """Adjoint incident superposition for incident index ``l``."""
    if residuals.mode == "backscatter":
        raise ModeMismatch("backscatter gradients use the closed form, no adjoint source")
    q = residuals.weights()[l]
    observation = np.atleast_2d(np.asarray(observation, dtype=float))
    if len(observation) != len(q):
        raise DimensionMismatch("observation count differs from residual row length")
    return AdjointSource(q / (FOUR_PI * len(q)), -observation)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def _velocity_weights(decoder, z, mesh: TriangleMesh, g_min: float = G_MIN) -> np.ndarray:
    """Per-face ``area * grad_z f / |grad_x f|`` at centroids, shape ``(F, Z)``."""
    _, gx, gz = decoder.value_and_grads(z, mesh.centroids)
    norms = np.linalg.norm(gx, axis=1)
    if np.any(norms < g_min):
        raise IrregularSurface(f"|grad_x f| = {norms.min():.3e} < {g_min} at a face centroid")
    return gz * (mesh.areas / norms)[:, None]


def _check_densities(mesh: TriangleMesh, dens) -> None:
    for d in dens:
        if d.mesh is not mesh and d.values.shape != (mesh.n_faces,):
            raise DimensionMismatch("density lives on a different mesh")


def latent_gradient(decoder, z, mesh: TriangleMesh, densities, adjoint_densities, n_incident: int | None = None,
                    g_min: float = G_MIN) -> np.ndarray:
    """``-(1/L) Re sum_l int u_l' w_l' V_z ds`` with centroid values on each face."""
    if len(densities) != len(adjoint_densities):
        raise DimensionMismatch("need one adjoint density per forward density")
    _check_densities(mesh, densities)
    _check_densities(mesh, adjoint_densities)
    n_incident = len(densities) if n_incident is None else n_incident
    weights = _velocity_weights(decoder, z, mesh, g_min)
    product = np.zeros(mesh.n_faces, dtype=complex)
    for u, w in zip(densities, adjoint_densities):
        product += u.values * w.values
    # V_z = -grad_z f/|grad_x f| cancels the leading minus sign
    return np.real(product @ weights) / n_incident


def backscatter_gradient(decoder, z, mesh: TriangleMesh, densities, residuals: Residuals,
                         n_incident: int | None = None, g_min: float = G_MIN) -> np.ndarray:
    """Closed form for ``xhat = -d_l``: the adjoint field is ``conj(r_l)/(4 pi)`` times ``u_l``."""
    if residuals.mode != "backscatter":
        raise ModeMismatch("backscatter gradient needs backscatter residuals")
    values = np.asarray(residuals.values)
    if values.shape != (len(densities), 1):
        raise DimensionMismatch("backscatter residuals must have shape (L, 1)")
    _check_densities(mesh, densities)
    n_incident = len(densities) if n_incident is None else n_incident
    weights = _velocity_weights(decoder, z, mesh, g_min)
    coef = residuals.weights()[:, 0] / FOUR_PI
    product = np.zeros(mesh.n_faces, dtype=complex)
    for c, u in zip(coef, densities):
        product += c * u.values**2
    return np.real(product @ weights) / n_incident


def mask_gradient(g, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Keep a random ``fraction`` of coordinates, rescaled so the expectation is ``g``."""
    g = np.asarray(g, dtype=float)
    if not 0 < fraction <= 1:
        raise ValueError("mask fraction must lie in (0, 1]")
    if fraction == 1:
        return g.copy()
    count = max(1, int(round(fraction * g.size)))
    keep = rng.choice(g.size, size=count, replace=False)
    out = np.zeros_like(g)
    out[keep] = g[keep] * (g.size / count)
    return out


# ---------------------------------------------------------------------------
# One full evaluation
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class Evaluation:
    loss: float
    gradient: np.ndarray | None
    mesh: TriangleMesh
    residuals: Residuals
    forward: ForwardSolution
    adjoint: list


def evaluate(decoder, z, obs: FarFieldData, grid: GridSpec | None = None, tol: float = 1e-5,
             max_iters: int = 500, gradient: bool = True, g_min: float = G_MIN) -> Evaluation:
    """Mesh ``z``, solve forward (and adjoint) problems, return loss and gradient."""
    grid = GridSpec() if grid is None else grid
    mesh = extract_surface(decoder, z, grid, g_min)
    cfg = obs.config
    fwd = solve_forward(mesh, cfg, tol=tol, max_iters=max_iters)
    res = Residuals.compute(fwd.far, obs)
    if not gradient:
        return Evaluation(res.loss, None, mesh, res, fwd, [])
    adjoint = []
    if cfg.mode == "backscatter":
        grad = backscatter_gradient(decoder, z, mesh, fwd.densities, res, g_min=g_min)
    else:
        for l in range(cfg.n_incident):
            src = adjoint_source(res, l, cfg.observations_for(l))
            if src.is_zero:
                adjoint.append(SurfaceDensity(mesh, np.zeros(mesh.n_faces, dtype=complex)))
            else:
                adjoint.append(solve_density(fwd.system, src.incident(cfg.k), tol=tol, max_iters=max_iters))
        grad = latent_gradient(decoder, z, mesh, fwd.densities, adjoint, g_min=g_min)
    return Evaluation(res.loss, grad, mesh, res, fwd, adjoint)


def finite_difference_gradient(decoder, z, obs: FarFieldData, step: float = 1e-3, grid: GridSpec | None = None,
                               tol: float = 1e-8, coords=None) -> np.ndarray:
    """Central differences of the loss, one pair of full forward solves per coordinate."""
    z = np.asarray(z, dtype=float)
    coords = range(z.size) if coords is None else coords
    out = np.full(z.size, np.nan)
    for i in coords:
        e = np.zeros_like(z)
        e[i] = step
        plus = evaluate(decoder, z + e, obs, grid, tol=tol, gradient=False).loss
        minus = evaluate(decoder, z - e, obs, grid, tol=tol, gradient=False).loss
        out[i] = (plus - minus) / (2 * step)
    return out
