"""Measurement geometry, synthetic far-field data, noise and the indicator error."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ModeMismatch, NegativeDelta, NonPositiveN
from .geometry import GridSpec, TriangleMesh, marching_cubes
from .helmholtz_bem import BemSystem, IncidentWave, SurfaceDensity, assemble, far_field, solve_density

logger = logging.getLogger(__name__)

MODES = ("full", "backscatter", "phaseless")
PHASELESS_REL_EPS = 1e-8
GOLDEN = (np.sqrt(5.0) + 1.0) / 2.0


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` quasi-uniform unit vectors, row ``i`` is lattice point ``i + 1``."""
    if n < 1:
        raise NonPositiveN(f"need at least one direction, got {n}")
    idx = np.arange(1, n + 1)
    x3 = (2.0 * idx - 1.0) / n - 1.0
    rho = np.sqrt(1.0 - x3**2)
    angle = 2.0 * np.pi * idx * GOLDEN
    return np.column_stack([rho * np.cos(angle), rho * np.sin(angle), x3])


def smoothed_modulus(values, eps: float) -> np.ndarray:
    """``|u|^2 / sqrt(|u|^2 + eps)``, the differentiable stand-in for ``|u|``."""
    s = np.abs(values) ** 2
    return s / np.sqrt(s + eps)


@dataclass(frozen=True, eq=False)
class MeasurementConfig:
    """Wavenumber, incident and observation directions, and the data mode.

    In backscatter mode the observation set is ``{-d_l}``, one direction per
    incident wave; ``observation`` is then ``-incident``.
    """

    k: float
    incident: np.ndarray
    observation: np.ndarray | None = None
    mode: str = "full"
    eps: float | None = None  # phaseless smoothing, fixed when data are simulated

    def __post_init__(self):
        if not self.k > 0:
            raise ConfigError("wavenumber must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        inc = np.atleast_2d(np.asarray(self.incident, dtype=float))
        if self.mode == "backscatter":
            if self.observation is not None and not np.allclose(self.observation, -inc, atol=1e-12):
                raise ConfigError("backscatter observations must be -d_l")
            obs = -inc
        else:
            if self.observation is None:
                raise ConfigError("observation directions required")
            obs = np.atleast_2d(np.asarray(self.observation, dtype=float))
        for name, arr in (("incident", inc), ("observation", obs)):
            if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) < 1:
                raise ConfigError(f"{name} directions must be a nonempty (n, 3) array")
            if np.max(np.abs(np.linalg.norm(arr, axis=1) - 1.0)) > 1e-12:
                raise ConfigError(f"{name} directions must be unit vectors")
        if self.eps is not None and not self.eps > 0:
            raise ConfigError("phaseless eps must be positive")
        object.__setattr__(self, "incident", inc)
        object.__setattr__(self, "observation", obs)
        object.__setattr__(self, "k", float(self.k))

    @classmethod
    def fibonacci(cls, k: float, n_incident: int, n_observation: int, mode: str = "full",
                  eps: float | None = None) -> "MeasurementConfig":
        obs = None if mode == "backscatter" else fibonacci_directions(n_observation)
        return cls(k, fibonacci_directions(n_incident), obs, mode, eps)

    @property
    def n_incident(self) -> int:
        return len(self.incident)

    @property
    def n_observation(self) -> int:
        return 1 if self.mode == "backscatter" else len(self.observation)

    @property
    def shape(self) -> tuple:
        return (self.n_incident, self.n_observation)

    def observations_for(self, l: int) -> np.ndarray:
        """Observation directions paired with incident direction ``l``."""
        if self.mode == "backscatter":
            return -self.incident[l : l + 1]
        return self.observation

    def matches(self, other: "MeasurementConfig", tol: float = 1e-12) -> bool:
        return (
            self.mode == other.mode
            and self.shape == other.shape
            and abs(self.k - other.k) <= tol * self.k
            and np.allclose(self.incident, other.incident, atol=tol, rtol=0)
            and np.allclose(self.observation, other.observation, atol=tol, rtol=0)
        )


@dataclass(frozen=True, eq=False)
class FarFieldData:
    """``(L, M)`` far-field values; real smoothed moduli in phaseless mode."""

    config: MeasurementConfig
    values: np.ndarray
    delta: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        vals = np.asarray(self.values)
        vals = vals.astype(float) if self.is_phaseless and not np.iscomplexobj(vals) else vals.astype(complex)
        if vals.shape != self.config.shape:
            raise ConfigError(f"data shape {vals.shape} differs from configuration {self.config.shape}")
        if not np.all(np.isfinite(vals)):
            raise ConfigError("far-field data contain non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def is_phaseless(self) -> bool:
        return self.config.mode == "phaseless"

    @property
    def is_transformed(self) -> bool:
        return self.is_phaseless and not np.iscomplexobj(self.values)

    def to_phaseless(self, eps: float | None = None) -> "FarFieldData":
        """Apply the smoothed modulus; ``eps`` defaults to 1e-8 times the mean ``|u|^2``."""
        if not self.is_phaseless:
            raise ModeMismatch("configuration is not phaseless")
        if self.is_transformed:
            return self
        eps = self.config.eps if eps is None else eps
        if eps is None:
            eps = PHASELESS_REL_EPS * float(np.mean(np.abs(self.values) ** 2))
        cfg = replace(self.config, eps=eps)
        return FarFieldData(cfg, smoothed_modulus(self.values, eps), self.delta, self.seed)


# ---------------------------------------------------------------------------
# Forward problem
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class ForwardSolution:
    system: BemSystem
    densities: list
    far: np.ndarray  # complex (L, M)
    incidents: list = field(default_factory=list)


def solve_forward(mesh: TriangleMesh, config: MeasurementConfig, tol: float = 1e-5,
                  max_iters: int = 500, system: BemSystem | None = None) -> ForwardSolution:
    """One density per incident direction and the complex far field at the observations."""
    system = assemble(mesh, config.k) if system is None else system
    densities, incidents = [], []
    far = np.empty(config.shape, dtype=complex)
    for l, d in enumerate(config.incident):
        inc = IncidentWave.plane(config.k, d)
        dens = solve_density(system, inc, tol=tol, max_iters=max_iters)
        far[l] = far_field(mesh, dens, config.k, config.observations_for(l))
        densities.append(dens)
        incidents.append(inc)
    return ForwardSolution(system, densities, far, incidents)


def _target_mesh(target, grid: GridSpec) -> TriangleMesh:
    if isinstance(target, TriangleMesh):
        return target
    sdf = target.sdf if hasattr(target, "sdf") else target
    return marching_cubes(sdf, grid)


def simulate_data(target, config: MeasurementConfig, grid: GridSpec | None = None, tol: float = 1e-5,
                  max_iters: int = 500) -> FarFieldData:
    """Synthetic exact data for a target mesh or implicit shape.

    Implicit targets are meshed at half the reconstruction spacing.  In
    phaseless mode the stored values are smoothed moduli.
    """
    grid = GridSpec() if grid is None else grid
    mesh = _target_mesh(target, grid.refined(2))
    logger.info("simulating data on %d faces", mesh.n_faces)
    sol = solve_forward(mesh, config, tol=tol, max_iters=max_iters)
    data = FarFieldData(config, sol.far)
    return data.to_phaseless() if config.mode == "phaseless" else data


def add_noise(data: FarFieldData, delta: float, seed: int | None = None) -> FarFieldData:
    """Multiplicative noise ``(1 + delta xi) u`` with real standard Gaussian ``xi``."""
    if delta < 0:
        raise NegativeDelta(f"noise level must be nonnegative, got {delta}")
    if delta == 0:
        return data
    xi = np.random.default_rng(seed).standard_normal(data.values.shape)
    return FarFieldData(data.config, data.values * (1.0 + delta * xi), float(delta), seed)


# ---------------------------------------------------------------------------
# Indicator error
# ---------------------------------------------------------------------------
def winding_number(mesh: TriangleMesh, points, chunk: int = 1024) -> np.ndarray:
    """Generalized winding number of a closed mesh at each point (1 inside, 0 outside)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.corners
    out = np.empty(len(points))
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        a = tri[None, :, 0, :] - p[:, None, :]
        b = tri[None, :, 1, :] - p[:, None, :]
        c = tri[None, :, 2, :] - p[:, None, :]
        la, lb, lc = (np.linalg.norm(v, axis=2) for v in (a, b, c))
        det = np.einsum("pfi,pfi->pf", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("pfi,pfi->pf", a, b) * lc
               + np.einsum("pfi,pfi->pf", b, c) * la + np.einsum("pfi,pfi->pf", c, a) * lb)
        out[start : start + chunk] = np.arctan2(det, den).sum(axis=1) / (2.0 * np.pi)
    return out


def inside_mask(shape, points) -> np.ndarray:
    """Boolean interior indicator for a mesh (winding number) or an implicit shape (SDF sign)."""
    if isinstance(shape, TriangleMesh):
        return winding_number(shape, points) > 0.5
    sdf = shape.sdf if hasattr(shape, "sdf") else shape
    return np.asarray(sdf(points)) < 0.0


def indicator_error(candidate, truth, grid: GridSpec | None = None) -> int:
    """Number of grid nodes classified differently by the two shapes."""
    grid = GridSpec() if grid is None else grid
    pts = grid.points()
    return int(np.count_nonzero(inside_mask(candidate, pts) != inside_mask(truth, pts)))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------
def _fmt(x) -> str:
    return repr(float(x))


def write_data(data: FarFieldData, path) -> None:
    cfg = data.config
    header = (f"# L={cfg.n_incident},M={cfg.n_observation},k={_fmt(cfg.k)},mode={cfg.mode},"
              f"delta={_fmt(data.delta)},seed={data.seed},eps={None if cfg.eps is None else _fmt(cfg.eps)}")
    if data.is_transformed:
        cols = "l,m,dx,dy,dz,xx,xy,xz,modulus"
    elif data.is_phaseless:
        raise ModeMismatch("phaseless data must be transformed before writing")
    else:
        cols = "l,m,dx,dy,dz,xx,xy,xz,re,im"
    lines = [header, cols]
    for l, d in enumerate(cfg.incident):
        for m, x in enumerate(cfg.observations_for(l)):
            v = data.values[l, m]
            tail = _fmt(v) if data.is_transformed else f"{_fmt(v.real)},{_fmt(v.imag)}"
            lines.append(",".join([str(l), str(m), *map(_fmt, d), *map(_fmt, x), tail]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_data(path) -> FarFieldData:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ConfigError(f"{path}: missing header line")
    meta = dict(item.split("=", 1) for item in lines[0][1:].strip().split(","))
    n_l, n_m, mode = int(meta["L"]), int(meta["M"]), meta["mode"]
    cols = lines[1].split(",")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[2:] if line.strip()])
    if len(rows) != n_l * n_m:
        raise ConfigError(f"{path}: expected {n_l * n_m} rows, found {len(rows)}")
    rows = rows[np.lexsort((rows[:, 1], rows[:, 0]))]
    inc = rows[::n_m, 2:5]
    obs = None if mode == "backscatter" else rows[:n_m, 5:8]
    eps = None if meta.get("eps", "None") == "None" else float(meta["eps"])
    cfg = MeasurementConfig(float(meta["k"]), inc, obs, mode, eps)
    if "modulus" in cols:
        values = rows[:, 8].reshape(n_l, n_m)
    else:
        values = (rows[:, 8] + 1j * rows[:, 9]).reshape(n_l, n_m)
    seed = None if meta.get("seed", "None") == "None" else int(meta["seed"])
    return FarFieldData(cfg, values, float(meta["delta"]), seed)
