"""Run configuration and the iterative latent reconstruction loop.

One iteration meshes the current latent, solves the forward and adjoint
problems, masks the gradient and takes a moment step.  Every iteration is
checkpointed so an interrupted run can resume on the same trajectory.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import optimizer
from .errors import ConfigError, LatentISPError
from .geometry import GridSpec, TriangleMesh
from .latent_shape import AnalyticDecoder, Ellipsoid, LatentShape, MLPDecoder, extract_surface, load_codes
from .measurement import FarFieldData, MeasurementConfig, indicator_error
from .scattering_gradient import G_MIN, evaluate, mask_gradient

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_K = 5.0 * math.pi
DEFAULT_LATENT_DIM = 256


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
def _from_dict(cls, data, where: str):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _number(value, where: str, positive: bool = False, allow_none: bool = False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"{where} must be positive, got {value!r}")
    return float(value)


@dataclass
class DecoderSection:
    backend: str = "analytic"  # analytic | learned
    weights: str | None = None
    codes: str | None = None
    latent_dim: int = DEFAULT_LATENT_DIM  # checked against the weight file for the learned backend
    a_min: float = 0.15
    a_max: float = 0.8
    exponent_scale: float = 0.25

    def __post_init__(self):
        if self.backend not in ("analytic", "learned"):
            raise ConfigError(f"decoder.backend must be 'analytic' or 'learned', got {self.backend!r}")
        if self.backend == "learned" and not self.weights:
            raise ConfigError("decoder.weights is required for the learned backend")
        if not isinstance(self.latent_dim, int) or self.latent_dim < 1:
            raise ConfigError("decoder.latent_dim must be a positive integer")


@dataclass
class InitSection:
    kind: str = "default"  # default | explicit | training_code | shape
    value: list | None = None
    index: int | None = None  # training code index; a seeded draw when absent
    # kind "shape" (analytic backend): encode a superquadric directly
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    axes: list | None = None
    exponent: float = 2.0

    def __post_init__(self):
        if self.kind not in ("default", "explicit", "training_code", "shape"):
            raise ConfigError(f"init.kind must be default, explicit, training_code or shape, got {self.kind!r}")
        if self.kind == "explicit" and not self.value:
            raise ConfigError("init.value is required for an explicit initial latent")
        if self.kind == "shape" and self.axes is None:
            raise ConfigError("init.axes is required for a shape initial latent")


@dataclass
class MeasurementSection:
    k: float = DEFAULT_K
    n_incident: int = 4
    n_observation: int = 100
    mode: str = "full"

    def __post_init__(self):
        self.k = _number(self.k, "measurement.k", positive=True)
        for name in ("n_incident", "n_observation"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"measurement.{name} must be a positive integer")
        if self.mode not in ("full", "backscatter", "phaseless"):
            raise ConfigError(f"measurement.mode must be full, backscatter or phaseless, got {self.mode!r}")

    def build(self) -> MeasurementConfig:
        return MeasurementConfig.fibonacci(self.k, self.n_incident, self.n_observation, self.mode)


@dataclass
class OptimizerSection:
    schedule: str = "constant"
    alpha: float = optimizer.CONSTANT_RATE
    halve_every: int = optimizer.DECAY_EVERY
    beta1: float = 0.9
    beta2: float = 0.999
    eps_den: float = 1e-8
    max_iters: int = 200
    patience: int = 30
    rel_improve: float = 1e-3
    mask_fraction: float = 1.0

    def __post_init__(self):
        if self.schedule not in ("constant", "decay"):
            raise ConfigError(f"optimizer.schedule must be constant or decay, got {self.schedule!r}")
        self.alpha = _number(self.alpha, "optimizer.alpha", positive=True)
        if not 0 <= self.beta1 < self.beta2 <= 1:
            raise ConfigError("optimizer needs 0 <= beta1 < beta2 <= 1")
        if not isinstance(self.max_iters, int) or self.max_iters < 0:
            raise ConfigError("optimizer.max_iters must be a nonnegative integer")
        if not 0 < self.mask_fraction <= 1:
            raise ConfigError("optimizer.mask_fraction must lie in (0, 1]")
        if self.eps_den < 0:
            raise ConfigError("optimizer.eps_den must be nonnegative")


@dataclass
class GridSection:
    lower: list = field(default_factory=lambda: [-1.0, -1.0, -1.0])
    upper: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    h: float = 0.06

    def build(self) -> GridSpec:
        try:
            return GridSpec(tuple(self.lower), tuple(self.upper), self.h)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"grid: {exc}") from exc


@dataclass
class SolverSection:
    tol: float = 1e-5
    max_iters: int = 500
    g_min: float = G_MIN


@dataclass
class TargetSection:
    """Ground-truth shape for ``simulate`` and the indicator error."""

    kind: str | None = None  # sphere | ellipsoid | latent | mesh
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float | None = None
    axes: list | None = None
    latent: list | None = None
    mesh: str | None = None

    def __post_init__(self):
        if self.kind not in (None, "sphere", "ellipsoid", "latent", "mesh"):
            raise ConfigError(f"target.kind must be sphere, ellipsoid, latent or mesh, got {self.kind!r}")
        if self.kind == "sphere" and self.radius is None:
            raise ConfigError("target.radius is required for a sphere")
        if self.kind == "ellipsoid" and self.axes is None:
            raise ConfigError("target.axes is required for an ellipsoid")
        if self.kind == "latent" and self.latent is None:
            raise ConfigError("target.latent is required for a latent target")
        if self.kind == "mesh" and not self.mesh:
            raise ConfigError("target.mesh is required for a mesh target")


@dataclass
class SeedSection:
    noise: int = 0
    mask: int = 1
    init: int = 2


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    decoder: DecoderSection = field(default_factory=DecoderSection)
    init: InitSection = field(default_factory=InitSection)
    measurement: MeasurementSection = field(default_factory=MeasurementSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    grid: GridSection = field(default_factory=GridSection)
    solver: SolverSection = field(default_factory=SolverSection)
    target: TargetSection = field(default_factory=TargetSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    noise_delta: float = 0.0
    output_dir: str | None = None
    log_meshes: bool = True
    dump_gradients: bool = False

    SECTIONS = {
        "decoder": DecoderSection, "init": InitSection, "measurement": MeasurementSection,
        "optimizer": OptimizerSection, "grid": GridSection, "solver": SolverSection,
        "target": TargetSection, "seeds": SeedSection,
    }

    @classmethod
    def from_dict(cls, data: dict | None, base_dir: Path | None = None) -> "RunConfig":
        data = dict(data or {})
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        top = {f.name for f in dataclasses.fields(cls)} - {"schema_version"}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
        kwargs = {}
        for name, value in data.items():
            section = cls.SECTIONS.get(name)
            kwargs[name] = _from_dict(section, value, name) if section else value
        cfg = cls(**kwargs)
        cfg.noise_delta = _number(cfg.noise_delta, "noise_delta")
        if cfg.noise_delta < 0:
            raise ConfigError("noise_delta must be nonnegative")
        if base_dir is not None:
            cfg._resolve_paths(Path(base_dir))
        cfg.check_files()
        return cfg

    def _resolve_paths(self, base: Path) -> None:
        def fix(p):
            return None if p is None else str(p if Path(p).is_absolute() else base / p)

        self.decoder.weights = fix(self.decoder.weights)
        self.decoder.codes = fix(self.decoder.codes)
        self.target.mesh = fix(self.target.mesh)

    def check_files(self) -> None:
        for label, path in (("decoder.weights", self.decoder.weights), ("decoder.codes", self.decoder.codes),
                            ("target.mesh", self.target.mesh)):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{label}: file {path} does not exist")

    def to_dict(self) -> dict:
        out = {"schema_version": self.schema_version}
        for f in dataclasses.fields(self):
            if f.name == "schema_version":
                continue
            value = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
        return out


def load_config(path) -> RunConfig:
    """Read a YAML run configuration; relative file paths resolve against its directory."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data, base_dir=path.parent)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


# ---------------------------------------------------------------------------
# Building blocks from the configuration
# ---------------------------------------------------------------------------
def build_decoder(config: RunConfig):
    sec = config.decoder
    if sec.backend == "analytic":
        return AnalyticDecoder(sec.a_min, sec.a_max, sec.exponent_scale)
    decoder = MLPDecoder.load(sec.weights)
    if decoder.latent_dim != sec.latent_dim:
        raise ConfigError(f"decoder.latent_dim is {sec.latent_dim} but {sec.weights} has Z={decoder.latent_dim}")
    return decoder


def initial_latent(config: RunConfig, decoder) -> np.ndarray:
    """Explicit vector, a stored training code, an encoded shape, or the backend default.

    The analytic default (all zeros) is a centered sphere of radius
    ``(a_min + a_max)/2``; the learned default is a seeded draw among the
    training codes.
    """
    sec = config.init
    z_dim = decoder.latent_dim
    if sec.kind == "explicit":
        z = np.asarray(sec.value, dtype=float)
    elif sec.kind == "default" and config.decoder.backend == "analytic":
        z = np.zeros(z_dim)
    elif sec.kind == "shape":
        if config.decoder.backend != "analytic":
            raise ConfigError("init.kind shape needs the analytic backend")
        try:
            z = decoder.encode(sec.center, sec.axes, sec.exponent)
        except ValueError as exc:
            raise ConfigError(f"init: {exc}") from exc
    else:
        if not config.decoder.codes:
            raise ConfigError("decoder.codes is required to start from a training code")
        codes = load_codes(config.decoder.codes)
        if sec.index is not None:
            if not 0 <= sec.index < len(codes):
                raise ConfigError(f"init.index {sec.index} outside 0..{len(codes) - 1}")
            z = codes[sec.index]
        else:
            z = codes[np.random.default_rng(config.seeds.init).integers(len(codes))]
    if z.shape != (z_dim,):
        raise ConfigError(f"initial latent has length {z.size}, decoder expects {z_dim}")
    return z.copy()


def build_target(config: RunConfig, decoder=None):
    """Implicit shape or mesh for the configured ground truth, or ``None``."""
    t = config.target
    if t.kind is None:
        return None
    if t.kind == "sphere":
        return Ellipsoid.sphere(t.radius, t.center)
    if t.kind == "ellipsoid":
        return Ellipsoid(tuple(t.center), tuple(t.axes))
    if t.kind == "mesh":
        return TriangleMesh.read_obj(t.mesh)
    decoder = build_decoder(config) if decoder is None else decoder
    return LatentShape(decoder, t.latent)


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------
RECORD_FIELDS = ("iteration", "loss", "indicator_error", "gradient_norm", "step_norm", "faces", "wall_time")


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    indicator_error: int | None
    gradient_norm: float | None  # absent on the last iterate, where no gradient is formed
    step_norm: float
    faces: int
    wall_time: float

    def row(self) -> list:
        return [getattr(self, f) for f in RECORD_FIELDS]


@dataclass
class Reconstruction:
    z: np.ndarray
    mesh: TriangleMesh
    records: list
    state: optimizer.AdamState


def mesh_log_iterations(max_iters: int) -> set:
    """Iterations whose meshes are written: every ``ceil(max_iters/8)`` plus first and last."""
    every = max(1, math.ceil(max_iters / 8))
    return set(range(0, max_iters + 1, every)) | {0, max_iters}


class RunDirectory:
    """Artifacts of one reconstruction, guarded by a lock file."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = self.path / ".lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "meshes").mkdir(exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if self._lock_is_stale():
                self.lock.unlink()
                fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            else:
                raise ConfigError(f"run directory {self.path} is in use by another process") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False

    def _lock_is_stale(self) -> bool:
        try:
            pid = int(self.lock.read_text().strip())
            os.kill(pid, 0)
        except (ValueError, ProcessLookupError):
            return True
        except PermissionError:
            return False
        return pid == os.getpid()

    @property
    def checkpoint(self) -> Path:
        return self.path / "checkpoint.json"

    def write_records(self, records) -> None:
        with open(self.path / "records.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RECORD_FIELDS)
            for r in records:
                writer.writerow(["" if v is None else v for v in r.row()])

    def write_checkpoint(self, payload: dict) -> None:
        tmp = self.checkpoint.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload))
        os.replace(tmp, self.checkpoint)

    def read_checkpoint(self) -> dict | None:
        if not self.checkpoint.is_file():
            return None
        return json.loads(self.checkpoint.read_text())


def read_records(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(IterationRecord(
                int(row["iteration"]), float(row["loss"]),
                None if row["indicator_error"] == "" else int(row["indicator_error"]),
                None if row["gradient_norm"] == "" else float(row["gradient_norm"]), float(row["step_norm"]), int(row["faces"]), float(row["wall_time"])))
    return out


def _record_from_dict(d: dict) -> IterationRecord:
    return IterationRecord(**d)


def check_data(config: RunConfig, observed: FarFieldData) -> None:
    """The data file fixes the directions; mode, wavenumber and sizes must agree with the config."""
    sec, cfg = config.measurement, observed.config
    if cfg.mode != sec.mode:
        raise ConfigError(f"data mode {cfg.mode} differs from measurement.mode {sec.mode}")
    if abs(cfg.k - sec.k) > 1e-12 * sec.k:
        raise ConfigError(f"data wavenumber {cfg.k} differs from measurement.k {sec.k}")
    expected = (sec.n_incident, 1 if sec.mode == "backscatter" else sec.n_observation)
    if cfg.shape != expected:
        raise ConfigError(f"data shape {cfg.shape} differs from the configured {expected}")


def reconstruct(config: RunConfig, observed: FarFieldData, run_dir=None, resume: bool = False,
                truth=None, decoder=None, stop_after: int | None = None) -> Reconstruction:
    """Iterate mesh, solves, gradient and moment step until the stopping rule fires.

    ``max_iters`` counts moment steps; iteration ``n`` evaluates the loss at
    the ``n``-th iterate, so a run records ``max_iters + 1`` losses at most.
    ``stop_after`` ends the call after that many iterations without marking
    the run finished, which is how interruption is simulated in tests.
    """
    decoder = build_decoder(config) if decoder is None else decoder
    grid = config.grid.build()
    check_data(config, observed)
    if truth is None:
        truth = build_target(config, decoder)

    rundir = RunDirectory(run_dir if run_dir is not None else config.output_dir) \
        if (run_dir is not None or config.output_dir) else None
    if rundir is None:
        return _iterate(config, decoder, grid, observed, truth, None, resume, stop_after)
    with rundir:
        save_config(config, rundir.path / "config.yaml")
        (rundir.path / "seeds.json").write_text(json.dumps(dataclasses.asdict(config.seeds)))
        return _iterate(config, decoder, grid, observed, truth, rundir, resume, stop_after)


def _iterate(config, decoder, grid, observed, truth, rundir, resume, stop_after):
    opt = config.optimizer
    z = initial_latent(config, decoder)
    state = optimizer.AdamState.fresh(z.size, opt.beta1, opt.beta2, opt.eps_den)
    mask_rng = np.random.default_rng(config.seeds.mask)
    records, history, n = [], [], 0
    elapsed = 0.0
    if resume and rundir is not None:
        ckpt = rundir.read_checkpoint()
        if ckpt is not None:
            z = np.array(ckpt["z"])
            state = optimizer.AdamState.from_dict(ckpt["state"])
            mask_rng.bit_generator.state = ckpt["mask_rng"]
            records = [_record_from_dict(r) for r in ckpt["records"]]
            history = [r.loss for r in records]
            n = ckpt["n"]
            elapsed = records[-1].wall_time if records else 0.0
            logger.info("resuming at iteration %d", n)
            if ckpt.get("finished"):
                mesh = extract_surface(decoder, z, grid, config.solver.g_min)
                return Reconstruction(z, mesh, records, state)
    log_at = mesh_log_iterations(opt.max_iters)
    grad_file = None
    if rundir is not None and config.dump_gradients:
        grad_file = open(rundir.path / "gradients.csv", "a" if resume else "w")
        if not resume:
            grad_file.write("iteration,coordinate,value\n")
    start = time.perf_counter() - elapsed
    steps_this_call = 0
    mesh = None
    try:
        while True:
            want_grad = n < opt.max_iters
            ev = evaluate(decoder, z, observed, grid, tol=config.solver.tol, max_iters=config.solver.max_iters,
                          gradient=want_grad, g_min=config.solver.g_min)
            mesh = ev.mesh
            history.append(ev.loss)
            err = None if truth is None else indicator_error(LatentShape(decoder, z), truth, grid)
            if rundir is not None and config.log_meshes and n in log_at:
                mesh.write_obj(rundir.path / "meshes" / f"iter_{n:04d}.obj")
            # len(history) = n + 1, so this stops once n reaches max_iters
            done = optimizer.should_stop(history, opt.max_iters + 1, opt.patience, opt.rel_improve)
            gnorm = float(np.linalg.norm(ev.gradient)) if ev.gradient is not None else None
            step_norm = 0.0
            if not done:
                g = mask_gradient(ev.gradient, opt.mask_fraction, mask_rng)
                rate = optimizer.schedule(opt.schedule, n, base=opt.alpha, every=opt.halve_every)
                state, z_new = optimizer.adam_step(state, z, g, rate)
                step_norm = float(np.linalg.norm(z_new - z))
                if grad_file is not None:
                    grad_file.writelines(f"{n},{i},{v!r}\n" for i, v in enumerate(g.tolist()))
            rec = IterationRecord(n, float(ev.loss), err, gnorm, step_norm, mesh.n_faces,
                                  time.perf_counter() - start)
            records.append(rec)
            logger.info("iter %d loss %.6e grad %s step %.3e faces %d%s", n, ev.loss,
                        "-" if gnorm is None else f"{gnorm:.3e}", step_norm,
                        mesh.n_faces, "" if err is None else f" indicator {err}")
            if done:
                break
            z = z_new
            n += 1
            steps_this_call += 1
            if rundir is not None:
                rundir.write_records(records)
                rundir.write_checkpoint(_checkpoint(z, state, mask_rng, records, n, False))
            if stop_after is not None and steps_this_call >= stop_after:
                return Reconstruction(z, mesh, records, state)
    except LatentISPError as exc:
        exc.iteration = n
        if hasattr(exc, "add_note"):
            exc.add_note(f"raised at iteration {n}")
        logger.error("aborted at iteration %d: %s", n, exc)
        if rundir is not None:
            rundir.write_records(records)
        raise
    finally:
        if grad_file is not None:
            grad_file.close()
    if rundir is not None:
        rundir.write_records(records)
        rundir.write_checkpoint(_checkpoint(z, state, mask_rng, records, n, True))
        (rundir.path / "latent_final.csv").write_text(",".join(repr(float(v)) for v in z) + "\n")
        mesh.write_obj(rundir.path / "meshes" / f"iter_{n:04d}.obj")
    return Reconstruction(z, mesh, records, state)


def _checkpoint(z, state, rng, records, n, finished) -> dict:
    return {"z": z.tolist(), "state": state.to_dict(), "mask_rng": rng.bit_generator.state,
            "records": [dataclasses.asdict(r) for r in records], "n": n, "finished": finished}
