"""Command-line entry point: ``latent-isp <subcommand> ...``.

Exit status is 0 on success, 2 for configuration or usage errors, 3 when
GMRES fails to converge and 4 for surface degeneracy.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analytic_oracle import SphereScatterer, mie_far_field
from .errors import ConfigError, LatentISPError
from .geometry import TriangleMesh
from .latent_shape import (
    TrainSchedule,
    extract_surface,
    mean_l1_error,
    random_ellipsoids,
    read_dataset,
    sample_sdf,
    save_codes,
    train_decoder,
    write_dataset,
)
from .measurement import FarFieldData, MeasurementConfig, add_noise, read_data, simulate_data, solve_forward, write_data
from .recon import build_decoder, build_target, initial_latent, load_config, reconstruct
from .scattering_gradient import evaluate, finite_difference_gradient

logger = logging.getLogger("latent_isp")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------
def cmd_simulate(args) -> int:
    config = load_config(args.config)
    target = build_target(config)
    if target is None:
        raise ConfigError("simulate needs a target section")
    meas = config.measurement.build()
    data = simulate_data(target, meas, config.grid.build(), tol=config.solver.tol,
                         max_iters=config.solver.max_iters)
    delta = config.noise_delta if args.delta is None else args.delta
    data = add_noise(data, delta, config.seeds.noise)
    write_data(data, args.out)
    logger.info("wrote %s (L=%d, M=%d, delta=%g)", args.out, *data.values.shape, delta)
    return 0


def cmd_reconstruct(args) -> int:
    config = load_config(args.config)
    observed = read_data(args.data)
    out = args.out or config.output_dir
    if not out:
        raise ConfigError("no run directory: pass --out or set output_dir")
    if args.max_iters is not None:
        config.optimizer.max_iters = args.max_iters
    result = reconstruct(config, observed, run_dir=out, resume=args.resume)
    last = result.records[-1]
    print(f"iterations {last.iteration}  loss {last.loss:.6e}  faces {last.faces}"
          + ("" if last.indicator_error is None else f"  indicator {last.indicator_error}"))
    return 0


def _latent_or_mesh(args, config):
    if args.mesh:
        return TriangleMesh.read_obj(args.mesh), None
    decoder = build_decoder(config)
    if args.latent:
        z = np.array([float(v) for v in Path(args.latent).read_text().split(",")])
    else:
        z = initial_latent(config, decoder)
    return extract_surface(decoder, z, config.grid.build(), config.solver.g_min), z


def cmd_forward(args) -> int:
    config = load_config(args.config)
    mesh, _ = _latent_or_mesh(args, config)
    meas = config.measurement.build()
    sol = solve_forward(mesh, meas, tol=config.solver.tol, max_iters=config.solver.max_iters)
    data = FarFieldData(meas, sol.far)
    if meas.mode == "phaseless":
        data = data.to_phaseless()
    write_data(data, args.out)
    logger.info("forward solve on %d faces written to %s", mesh.n_faces, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args.config)
    decoder = build_decoder(config)
    grid = config.grid.build()
    if args.data:
        observed = read_data(args.data)
    else:
        target = build_target(config, decoder)
        if target is None:
            raise ConfigError("gradcheck needs --data or a target section")
        observed = simulate_data(target, config.measurement.build(), grid, tol=config.solver.tol)
    z = initial_latent(config, decoder)
    if args.latent:
        z = np.array([float(v) for v in Path(args.latent).read_text().split(",")])
    ev = evaluate(decoder, z, observed, grid, tol=config.solver.tol, max_iters=config.solver.max_iters)
    fd = finite_difference_gradient(decoder, z, observed, step=args.step, grid=grid, tol=args.fd_tol)
    g = ev.gradient
    cosine = float(g @ fd / (np.linalg.norm(g) * np.linalg.norm(fd)))
    lines = [f"loss {ev.loss:.10e}  faces {ev.mesh.n_faces}", f"{'i':>4} {'adjoint':>14} {'fd':>14} {'rel.err':>10}"]
    for i, (a, b) in enumerate(zip(g, fd)):
        rel = abs(a - b) / abs(b) if b != 0 else float("inf")
        lines.append(f"{i:>4} {a:>14.6e} {b:>14.6e} {rel:>10.3e}")
    lines.append(f"cosine {cosine:.6f}")
    report = "\n".join(lines)
    print(report)
    if args.out:
        Path(args.out).write_text(report + "\n")
    return 0


def cmd_dataset(args) -> int:
    rng = np.random.default_rng(args.seed)
    shapes = random_ellipsoids(args.shapes, rng)
    samples = [sample_sdf(s, args.points, rng=rng) for s in shapes]
    write_dataset(samples, args.out)
    with open(Path(args.out) / "shapes.csv", "w") as fh:
        fh.write("cx,cy,cz,ax,ay,az\n")
        for s in shapes:
            fh.write(",".join(repr(float(v)) for v in (*s.center, *s.axes)) + "\n")
    logger.info("wrote %d shapes to %s", args.shapes, args.out)
    return 0


def cmd_train_decoder(args) -> int:
    dataset = read_dataset(args.dataset)
    hidden = tuple(int(v) for v in args.hidden.split(","))
    schedule = TrainSchedule(epochs=args.epochs, points_per_shape=args.points_per_shape, base_rate=args.rate,
                             halve_every=args.halve_every, hidden=hidden, activation=args.activation, seed=args.seed)
    decoder, codes, history = train_decoder(dataset, args.latent_dim, lam=args.lam, schedule=schedule)
    decoder.save(args.weights)
    save_codes(codes, args.codes)
    err = np.mean([mean_l1_error(decoder, c, s) for c, s in zip(codes, dataset)])
    print(f"final loss {history[-1]:.6e}  mean l1 on training samples {err:.4e}")
    return 0


def cmd_mie(args) -> int:
    sphere = SphereScatterer(args.radius, tuple(args.center))
    meas = MeasurementConfig.fibonacci(args.k, args.n_incident, args.n_observation, args.mode)
    values = np.array([mie_far_field(sphere, args.k, d, meas.observations_for(l), args.terms)
                       for l, d in enumerate(meas.incident)]).reshape(meas.shape)
    data = FarFieldData(meas, values)
    if meas.mode == "phaseless":
        data = data.to_phaseless()
    write_data(data, args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-isp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthetic far-field data for the configured target")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=float, help="override noise_delta")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="run the latent reconstruction loop")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="run directory (defaults to output_dir)")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the run directory checkpoint")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("forward", help="far field of a mesh or latent")
    p.add_argument("--config", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--mesh", help="OBJ file")
    src.add_argument("--latent", help="CSV file with one latent vector")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="adjoint gradient against central differences")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--latent", help="CSV file with the latent to check (defaults to the initial latent)")
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--fd-tol", type=float, default=1e-8, help="GMRES tolerance of the difference solves")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dataset", help="write a synthetic ellipsoid training set")
    p.add_argument("--out", required=True)
    p.add_argument("--shapes", type=int, default=20)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train-decoder", help="fit decoder weights and per-shape codes")
    p.add_argument("--dataset", required=True)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--points-per-shape", type=int, default=512)
    p.add_argument("--rate", type=float, default=5e-4)
    p.add_argument("--halve-every", type=int, default=500)
    p.add_argument("--hidden", default="128,128,128,128")
    p.add_argument("--activation", default="softplus", choices=["softplus", "tanh"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", required=True)
    p.add_argument("--codes", required=True)
    p.set_defaults(func=cmd_train_decoder)

    p = sub.add_parser("mie", help="sphere far field from the partial-wave series")
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--center", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--n-incident", type=int, default=1)
    p.add_argument("--n-observation", type=int, default=100)
    p.add_argument("--mode", default="full", choices=["full", "backscatter", "phaseless"])
    p.add_argument("--terms", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mie)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LatentISPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        # unreadable files and malformed inputs are configuration problems
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
