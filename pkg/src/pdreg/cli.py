"""Command-line entry point: ``pdreg <command> [options]``.

Exit codes: 0 success, 1 domain error (one line on stderr naming the
command), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import warnings

import numpy as np

from . import io
from .errors import NotConverged, PdregError
from .flow import map_jacobian_determinants
from .registration import (GRADIENT_MODES, RegistrationConfig, loo_validate, mean_map, register,
                           small_deformation_register)
from .synthetic import DEFAULT_PETAL_AMPLITUDE, DEFAULT_PETAL_COUNT, generate_synthetic

CONFIG_FLAGS = {
    "sigma": float, "noise_amplitude": float, "time_steps": int, "max_iters": int, "step_size": float,
    "grad_tolerance": float, "gradient_mode": str, "data_weight": float, "jitter_start": float,
    "jitter_max": float, "seed": int,
}


def _add_config_flags(p):
    p.add_argument("--config", help="key = value file with registration settings")
    for name, kind in CONFIG_FLAGS.items():
        extra = {"choices": GRADIENT_MODES} if name == "gradient_mode" else {}
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None, **extra)


def _add_pair_flags(p):
    p.add_argument("--moving", required=True, help="moving landmark CSV")
    p.add_argument("--fixed", required=True, help="fixed landmark CSV")


def _add_out(p, required=True):
    p.add_argument("--out", required=required, help="output path")
    p.add_argument("--force", action="store_true", help="overwrite an existing output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic circle or flower landmark set")
    p.add_argument("--shape", choices=("circle", "flower"), required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--petal-amplitude", type=float, default=DEFAULT_PETAL_AMPLITUDE)
    p.add_argument("--petal-count", type=int, default=DEFAULT_PETAL_COUNT)
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)

    for name, text in (("register", "diffeomorphic registration with posterior covariance"),
                       ("baseline", "small-deformation GP regression baseline")):
        p = sub.add_parser(name, help=text)
        _add_pair_flags(p)
        _add_config_flags(p)
        _add_out(p)

    p = sub.add_parser("validate-ll", help="compare LL moments with Euler-Maruyama sampling")
    p.add_argument("--sigma", type=float, nargs="+", default=[0.1, 2.0, 5.0])
    p.add_argument("--shapes", nargs="+", choices=("circle", "flower"), default=["circle", "flower"])
    p.add_argument("--samples", type=int, default=3500)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--n-points", type=int, default=10)
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--noise-amplitude", type=float, default=1.0)
    p.add_argument("--petal-amplitude", type=float, default=DEFAULT_PETAL_AMPLITUDE)
    p.add_argument("--petal-count", type=int, default=DEFAULT_PETAL_COUNT)
    p.add_argument("--factor", choices=("cholesky", "sqrt"), default="cholesky")
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)

    p = sub.add_parser("uncertainty-map", help="FC map of the posterior over a regular grid")
    _add_pair_flags(p)
    _add_config_flags(p)
    p.add_argument("--method", choices=("diffeomorphic", "baseline"), default="diffeomorphic")
    p.add_argument("--bounds", type=float, nargs="+", help="lo hi per axis (default: landmark box + 25%%)")
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--svg", help="also write an SVG heatmap (2-D only)")
    p.add_argument("--jacobian", action="store_true", help="add the mean-map Jacobian determinant summary")
    _add_out(p)

    p = sub.add_parser("loo", help="leave-one-out transfer errors")
    _add_pair_flags(p)
    _add_config_flags(p)
    _add_out(p)
    return parser


def resolve_config(args) -> RegistrationConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(io.read_config(args.config))
    for name in CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return RegistrationConfig(**values)


def _inputs(args):
    return [p for p in (getattr(args, "moving", None), getattr(args, "fixed", None),
                        getattr(args, "config", None)) if p]


def _pair(args):
    return io.read_landmarks(args.moving), io.read_landmarks(args.fixed)


def _cmd_synth(args, argv):
    io.check_output(args.out, force=args.force)
    params = {"shape": args.shape, "n_points": args.n, "radius": args.radius,
              "petal_amplitude": args.petal_amplitude, "petal_count": args.petal_count}
    man = io.RunManifest.start("synth", params, seed=args.seed, argv=argv)
    lms = generate_synthetic(seed=args.seed, **params)
    io.write_landmarks(args.out, lms)
    io.write_manifest(io.manifest_path(args.out), man.finish())
    print(f"wrote {len(lms)} landmarks to {args.out}")


def _cmd_register(args, argv, baseline=False):
    io.check_output(args.out, _inputs(args), args.force)
    config = resolve_config(args)
    man = io.RunManifest.start(args.command, config.as_dict(), _inputs(args), config.seed, argv)
    moving, fixed = _pair(args)
    if baseline:
        result = small_deformation_register(moving, fixed, config)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConverged)
            result = register(moving, fixed, config)
    io.write_result(args.out, result, man.finish())
    state = "converged" if result.converged else "NOT converged"
    print(f"{args.command}: {state} after {result.iterations} iterations, "
          f"mean residual {result.mean_residual:.4g} mm")


def _cmd_validate(args, argv):
    from .oracle import run_validation

    io.check_output(args.out, force=args.force)
    params = {k: getattr(args, k) for k in ("sigma", "shapes", "samples", "repeats", "steps", "n_points",
                                            "radius", "noise_amplitude", "petal_amplitude",
                                            "petal_count", "factor")}
    man = io.RunManifest.start("validate-ll", params, seed=args.seed, argv=argv)
    rows = run_validation(tuple(args.sigma), tuple(args.shapes), args.repeats, args.samples, args.steps,
                          args.seed, args.n_points, args.radius, args.noise_amplitude,
                          args.petal_amplitude, args.petal_count, args.factor)
    report = [r.as_dict() for r in rows]
    io.write_json(args.out, {"rows": report, "manifest": man.finish().as_dict()})
    for r in report:
        print(f"{r['shape']:>6} sigma={r['sigma']:<5g} mean_distance={r['mean_distance']:.4g} "
              f"cov_frobenius_diff={r['cov_frobenius_diff']:.4g} "
              f"baseline_variance={r['baseline_variance']:.4g}")


def _default_bounds(points, margin=0.25):
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1.0)
    return [(float(a), float(b)) for a, b in zip(lo - pad, hi + pad)]


def _cmd_uncertainty(args, argv):
    from .uncertainty import fc_field

    outs = [args.out] + ([args.svg] if args.svg else [])
    for out in outs:
        io.check_output(out, _inputs(args), args.force)
    config = resolve_config(args)
    moving, fixed = _pair(args)
    if args.bounds:
        if len(args.bounds) != 2 * moving.dim:
            raise PdregError(f"--bounds needs {2 * moving.dim} numbers (lo hi per axis)")
        bounds = [tuple(args.bounds[2 * i:2 * i + 2]) for i in range(moving.dim)]
    else:
        bounds = _default_bounds(np.vstack([moving.points, fixed.points]))
    params = {**config.as_dict(), "method": args.method, "bounds": bounds, "resolution": args.resolution}
    man = io.RunManifest.start("uncertainty-map", params, _inputs(args), config.seed, argv)
    if args.method == "baseline":
        result = small_deformation_register(moving, fixed, config)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConverged)
            result = register(moving, fixed, config)
    ufield = fc_field(result, bounds, args.resolution, config)
    io.write_grid_csv(args.out, ufield)
    extra = {}
    if args.svg:
        extra["svg"] = io.write_svg(args.svg, ufield, moving.points)
    if args.jacobian:
        pitch = min((hi - lo) / (args.resolution - 1) for lo, hi in bounds)
        dets = map_jacobian_determinants(lambda x: mean_map(result, x, config), ufield.grid_points, pitch / 10)
        extra["jacobian_min"] = float(dets.min())
        extra["jacobian_nonpositive"] = int(np.sum(dets <= 0))
    payload = man.finish().as_dict()
    payload["summary"] = {"fc_min": float(ufield.fc_values.min()), "fc_max": float(ufield.fc_values.max()),
                          "converged": bool(result.converged), **extra}
    io.write_json(io.manifest_path(args.out), payload)
    print(f"wrote {ufield.fc_values.size} grid values to {args.out} "
          f"(FC range {ufield.fc_values.min():.4g} to {ufield.fc_values.max():.4g} mm^2)")


def _cmd_loo(args, argv):
    io.check_output(args.out, _inputs(args), args.force)
    config = resolve_config(args)
    man = io.RunManifest.start("loo", config.as_dict(), _inputs(args), config.seed, argv)
    moving, fixed = _pair(args)
    report = loo_validate(moving, fixed, config)
    io.write_loo_csv(args.out, report)
    payload = man.finish().as_dict()
    payload["summary"] = {"mean_pre_mm": report.mean_pre, "mean_post_mm": report.mean_post,
                          "failed": [r.label for r in report.rows if r.failed]}
    io.write_json(io.manifest_path(args.out), payload)
    print(f"loo sigma={config.sigma:g}: mean pre {report.mean_pre:.4g} mm, mean post {report.mean_post:.4g} mm")


COMMANDS = {
    "synth": _cmd_synth,
    "register": _cmd_register,
    "baseline": lambda a, v: _cmd_register(a, v, baseline=True),
    "validate-ll": _cmd_validate,
    "uncertainty-map": _cmd_uncertainty,
    "loo": _cmd_loo,
}


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args, argv)
    except (PdregError, ValueError, OSError) as exc:
        print(f"pdreg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
