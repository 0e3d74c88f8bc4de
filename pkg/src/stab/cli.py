"""Command line entry point: ``stab synth | stabilize | evaluate | default-spec``.

Exit codes:
    0  success
    1  unexpected failure (I/O and the like)
    2  invalid scene spec or run configuration
    3  bundle failed to load or validate
    4  degenerate rotation while smoothing
    5  stabilized output and bundle have different lengths
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from stab.errors import ConfigError, DegenerateRotation, LengthMismatch, SpecError, StabError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_SPEC = 2
EXIT_BUNDLE = 3
EXIT_ROTATION = 4
EXIT_LENGTH = 5

log = logging.getLogger("stab")


class CommandError(Exception):
    def __init__(self, code: int, exc: BaseException):
        super().__init__(str(exc))
        self.code = code
        self.exc = exc


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    print(f"stab: error code={code} kind={type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def _load_bundle(path):
    from stab.bundle import load_bundle

    try:
        return load_bundle(path)
    except (StabError, OSError, ValueError) as exc:
        raise CommandError(EXIT_BUNDLE, exc) from exc


def cmd_synth(args) -> int:
    from stab.bundle import save_bundle
    from stab.synth import SceneSpec, generate_scene

    spec_path = Path(args.spec)
    try:
        spec = SceneSpec.load(spec_path)
    except (OSError, SpecError, ValueError, TypeError, KeyError) as exc:
        raise CommandError(EXIT_SPEC, exc) from exc
    out = Path(args.out) if args.out else spec_path.with_name(spec_path.stem + "_bundle")
    bundle, _ = generate_scene(spec)
    save_bundle(bundle, out)
    log.info("wrote %d-frame bundle to %s", bundle.n_frames, out)
    return EXIT_OK


def cmd_default_spec(args) -> int:
    from stab.synth import default_spec, mover_spec

    spec = mover_spec(seed=args.seed) if args.movers else default_spec(seed=args.seed)
    spec.save(args.path)
    return EXIT_OK


_CONFIG_FLAGS = {
    "sigma": "sigma",
    "radius": "radius",
    "tau": "tau",
    "window": "window_n",
    "splat_radius": "splat_radius",
    "render_model": "render_model",
    "seed": "seed",
    "mask_dilate": "mask_dilate",
    "diagnostics": "emit_diagnostics",
}


def build_config(args):
    from stab.pipeline import RunConfig

    values = {}
    if args.config:
        values.update(RunConfig.load(args.config).__dict__)
    for flag, key in _CONFIG_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    return RunConfig.from_dict(values)


def cmd_stabilize(args) -> int:
    from stab.pipeline import stabilize, write_stabilized

    try:
        cfg = build_config(args)
    except ConfigError as exc:
        raise CommandError(EXIT_SPEC, exc) from exc
    bundle = _load_bundle(args.bundle)
    out = Path(args.out) if args.out else Path(str(Path(args.bundle)).rstrip("/") + "_stabilized")
    try:
        result = stabilize(bundle, cfg)
    except DegenerateRotation as exc:
        raise CommandError(EXIT_ROTATION, exc) from exc
    write_stabilized(result, out, cfg)
    filled = sum(r.spatial_filled for r in result.reports)
    log.info("wrote %d stabilized frames to %s (%d pixels filled spatially)", len(result.frames), out, filled)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from stab.pipeline import evaluate, read_sequence

    bundle = _load_bundle(args.bundle)
    try:
        seq = read_sequence(args.out)
        report = evaluate(bundle, seq, seed=args.seed)
    except LengthMismatch as exc:
        raise CommandError(EXIT_LENGTH, exc) from exc
    report_path = Path(args.report) if args.report else Path(args.out) / "report.json"
    report_path.write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    log.info(
        "cropping=%s stability=%s ese=%s we=%s",
        report.cropping,
        report.stability,
        report.ese,
        report.we,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stab", description="Geometric video stabilization from reconstruction bundles.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bundle from a scene spec")
    p.add_argument("spec", help="scene spec JSON (synth.json)")
    p.add_argument("-o", "--out", help="bundle directory (default: <spec stem>_bundle next to the spec)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("default-spec", help="write the stock scene spec as JSON")
    p.add_argument("path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--movers", action="store_true", help="use the scene with a moving panel")
    p.set_defaults(func=cmd_default_spec)

    p = sub.add_parser("stabilize", help="stabilize a bundle")
    p.add_argument("bundle")
    p.add_argument("-o", "--out", help="output directory (default: <bundle>_stabilized)")
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--sigma", type=float, help="Gaussian bandwidth in frames (default 8)")
    p.add_argument("--radius", type=int, help="smoothing radius in frames (default ceil(3 sigma))")
    p.add_argument("--tau", type=float, help="flow residual threshold in pixels (default 2)")
    p.add_argument("--window", type=int, help="static point window half-width n (default 3)")
    p.add_argument("--splat-radius", type=int, dest="splat_radius", help="splat half-size in pixels (default 1)")
    p.add_argument("--render-model", choices=["perspective", "fisheye", "equirectangular"], dest="render_model")
    p.add_argument("--seed", type=int)
    p.add_argument("--mask-dilate", dest="mask_dilate", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--diagnostics", action=argparse.BooleanOptionalAction, default=None, help="dump combined masks")
    p.set_defaults(func=cmd_stabilize)

    p = sub.add_parser("evaluate", help="compute metrics of a stabilized output")
    p.add_argument("bundle")
    p.add_argument("out", help="stabilized output directory (or a bundle directory)")
    p.add_argument("--report", help="report path (default: <out>/report.json)")
    p.add_argument("--seed", type=int, default=0, help="seed of the robust F estimation")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        return _fail(exc.code, exc.exc)
    except (StabError, OSError) as exc:
        return _fail(EXIT_FAILURE, exc)


if __name__ == "__main__":
    sys.exit(main())
