"""``tgrd`` command-line interface.

Exit codes: 0 success, 2 usage error, 3 parse/schema error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import presets
from .estimators import estimate_gradient, render_forward
from .histogram import HistogramFormatError, read_histogram, to_csv, write_frame_pngs, write_histogram
from .optimize import NonFiniteGradientError, OptimizeConfig, run_adam
from .scenefile import SceneFileError, load_scene, save_scene
from .validation import FdConfig, FdError, compare, fd_gradient

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_RUNTIME = 4


class ParseError(Exception):
    pass


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("TGRD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ParseError(f"TGRD_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _scene(path: str):
    if path.startswith("preset:"):
        name = path.split(":", 1)[1]
        try:
            return presets.load_preset(name)
        except KeyError:
            raise ParseError(f"unknown preset {name!r}; available: {', '.join(presets.PRESET_NAMES)}") from None
    return load_scene(path)


def _resized(desc, args):
    if getattr(args, "width", None) or getattr(args, "height", None) or getattr(args, "frames", None):
        fr = desc.frames
        w = args.width or desc.camera.width
        h = args.height or desc.camera.height
        n = args.frames or fr.n_frames
        desc = desc.with_frames(type(fr)(n, fr.dt, fr.t0, w, h))
    return desc


def _exports(args, h):
    if getattr(args, "csv", None):
        Path(args.csv).write_text(to_csv(h, nonzero_only=True), encoding="utf-8")
    if getattr(args, "png_dir", None):
        write_frame_pngs(h, args.png_dir)


def cmd_render(args) -> int:
    desc = _resized(_scene(args.scene), args)
    spp = args.spp if args.spp is not None else desc.defaults.spp_interior
    seed = args.seed if args.seed is not None else desc.defaults.seed
    h = render_forward(desc.build(), spp=spp, seed=seed, max_depth=args.max_depth, workers=_workers(args))
    write_histogram(args.out, h)
    _exports(args, h)
    print(f"wrote {args.out}: {h.intensity.shape[0]}x{h.intensity.shape[1]}x{h.intensity.shape[2]}, spp={spp}")
    return EXIT_OK


def cmd_grad(args) -> int:
    desc = _resized(_scene(args.scene), args)
    spp_i = args.spp_interior if args.spp_interior is not None else desc.defaults.spp_interior
    spp_b = 0 if args.interior_only else (
        args.spp_boundary if args.spp_boundary is not None else desc.defaults.spp_boundary)
    seed = args.seed if args.seed is not None else desc.defaults.seed
    h = estimate_gradient(desc.build(), spp_i=spp_i, spp_b=spp_b, seed=seed, max_depth=args.max_depth,
                          workers=_workers(args), boundary=spp_b > 0)
    write_histogram(args.out, h)
    _exports(args, h)
    print(f"wrote {args.out}: d={h.d}, spp_interior={spp_i}, spp_boundary={spp_b}")
    return EXIT_OK


def cmd_fd(args) -> int:
    desc = _resized(_scene(args.scene), args)
    cfg = FdConfig(epsilon=args.epsilon, scheme=args.scheme, common_random_numbers=not args.no_crn,
                   spp=args.spp if args.spp is not None else desc.defaults.spp_interior,
                   max_depth=args.max_depth, workers=_workers(args))
    seed = args.seed if args.seed is not None else desc.defaults.seed
    h = fd_gradient(desc, cfg=cfg, seed=seed)
    write_histogram(args.out, h)
    _exports(args, h)
    print(f"wrote {args.out}: d={h.d}, scheme={cfg.scheme}, epsilon={args.epsilon}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = read_histogram(args.a)
    b = read_histogram(args.b)
    plane = args.plane if args.plane == "intensity" else int(args.plane)
    if plane != "intensity" and not (0 <= plane < min(a.d, b.d)):
        raise ParseError(f"gradient plane {plane} out of range")
    res = compare(a, b, plane)
    if args.csv:
        Path(args.csv).write_text(res.to_csv(), encoding="utf-8")
    if args.hist_csv:
        Path(args.hist_csv).write_text(res.histogram_csv(), encoding="utf-8")
    print(res.summary())
    return EXIT_OK


def _load_config(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ParseError(f"{path}: cannot read config: {exc.strerror}") from None
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else "?"
        raise ParseError(f"{path}:{line}: YAML syntax error: {exc.problem}") from None
    if not isinstance(data, dict):
        raise ParseError(f"{path}:1: optimizer config must be a mapping")
    truth = data.pop("ground_truth", None)
    base = Path(path).parent
    if data.get("target"):
        t = Path(data["target"])
        data["target"] = str(t if t.is_absolute() else base / t)
    try:
        cfg = OptimizeConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    return cfg, truth


def cmd_optimize(args) -> int:
    desc = _scene(args.scene)
    cfg, truth = _load_config(args.config)
    over = {}
    if args.trace:
        over["trace_path"] = args.trace
    if args.checkpoint:
        over["checkpoint_path"] = args.checkpoint
    if args.iterations:
        over["iterations"] = args.iterations
    over["workers"] = _workers(args)
    cfg = OptimizeConfig(**{**cfg.__dict__, **over})
    if args.resume and not cfg.checkpoint_path:
        raise ParseError("--resume needs a checkpoint path (config checkpoint_path or --checkpoint)")
    if cfg.target is None:
        raise ParseError(f"{args.config}: no target histogram given")
    target = read_histogram(cfg.target)
    try:
        trace = run_adam(desc, cfg, target, ground_truth=truth, resume=args.resume)
    except NonFiniteGradientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    final = np.asarray(trace.final_theta)
    if args.out_scene:
        save_scene(args.out_scene, desc.with_theta(final))
    if not cfg.trace_path:
        sys.stdout.write(trace.to_csv())
    print(json.dumps({"final_theta": dict(zip(trace.names, final.tolist())),
                      "iterations": len(trace.records),
                      "final_loss": trace.records[-1].loss if trace.records else None}))
    return EXIT_OK


def cmd_export(args) -> int:
    h = read_histogram(args.file)
    _exports(args, h)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgrd", description="Differentiable transient rendering.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, spp=True):
        sp.add_argument("scene", help="scene YAML path or preset:NAME")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--max-depth", type=int, dest="max_depth")
        sp.add_argument("--workers", type=int, help="worker processes (default: TGRD_THREADS or CPU count)")
        sp.add_argument("--width", type=int)
        sp.add_argument("--height", type=int)
        sp.add_argument("--frames", type=int)
        sp.add_argument("--out", required=True)
        sp.add_argument("--csv", help="also export non-zero bins as CSV")
        sp.add_argument("--png-dir", dest="png_dir", help="also export one PNG per frame")
        if spp:
            sp.add_argument("--spp", type=int)

    r = sub.add_parser("render", help="forward transient render")
    common(r)
    r.set_defaults(fn=cmd_render)

    g = sub.add_parser("grad", help="intensity plus gradient planes")
    common(g, spp=False)
    g.add_argument("--spp-interior", type=int, dest="spp_interior")
    g.add_argument("--spp-boundary", type=int, dest="spp_boundary")
    g.add_argument("--interior-only", action="store_true", dest="interior_only")
    g.set_defaults(fn=cmd_grad)

    f = sub.add_parser("fd", help="finite-difference gradient")
    common(f)
    f.add_argument("--epsilon", type=float, default=0.01)
    f.add_argument("--scheme", choices=("central", "forward"), default="central")
    f.add_argument("--no-crn", action="store_true", dest="no_crn", help="independent seeds per render")
    f.set_defaults(fn=cmd_fd)

    c = sub.add_parser("compare", help="metrics between two histogram files")
    c.add_argument("a")
    c.add_argument("b", help="reference")
    c.add_argument("--plane", default="intensity", help="'intensity' or a gradient index")
    c.add_argument("--csv", help="per-frame metrics CSV")
    c.add_argument("--hist-csv", dest="hist_csv", help="difference histogram CSV")
    c.set_defaults(fn=cmd_compare)

    o = sub.add_parser("optimize", help="ADAM inverse rendering")
    o.add_argument("scene")
    o.add_argument("config", help="optimizer YAML (OptimizeConfig fields, target, ground_truth)")
    o.add_argument("--resume", action="store_true")
    o.add_argument("--trace")
    o.add_argument("--checkpoint")
    o.add_argument("--iterations", type=int)
    o.add_argument("--workers", type=int)
    o.add_argument("--out-scene", dest="out_scene")
    o.set_defaults(fn=cmd_optimize)

    e = sub.add_parser("export", help="CSV/PNG export of a histogram file")
    e.add_argument("file")
    e.add_argument("--csv")
    e.add_argument("--png-dir", dest="png_dir")
    e.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (SceneFileError, HistogramFormatError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except FdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
