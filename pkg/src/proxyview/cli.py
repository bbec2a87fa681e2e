"""Command line entry point: integrate, mesh, render, schedule and demo subcommands.

Exit codes: 0 success, 2 usage or validation error, 3 solver error, 4 I/O error.
Every option may also come from a JSON file given with ``--config``; keys are
option names with dashes or underscores, and flags on the command line win.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import imagegeo, integrate, pipeline, render, schedule, surface

log = logging.getLogger("proxyview")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _color(text) -> tuple:
    named = {"white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0)}
    if isinstance(text, (list, tuple)):
        values = [float(v) for v in text]
    elif str(text).lower() in named:
        return named[str(text).lower()]
    else:
        values = _floats(text)
    if len(values) != 3 or not all(0.0 <= v <= 1.0 for v in values):
        raise argparse.ArgumentTypeError(f"background must be white, black or r,g,b in [0,1], got {text!r}")
    return tuple(values)


# subcommand -> (flag, type, default, required, help)
_OPTIONS = {
    "integrate": [
        ("--normals", str, None, True, "normal map (3-channel PFM)"),
        ("--mask", str, None, True, "foreground mask (PNG)"),
        ("--depth", str, None, False, "optional depth map (PFM) used as warm start"),
        ("--out", str, None, True, "output depth map (PFM)"),
        ("--k", float, 2.0, False, "bilateral stiffness"),
        ("--iters", int, 100, False, "maximum IRLS iterations"),
        ("--outer-tol", float, 1e-5, False, "relative energy change to stop"),
        ("--cg-tol", float, 1e-7, False, "CG relative residual"),
        ("--cg-max-iters", int, 5000, False, "CG iteration limit"),
        ("--nz-floor", float, 1e-4, False, "lower bound for nz in gradient conversion"),
        ("--mask-threshold", float, 0.5, False, "mask foreground threshold"),
    ],
    "mesh": [
        ("--depth", str, None, True, "depth map (PFM)"),
        ("--mask", str, None, True, "foreground mask (PNG)"),
        ("--out", str, None, True, "output mesh (OBJ)"),
        ("--pixel-size", float, 1.0, False, "scene units per pixel"),
        ("--mask-threshold", float, 0.5, False, "mask foreground threshold"),
    ],
    "render": [
        ("--mesh", str, None, True, "mesh (OBJ)"),
        ("--azimuths", _floats, list(render.DEFAULT_AZIMUTHS), False, "comma-separated azimuths in degrees"),
        ("--elevation", float, render.DEFAULT_ELEVATION, False, "elevation in degrees"),
        ("--size", int, 320, False, "image width and height"),
        ("--bg", _color, "white", False, "background: white, black or r,g,b"),
        ("--projection", str, "orthographic", False, "orthographic or perspective"),
        ("--color-space", str, "camera", False, "camera or world normals"),
        ("--input-azimuth", float, render.INPUT_AZIMUTH, False, "azimuth of the view the mesh was built from"),
        ("--input-elevation", float, render.INPUT_ELEVATION, False, "elevation of that view"),
        ("--out-dir", str, None, True, "directory for view_<azimuth>.png"),
    ],
    "schedule": [
        ("--T", int, 1000, False, "total diffusion steps (even)"),
        ("--lambda-max", float, 0.3, False, "geometry weight at t = T"),
        ("--lambda-min", float, 1e-5, False, "geometry weight at t = T/2"),
        ("--out", str, None, True, "output CSV"),
    ],
    "demo": [
        ("--image", str, None, True, "input view (PNG)"),
        ("--text", str, "", False, "prompt text"),
        ("--normals", str, None, True, "normal map of the input view (PFM)"),
        ("--mask", str, None, True, "foreground mask (PNG)"),
        ("--depth", str, None, False, "optional depth map (PFM)"),
        ("--out-dir", str, None, True, "output directory"),
        ("--seed", int, 0, False, "sampling seed"),
        ("--T", int, 50, False, "diffusion steps"),
        ("--latent-size", int, 40, False, "latent resolution (multiple of 8)"),
        ("--size", int, 320, False, "geometry image resolution"),
        ("--k", float, 2.0, False, "bilateral stiffness"),
        ("--iters", int, 100, False, "maximum IRLS iterations"),
        ("--lambda-max", float, 0.3, False, "geometry weight at t = T"),
        ("--lambda-min", float, 1e-5, False, "geometry weight at t = T/2"),
        ("--lambda-override", float, None, False, "constant geometry weight instead of the schedule"),
        ("--no-clamp", bool, False, False, "allow negative cosine view masks"),
        ("--input-azimuth", float, render.INPUT_AZIMUTH, False, "azimuth of the input view"),
        ("--input-elevation", float, render.INPUT_ELEVATION, False, "elevation of the input view"),
    ],
}

_INPUTS = {"normals", "mask", "depth", "mesh", "image"}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proxyview", description="Geometry-guided multi-view generation toolkit")
    parser.add_argument("--config", help="JSON file with option values")
    parser.add_argument("--json-log", action="store_true", help="one JSON object per completed stage on stderr")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    parser.subcommands = {}
    for name, options in _OPTIONS.items():
        sp = sub.add_parser(name, help=f"{name} subcommand")
        parser.subcommands[name] = sp
        for flag, typ, default, required, help_text in options:
            req = " (required)" if required else f" (default: {default})"
            if typ is bool:
                sp.add_argument(flag, action="store_true", default=None, help=help_text)
            else:
                sp.add_argument(flag, type=typ, default=None, help=help_text + req)
    return parser


def _coerce(typ, raw, dest: str):
    try:
        if typ is bool:
            if not isinstance(raw, bool):
                raise TypeError("expected true or false")
            return raw
        if typ is _floats and isinstance(raw, (list, tuple)):
            return [float(v) for v in raw]
        if typ is int and isinstance(raw, float) and not raw.is_integer():
            raise TypeError(f"expected an integer, got {raw}")
        return typ(raw)
    except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad config value for {dest}: {exc}") from exc


def _resolve(command: str, args: argparse.Namespace, config: dict) -> dict:
    options = _OPTIONS[command]
    known = {_dest(flag): (typ, default, required) for flag, typ, default, required, _ in options}
    cfg = {k.replace("-", "_"): v for k, v in config.items()}
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    values = {}
    for dest, (typ, default, required) in known.items():
        value = getattr(args, dest)
        if value is None and cfg.get(dest) is not None:
            value = _coerce(typ, cfg[dest], dest)
        if value is None:
            if required:
                raise UsageError(f"missing required option --{dest.replace('_', '-')}")
            value = typ(default) if typ is _color else default
        values[dest] = value
    return values


def _check_paths(values: dict) -> None:
    for key in _INPUTS:
        path = values.get(key)
        if path is not None and not Path(path).is_file():
            raise FileNotFoundError(f"input file not found: {path}")
    for key in ("out",):
        if values.get(key) is not None:
            parent = Path(values[key]).resolve().parent
            if not parent.is_dir():
                raise FileNotFoundError(f"output directory does not exist: {parent}")
    if values.get("out_dir") is not None:
        Path(values["out_dir"]).mkdir(parents=True, exist_ok=True)


class _Stages:
    def __init__(self, json_log: bool):
        self.json_log = json_log
        self.t0 = time.perf_counter()

    def done(self, stage: str, **info) -> None:
        record = {"stage": stage, "elapsed_s": round(time.perf_counter() - self.t0, 6), **info}
        if self.json_log:
            print(json.dumps(record, sort_keys=True), file=sys.stderr, flush=True)
        else:
            log.info("%s done %s", stage, info)


def _integration_config(v: dict) -> integrate.IntegrationConfig:
    return integrate.IntegrationConfig(
        stiffness_k=v["k"], max_outer_iters=v["iters"],
        outer_tol=v.get("outer_tol", 1e-5), cg_tol=v.get("cg_tol", 1e-7),
        cg_max_iters=v.get("cg_max_iters", 5000), nz_floor=v.get("nz_floor", 1e-4),
    )


def _load_inputs(v: dict):
    mask = imagegeo.load_mask(v["mask"], v.get("mask_threshold", 0.5))
    normals = imagegeo.load_pfm(v["normals"], mask)
    if not isinstance(normals, imagegeo.NormalMap):
        raise imagegeo.ValidationError(f"{v['normals']} is a 1-channel PFM, expected normals")
    depth = None
    if v.get("depth"):
        depth = imagegeo.load_pfm(v["depth"])
        if not isinstance(depth, imagegeo.DepthMap):
            raise imagegeo.ValidationError(f"{v['depth']} is a 3-channel PFM, expected depth")
    return mask, normals, depth


def _cmd_integrate(v: dict, stages: _Stages) -> None:
    mask, normals, depth = _load_inputs(v)
    stages.done("load", foreground=mask.count)
    result = integrate.bilateral_integration(normals, mask, _integration_config(v), depth)
    stages.done("integrate", iterations=result.iterations, energy=result.energies[-1])
    imagegeo.save_pfm(result.depth, v["out"])
    stages.done("write", path=v["out"])


def _cmd_mesh(v: dict, stages: _Stages) -> None:
    mask = imagegeo.load_mask(v["mask"], v["mask_threshold"])
    depth = imagegeo.load_pfm(v["depth"])
    if not isinstance(depth, imagegeo.DepthMap):
        raise imagegeo.ValidationError(f"{v['depth']} is a 3-channel PFM, expected depth")
    depth.check_foreground(mask)
    mesh = surface.heightfield_to_mesh(depth, mask, v["pixel_size"])
    stages.done("mesh", vertices=len(mesh.vertices), triangles=len(mesh.triangles))
    surface.save_obj(mesh, v["out"])
    stages.done("write", path=v["out"])


def _view_name(prefix: str, azimuth: float) -> str:
    return f"{prefix}_{azimuth:g}.png"


def _render_views(mesh, azimuths, elevation, rcfg, input_pose, projection, out_dir, stages):
    images = render.render_multiview(mesh, azimuths, elevation, rcfg, input_pose, projection)
    for az, img in zip(azimuths, images):
        path = Path(out_dir) / _view_name("view", az)
        imagegeo.save_png(img, path)
        stages.done("render", azimuth=az, path=str(path))
    return images


def _cmd_render(v: dict, stages: _Stages) -> None:
    if v["projection"] not in ("orthographic", "perspective"):
        raise UsageError("--projection must be orthographic or perspective")
    if v["color_space"] not in ("camera", "world"):
        raise UsageError("--color-space must be camera or world")
    if not v["azimuths"]:
        raise UsageError("--azimuths needs at least one value")
    if v["size"] <= 0:
        raise UsageError("--size must be positive")
    mesh = surface.load_obj(v["mesh"])
    stages.done("load", vertices=len(mesh.vertices), triangles=len(mesh.triangles))
    rcfg = render.RenderConfig(v["size"], v["size"], tuple(v["bg"]), v["color_space"])
    input_pose = render.CameraPose(v["input_azimuth"], v["input_elevation"])
    _render_views(mesh, v["azimuths"], v["elevation"], rcfg, input_pose, v["projection"], v["out_dir"], stages)


def _cmd_schedule(v: dict, stages: _Stages) -> None:
    try:
        params = schedule.ScheduleParams(v["T"], v["lambda_max"], v["lambda_min"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    schedule.dump_schedule(params, v["out"])
    stages.done("schedule", rows=params.total_steps_T + 1, path=v["out"])


def _cmd_demo(v: dict, stages: _Stages) -> None:
    out = Path(v["out_dir"])
    try:
        scfg = pipeline.SamplerConfig(
            T=v["T"], seed=v["seed"], latent_size=v["latent_size"],
            lambda_max=v["lambda_max"], lambda_min=v["lambda_min"],
            clamp_negative_cos=not v["no_clamp"], lambda_override=v["lambda_override"],
        )
        sparams = scfg.schedule
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if v["size"] <= 0:
        raise UsageError("--size must be positive")
    image = imagegeo.load_png(v["image"])
    mask, normals, depth = _load_inputs(v)
    stages.done("load", foreground=mask.count)

    result = integrate.bilateral_integration(normals, mask, _integration_config(v), depth)
    imagegeo.save_pfm(result.depth, out / "depth.pfm")
    stages.done("integrate", iterations=result.iterations, energy=result.energies[-1])
    mesh = surface.heightfield_to_mesh(result.depth, mask)
    surface.save_obj(mesh, out / "mesh.obj")
    stages.done("mesh", vertices=len(mesh.vertices), triangles=len(mesh.triangles))

    input_pose = render.CameraPose(v["input_azimuth"], v["input_elevation"])
    azimuths = list(render.DEFAULT_AZIMUTHS)
    rcfg = render.RenderConfig(v["size"], v["size"])
    geo_images = _render_views(mesh, azimuths, render.DEFAULT_ELEVATION, rcfg, input_pose, "orthographic", out, stages)

    schedule.dump_schedule(sparams, out / "schedule.csv")
    stages.done("schedule", rows=sparams.total_steps_T + 1)

    poses = [render.CameraPose(a, render.DEFAULT_ELEVATION) for a in azimuths]
    trace = pipeline.SamplingTrace()
    samples = pipeline.sample_multiview(image, v["text"], geo_images, poses, input_pose, scfg, trace)
    for az, img in zip(azimuths, samples):
        imagegeo.save_png(img, out / _view_name("sample", az))
    report = {
        "seed": scfg.seed,
        "T": scfg.T,
        "views": [
            {
                "azimuth": vt.azimuth_deg,
                "elevation": vt.elevation_deg,
                "delta_theta": vt.delta_theta,
                "mask_scale": vt.mask_scale,
                "steps": vt.steps,
                "scheduled_lambda": vt.scheduled_lambda,
                "applied_lambda": vt.applied_lambda,
                "geo_checksums": vt.geo_checksums,
            }
            for vt in trace.views
        ],
    }
    (out / "trace.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    stages.done("sample", views=len(samples))


_COMMANDS = {
    "integrate": _cmd_integrate,
    "mesh": _cmd_mesh,
    "render": _cmd_render,
    "schedule": _cmd_schedule,
    "demo": _cmd_demo,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = {}
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                config = json.load(fh)
            if not isinstance(config, dict):
                raise UsageError("config file must hold a JSON object")
        values = _resolve(args.command, args, config)
        _check_paths(values)
        _COMMANDS[args.command](values, _Stages(args.json_log))
    except UsageError as exc:
        parser.subcommands[args.command].print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (imagegeo.ValidationError, pipeline.ValidationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except integrate.SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, imagegeo.FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # invalid parameter combinations rejected by the config types
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(run())
