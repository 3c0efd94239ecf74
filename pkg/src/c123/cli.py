"""Command-line entry point: ``c123 reconstruct | render | evaluate``.

Exit codes: 0 success, 2 invalid case/config/input, 3 backend failure,
4 numeric abort.  ``C123_LOG=debug|info`` sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from PIL import Image

from . import config as configmod
from .cases import CaseError, load_case, to_uint8
from .embedding import DownsampleEmbedding
from .errors import BackendError, NumericError
from .evalkit import evaluate_dataset, write_report
from .guidance import EchoBackend, OracleBackend
from .ipc import IPCClient, IPCEmbedding, IPCNoisePredictor, IPCPerceptual
from .scene import load_scene, pose_from_spherical, render
from .trainer import Backends, run

EXIT_OK, EXIT_INVALID, EXIT_BACKEND, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("c123")


def _parse_spec(spec: str):
    """Split ``scheme:name=value,key=value`` into (scheme, name, value, options)."""
    scheme, sep, rest = spec.partition(":")
    if not sep:
        raise ValueError(f"backend spec {spec!r} lacks a scheme (mock: or ipc:)")
    if scheme == "ipc":
        return scheme, rest, None, {}
    parts = rest.split(",")
    name, _, value = parts[0].partition("=")
    options = {}
    for part in parts[1:]:
        k, eq, v = part.partition("=")
        if not eq:
            raise ValueError(f"malformed option {part!r} in {spec!r}")
        options[k] = v
    return scheme, name, value or None, options


def make_guidance_backend(spec: str, n_samples=None):
    scheme, name, value, options = _parse_spec(spec)
    if scheme == "ipc":
        return IPCNoisePredictor(IPCClient(name))
    if scheme == "mock" and name == "echo":
        return EchoBackend()
    if scheme == "mock" and name == "oracle":
        if not value:
            raise ValueError("mock:oracle needs a checkpoint: mock:oracle=<ckpt>")
        kappa = float(options.pop("kappa", 1.0))
        if options:
            raise ValueError(f"unknown oracle options {sorted(options)}")
        return OracleBackend(load_scene(value), kappa=kappa, n_samples=n_samples)
    raise ValueError(f"unknown guidance backend spec {spec!r}")


def make_embedding_model(spec: str, target=None):
    scheme, name, _, _ = _parse_spec(spec)
    if scheme == "ipc":
        return IPCEmbedding(IPCClient(name))
    if scheme == "mock" and name == "downsample":
        return DownsampleEmbedding(target)
    raise ValueError(f"unknown embedding spec {spec!r}")


def make_perceptual(spec: str):
    scheme, name, _, _ = _parse_spec(spec)
    if scheme == "ipc":
        return IPCPerceptual(IPCClient(name))
    raise ValueError(f"unknown perceptual spec {spec!r}")


def _load_flat(path, overrides):
    flat = configmod.resolve(configmod.load_config(path) if path else {})
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return flat


def cmd_reconstruct(args) -> int:
    try:
        flat = _load_flat(args.config, {"seed": args.seed, "backend.2d": args.backend_2d,
                                        "backend.3d": args.backend_3d, "backend.embed": args.embed})
        cfg = configmod.build_train_config(flat)
        case = load_case(args.case, cfg.reference_pose())
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(configmod.dump_config(flat), encoding="utf-8")
    try:
        backends = Backends(
            guidance_3d=make_guidance_backend(flat["backend.3d"], cfg.n_samples),
            guidance_2d=make_guidance_backend(flat["backend.2d"], cfg.n_samples),
            embedding=make_embedding_model(flat["backend.embed"], target=case.image),
        )
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        result = run(case, cfg, backends, out_dir=out)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("done; transition at %s", result.transition_iteration)
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        flat = _load_flat(args.config, {})
        scene = load_scene(args.checkpoint)
    except (ValueError, OSError) as exc:
        print(f"error: cannot read checkpoint: {exc}", file=sys.stderr)
        return EXIT_INVALID
    resolution = args.resolution or flat["render.resolution"]
    n_samples = args.n_samples or flat["render.n_samples"]
    try:
        pose = pose_from_spherical(args.azimuth, args.elevation, args.radius or flat["camera.radius"],
                                   args.fov or flat["camera.fov"])
        view = render(scene, pose, resolution, background=1.0, n_samples=n_samples, keep_tape=False)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    Image.fromarray(to_uint8(view.rgb), mode="RGB").save(args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        flat = _load_flat(args.config, {})
        model = make_embedding_model(args.embed)
        perceptual = make_perceptual(args.perceptual) if args.perceptual else None
        ref_pose = pose_from_spherical(flat["camera.ref_azimuth"], flat["camera.ref_elevation"],
                                       flat["camera.radius"], flat["camera.fov"])
        report = evaluate_dataset(args.results, args.cases, model, ref_pose, perceptual)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ValueError, OSError, CaseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out) if args.out else Path(args.results) / "report"
    write_report(report, out.with_suffix(".json"), out.with_suffix(".csv"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c123", description="Two-stage single-image 3D reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="optimize a scene for one case directory")
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--backend-2d", dest="backend_2d")
    p.add_argument("--backend-3d", dest="backend_3d")
    p.add_argument("--embed", help="embedding model for boundary detection (default mock:downsample)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("render", help="render a checkpoint from one pose onto white")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--azimuth", type=float, required=True)
    p.add_argument("--elevation", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="take radius, fov, resolution and samples from a run config")
    p.add_argument("--radius", type=float)
    p.add_argument("--fov", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="score result directories against their cases")
    p.add_argument("--results", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--embed", required=True)
    p.add_argument("--perceptual")
    p.add_argument("--config")
    p.add_argument("--out", help="report path prefix (default <results>/report)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("C123_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
