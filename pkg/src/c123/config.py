"""``key = value`` run-configuration files.

Keys are flat and dotted by topic.  Unknown keys and malformed values are
rejected with the offending line number.  :func:`dump_config` writes every
key, so a resolved snapshot reproduces a run exactly.
"""

from __future__ import annotations

import math
from typing import Dict, Tuple

from .boundary import BoundaryConfig, detection_views
from .losses import LossWeights
from .scheduler import KINDS, ScheduleSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _float(text):
    value = float(text)
    if math.isnan(value):
        raise ValueError("NaN is not allowed")
    return value


def _optional_int(text):
    return None if text.lower() in ("none", "") else int(text)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


_W = LossWeights()
_S = ScheduleSpec()

# key -> (parser, default)
KEYS: Dict[str, Tuple] = {
    "total_iterations": (int, 10000),
    "seed": (int, 0),
    "optim.lr": (_float, 1e-3),
    "optim.beta1": (_float, 0.9),
    "optim.beta2": (_float, 0.99),
    "optim.eps": (_float, 1e-15),
    "sampling.p_ref": (_float, 0.25),
    "sampling.azimuth_min": (_float, 0.0),
    "sampling.azimuth_max": (_float, 360.0),
    "sampling.elevation_min": (_float, -10.0),
    "sampling.elevation_max": (_float, 45.0),
    "camera.radius": (_float, 3.0),
    "camera.fov": (_float, 40.0),
    "camera.ref_azimuth": (_float, 0.0),
    "camera.ref_elevation": (_float, 0.0),
    "render.resolution": (int, 64),
    "render.n_samples": (int, 96),
    "render.random_background": (_bool, True),
    "scene.grid_size": (int, 32),
    "scene.half_extent": (_float, 1.0),
    "loss.rgb": (_float, _W.rgb),
    "loss.mask": (_float, _W.mask),
    "loss.depth": (_float, _W.depth),
    "boundary.mode": (_choice("adaptive", "start", "never"), "adaptive"),
    "boundary.h": (int, 20),
    "boundary.L": (int, 5),
    "boundary.delta": (_float, 0.00025),
    "boundary.warmup_detections": (_optional_int, None),
    "boundary.signed_rate": (_bool, True),
    "boundary.elevation": (_float, 0.0),
    "schedule.kind": (_choice(*KINDS), _S.kind),
    "schedule.verbatim_eq9": (_bool, _S.verbatim_eq9),
    "schedule.clamp": (_bool, _S.clamp),
    "guidance.t_min_frac": (_float, 0.02),
    "guidance.t_max_frac": (_float, 0.98),
    "checkpoint_every": (int, 500),
    "upgrade_at": (_optional_int, None),
    "backend.2d": (str, "mock:echo"),
    "backend.3d": (str, "mock:echo"),
    "backend.embed": (str, "mock:downsample"),
}


def defaults() -> Dict:
    return {key: default for key, (_, default) in KEYS.items()}


def parse_config_text(text: str, source: str = "<config>") -> Dict:
    """Parse config text into a dict of the keys it sets."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def load_config(path) -> Dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def resolve(overrides: Dict) -> Dict:
    flat = defaults()
    for key, value in overrides.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        flat[key] = value
    return flat


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(flat: Dict) -> str:
    return "".join(f"{key} = {_format(flat[key])}\n" for key in KEYS)


def build_train_config(flat: Dict) -> TrainConfig:
    """Turn a resolved flat mapping into a :class:`TrainConfig`."""
    try:
        views = detection_views(flat["camera.radius"], flat["camera.fov"], flat["boundary.elevation"])
        boundary = BoundaryConfig(
            h=flat["boundary.h"], L=flat["boundary.L"], delta=flat["boundary.delta"], views=views,
            warmup_detections=flat["boundary.warmup_detections"], signed_rate=flat["boundary.signed_rate"],
            mode=flat["boundary.mode"],
        )
        return TrainConfig(
            total_iterations=flat["total_iterations"],
            lr=flat["optim.lr"],
            betas=(flat["optim.beta1"], flat["optim.beta2"]),
            adam_eps=flat["optim.eps"],
            p_ref=flat["sampling.p_ref"],
            resolution=flat["render.resolution"],
            n_samples=flat["render.n_samples"],
            grid_size=flat["scene.grid_size"],
            half_extent=flat["scene.half_extent"],
            radius=flat["camera.radius"],
            fov=flat["camera.fov"],
            azimuth_range=(flat["sampling.azimuth_min"], flat["sampling.azimuth_max"]),
            elevation_range=(flat["sampling.elevation_min"], flat["sampling.elevation_max"]),
            ref_azimuth=flat["camera.ref_azimuth"],
            ref_elevation=flat["camera.ref_elevation"],
            random_background=flat["render.random_background"],
            loss_weights=LossWeights(flat["loss.rgb"], flat["loss.mask"], flat["loss.depth"]),
            boundary=boundary,
            schedule=ScheduleSpec(kind=flat["schedule.kind"], verbatim_eq9=flat["schedule.verbatim_eq9"],
                                  clamp=flat["schedule.clamp"]),
            t_min_frac=flat["guidance.t_min_frac"],
            t_max_frac=flat["guidance.t_max_frac"],
            seed=flat["seed"],
            checkpoint_every=flat["checkpoint_every"],
            upgrade_at=flat["upgrade_at"],
        )
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
