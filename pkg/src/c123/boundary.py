"""Deciding when structure-only optimization has plateaued.

Every ``h`` iterations the scene is rendered from a fixed ring of views and
scored against the prompt with an embedding model.  The sliding-window mean
of relative score increments is compared with a threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Protocol, Sequence, Tuple

import numpy as np

from .errors import BackendError, NotReadyError, NumericError
from .scene import CameraPose, SceneModel, pose_from_spherical, render

DETECTION_AZIMUTHS = (0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0)


class EmbeddingModel(Protocol):
    dimension: int

    def embed_image(self, raster: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def detection_views(radius=3.0, fov=40.0, elevation=0.0, azimuths=DETECTION_AZIMUTHS) -> List[CameraPose]:
    return [pose_from_spherical(a, elevation, radius, fov) for a in azimuths]


@dataclass
class BoundaryConfig:
    h: int = 20
    L: int = 5
    delta: float = 0.00025
    views: List[CameraPose] = field(default_factory=detection_views)
    warmup_detections: int = None
    signed_rate: bool = True
    # "adaptive" uses the detector; "start" switches before the first step; "never" stays in stage 1
    mode: str = "adaptive"

    def __post_init__(self):
        if self.warmup_detections is None:
            self.warmup_detections = self.L + 1
        if self.h < 1 or self.L < 1:
            raise ValueError("h and L must be at least 1")
        if not (self.delta > 0 or self.delta == -math.inf):
            raise ValueError("delta must be positive (or -inf to disable)")
        if not self.views:
            raise ValueError("at least one detection view is required")
        if self.mode not in ("adaptive", "start", "never"):
            raise ValueError(f"unknown boundary mode {self.mode!r}")


@dataclass
class SimilarityHistory:
    entries: List[Tuple[int, float]] = field(default_factory=list)

    def append(self, k: int, score: float) -> None:
        if self.entries and k <= self.entries[-1][0]:
            raise ValueError("detection indices must be strictly increasing")
        self.entries.append((int(k), float(score)))

    @property
    def scores(self) -> List[float]:
        return [s for _, s in self.entries]

    def __len__(self):
        return len(self.entries)

    @classmethod
    def from_scores(cls, scores: Sequence[float], start: int = 1) -> "SimilarityHistory":
        return cls([(start + i, float(s)) for i, s in enumerate(scores)])


def _unit(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    return v / np.linalg.norm(v)


def multiview_similarity(scene: SceneModel, prompt: str, cfg: BoundaryConfig, model: EmbeddingModel,
                         resolution: int = 64, n_samples=None) -> float:
    """Mean cosine between each detection-view render and the prompt embedding."""
    kwargs = {} if n_samples is None else {"n_samples": n_samples}
    renders = [render(scene, pose, resolution, background=1.0, keep_tape=False, **kwargs).rgb
               for pose in cfg.views]
    try:
        text = _unit(model.embed_text(prompt))
        scores = [float(_unit(model.embed_image(rgb)) @ text) for rgb in renders]
    except Exception as exc:
        raise BackendError(f"embedding model failed: {exc}") from exc
    return float(np.mean(scores))


def changing_rate(history, L: int) -> float:
    """Mean relative increment of the score over the last ``L`` consecutive pairs."""
    scores = history.scores if isinstance(history, SimilarityHistory) else list(history)
    if len(scores) < L + 1:
        raise NotReadyError(f"need {L + 1} scores, have {len(scores)}")
    window = scores[-(L + 1):]
    total = 0.0
    for prev, cur in zip(window[:-1], window[1:]):
        if prev == 0:
            raise NumericError("zero similarity in rate window", flag="similarity-degenerate")
        total += (cur - prev) / prev
    return total / L


def should_transition(history, cfg: BoundaryConfig) -> bool:
    if len(history) < max(cfg.warmup_detections, cfg.L + 1):
        return False
    try:
        rate = changing_rate(history, cfg.L)
    except NotReadyError:
        return False
    if not cfg.signed_rate:
        rate = abs(rate)
    return rate < cfg.delta
