"""Reference-view supervision: color, mask and depth-correlation losses.

Each public loss returns a plain float.  The ``*_terms`` helpers also return
gradients with respect to the rendered rasters so the trainer can pull them
back through :meth:`c123.scene.RenderedView.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scene import CameraPose, RenderedView, render_mask

MIN_ALPHA = 1e-3
WHITE = np.ones(3)


@dataclass
class CaseInput:
    """One reconstruction case: image, binary mask, relative depth, prompt and reference pose."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    depth: Optional[np.ndarray]  # (H, W), relative, valid where mask == 1
    prompt: str
    reference_pose: CameraPose
    category: Optional[str] = None
    name: str = "case"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError("mask and image dimensions differ")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != self.image.shape[:2]:
                raise ValueError("depth and image dimensions differ")

    @property
    def resolution(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 5.0
    mask: float = 0.5
    depth: float = 0.1

    def __post_init__(self):
        if min(self.rgb, self.mask, self.depth) < 0:
            raise ValueError("loss weights must be non-negative")


def _check_shapes(rendered, case):
    if rendered.rgb.shape != case.image.shape:
        raise ValueError(f"rendered {rendered.rgb.shape} and case {case.image.shape} dimensions differ")


def rgb_terms(rendered: RenderedView, case: CaseInput):
    """MSE of the render composited on white against the case image, with raster gradients."""
    _check_shapes(rendered, case)
    diff = rendered.on_background(WHITE) - case.image
    value = float(np.mean(diff ** 2))
    g = 2.0 * diff / diff.size
    # on_background(white) = rgb + (1 - alpha) * (1 - background)
    g_alpha = -(g @ (WHITE - rendered.background))
    return value, g, g_alpha


def rgb_loss(rendered: RenderedView, case: CaseInput) -> float:
    return rgb_terms(rendered, case)[0]


def mask_terms(rendered: RenderedView, case: CaseInput):
    _check_shapes(rendered, case)
    diff = render_mask(rendered) - case.mask
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def mask_loss(rendered: RenderedView, case: CaseInput) -> float:
    return mask_terms(rendered, case)[0]


def depth_terms(rendered: RenderedView, case: CaseInput):
    """Negative Pearson correlation over pixels valid in both mask and render.

    Returns ``(value, grad_depth, degenerate)``.  Degenerate inputs (fewer
    than two valid pixels, or a constant signal) give value 0 and no gradient.
    """
    _check_shapes(rendered, case)
    grad = np.zeros_like(rendered.depth)
    if case.depth is None:
        return 0.0, grad, True
    valid = (case.mask > 0.5) & (rendered.alpha >= MIN_ALPHA)
    if valid.sum() < 2:
        return 0.0, grad, True
    x = rendered.depth[valid]
    y = case.depth[valid]
    xc = x - x.mean()
    yc = y - y.mean()
    nx = np.sqrt(np.sum(xc ** 2))
    ny = np.sqrt(np.sum(yc ** 2))
    # relative test so that scale does not matter
    if nx <= 1e-12 * max(1.0, np.abs(x).max()) or ny <= 1e-12 * max(1.0, np.abs(y).max()):
        return 0.0, grad, True
    cov = np.sum(xc * yc)
    # no additive epsilon: the degeneracy test above keeps this finite and
    # leaves the value exactly scale-invariant
    denom = nx * ny
    rho = cov / denom
    d_rho = yc / denom - rho * xc / nx ** 2
    grad[valid] = -d_rho
    return float(-rho), grad, False


def depth_loss(rendered: RenderedView, case: CaseInput, return_flag: bool = False):
    """Negative Pearson correlation of rendered and reference depth.

    With ``return_flag`` the result is ``(value, degenerate)``.
    """
    value, _, degenerate = depth_terms(rendered, case)
    return (value, degenerate) if return_flag else value


@dataclass
class RecLoss:
    """Weighted reconstruction loss with its components and raster gradients."""

    total: float
    rgb: float
    mask: float
    depth: float
    depth_degenerate: bool
    grad_rgb: np.ndarray = field(repr=False)
    grad_alpha: np.ndarray = field(repr=False)
    grad_depth: np.ndarray = field(repr=False)

    def components(self):
        return {"rgb": self.rgb, "mask": self.mask, "depth": self.depth}


def rec_loss_terms(rendered: RenderedView, case: CaseInput, weights: LossWeights) -> RecLoss:
    l_rgb, g_rgb, g_alpha_rgb = rgb_terms(rendered, case)
    l_mask, g_mask = mask_terms(rendered, case)
    l_depth, g_depth, degenerate = depth_terms(rendered, case)
    total = weights.rgb * l_rgb + weights.mask * l_mask + weights.depth * l_depth
    return RecLoss(
        total=float(total), rgb=l_rgb, mask=l_mask, depth=l_depth, depth_degenerate=degenerate,
        grad_rgb=weights.rgb * g_rgb,
        grad_alpha=weights.rgb * g_alpha_rgb + weights.mask * g_mask,
        grad_depth=weights.depth * g_depth,
    )


def rec_loss(rendered: RenderedView, case: CaseInput, weights: LossWeights) -> float:
    return rec_loss_terms(rendered, case, weights).total
