"""Score-distillation gradients from text- and pose-conditioned noise predictors.

A backend only has to predict noise.  The SDS gradient is the residual
``eps_hat - eps`` injected directly as the image-space gradient, never
obtained by differentiating through the backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .errors import BackendError, NumericError
from .scene import CameraPose, RenderedView, SceneModel, render

TEXT = "TEXT"
IMAGE_POSE = "IMAGE_POSE"


def linear_alphas_cumprod(num_steps=1000, beta_start=1e-4, beta_end=0.02):
    """Cumulative signal coefficients of the standard linear beta schedule."""
    return np.cumprod(1.0 - np.linspace(beta_start, beta_end, num_steps))


@dataclass
class Conditioning:
    """What a noise predictor is conditioned on.

    ``hints`` carries in-process extras (clean latent, injected noise, camera
    pose, background) that only test doubles read.  They never go over IPC.
    """

    kind: str
    text: Optional[str] = None
    image: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    T: Optional[np.ndarray] = None
    hints: dict = field(default_factory=dict, repr=False)


class NoisePredictor(Protocol):
    num_steps: int
    alphas_cumprod: np.ndarray

    def predict_noise(self, z_t: np.ndarray, condition: Conditioning, t_diff: int) -> np.ndarray: ...

    def encode(self, rgb: np.ndarray) -> np.ndarray: ...

    def pullback(self, rgb: np.ndarray, grad_latent: np.ndarray) -> np.ndarray: ...


class IdentityLatentBackend:
    """Base for backends whose latent space is the rgb raster itself."""

    source = None

    def __init__(self, num_steps=1000):
        self.num_steps = num_steps
        self.alphas_cumprod = linear_alphas_cumprod(num_steps)

    def encode(self, rgb):
        return np.asarray(rgb, dtype=np.float64)

    def pullback(self, rgb, grad_latent):
        return grad_latent

    def alpha_bar(self, t_diff):
        return float(self.alphas_cumprod[t_diff - 1])


class EchoBackend(IdentityLatentBackend):
    """Returns exactly the injected noise, so every SDS gradient is zero."""

    def predict_noise(self, z_t, condition, t_diff):
        return np.array(condition.hints["noise"], copy=True)


class OffsetBackend(IdentityLatentBackend):
    """Injected noise plus a fixed offset raster (or a callable of the clean latent)."""

    def __init__(self, offset, num_steps=1000):
        super().__init__(num_steps)
        self.offset = offset

    def predict_noise(self, z_t, condition, t_diff):
        z = condition.hints["latent"]
        offset = self.offset(z) if callable(self.offset) else self.offset
        return condition.hints["noise"] + offset


class OracleBackend(IdentityLatentBackend):
    """Pose-aware test double whose residual points at a hidden target scene.

    Predicted noise is ``noise + kappa * (z - z_target(pose))`` where
    ``z_target`` is the target rendered from the queried pose over the same
    background as the query.
    """

    source = "ORACLE"

    def __init__(self, target: SceneModel, kappa=1.0, n_samples=None, num_steps=1000):
        super().__init__(num_steps)
        self.target = target
        self.kappa = float(kappa)
        self.n_samples = n_samples

    def target_latent(self, pose: CameraPose, resolution: int, background) -> np.ndarray:
        kwargs = {} if self.n_samples is None else {"n_samples": self.n_samples}
        view = render(self.target, pose, resolution, background=background, keep_tape=False, **kwargs)
        return self.encode(view.rgb)

    def predict_noise(self, z_t, condition, t_diff):
        hints = condition.hints
        z = hints["latent"]
        noise = hints["noise"]
        if self.kappa == 0.0:
            return np.array(noise, copy=True)
        target = self.target_latent(hints["pose"], z.shape[0], hints.get("background", 1.0))
        return noise + self.kappa * (z - target)


def make_oracle_backend(target: SceneModel, kappa=1.0, n_samples=None) -> OracleBackend:
    return OracleBackend(target, kappa=kappa, n_samples=n_samples)


class CallCounter:
    """Wraps a backend and counts ``predict_noise`` calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def predict_noise(self, z_t, condition, t_diff):
        self.calls += 1
        return self.inner.predict_noise(z_t, condition, t_diff)


@dataclass
class GuidanceGradient:
    """Image-space SDS residual ``eps_hat - eps`` and its timestep weight.

    ``grad`` is unweighted; :attr:`weighted` applies ``weight``.
    """

    grad: np.ndarray
    weight: float
    t_diff: int
    source: str

    @property
    def weighted(self) -> np.ndarray:
        return self.weight * self.grad


@dataclass
class DiffusionStepSampler:
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98

    def __post_init__(self):
        if not 0.0 < self.t_min_frac < self.t_max_frac < 1.0:
            raise ValueError("need 0 < t_min_frac < t_max_frac < 1")

    def bounds(self, num_steps):
        lo = max(1, math.ceil(self.t_min_frac * num_steps))
        hi = max(lo, math.floor(self.t_max_frac * num_steps))
        return lo, hi

    def sample(self, rng: np.random.Generator, num_steps: int) -> int:
        lo, hi = self.bounds(num_steps)
        return int(rng.integers(lo, hi + 1))


def unit_weighting(t_diff):
    return 1.0


def _sds(view, condition, backend, t_diff, noise, weighting, source):
    if weighting is None:
        weighting = getattr(backend, "weighting", unit_weighting)
    z = backend.encode(view.rgb)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z.shape:
        raise ValueError(f"noise shape {noise.shape} does not match latent shape {z.shape}")
    a_bar = float(backend.alphas_cumprod[t_diff - 1])
    z_t = math.sqrt(a_bar) * z + math.sqrt(1.0 - a_bar) * noise
    condition.hints.update(latent=z, noise=noise, pose=view.pose, background=view.background)
    try:
        eps_hat = backend.predict_noise(z_t, condition, t_diff)
    except (BackendError, NumericError):
        raise
    except Exception as exc:
        raise BackendError(f"noise predictor failed: {exc}") from exc
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != z.shape:
        raise BackendError(f"backend returned shape {eps_hat.shape}, expected {z.shape}")
    if not np.all(np.isfinite(eps_hat)):
        raise NumericError("backend predicted non-finite noise", flag="non-finite-noise")
    grad = backend.pullback(view.rgb, eps_hat - noise)
    return GuidanceGradient(grad, float(weighting(t_diff)), int(t_diff), getattr(backend, "source", None) or source)


def sds_grad_2d(view: RenderedView, prompt: str, backend, t_diff: int, noise,
                weighting: Optional[Callable] = None) -> GuidanceGradient:
    """Text-conditioned score-distillation gradient on ``view.rgb``."""
    return _sds(view, Conditioning(TEXT, text=prompt), backend, t_diff, noise, weighting, "2D")


def relative_pose(reference: CameraPose, pose: CameraPose):
    """Rotation and translation of ``pose`` expressed in the reference camera frame."""
    r_ref_t = reference.R.T
    return r_ref_t @ pose.R, r_ref_t @ (pose.T - reference.T)


def sds_grad_3d(view: RenderedView, reference, pose: CameraPose, backend, t_diff: int, noise,
                weighting: Optional[Callable] = None) -> GuidanceGradient:
    """Score-distillation gradient conditioned on the reference image and relative camera pose.

    ``reference`` is a :class:`c123.losses.CaseInput`.
    """
    R, T = relative_pose(reference.reference_pose, pose)
    condition = Conditioning(IMAGE_POSE, image=reference.image, R=R, T=T)
    return _sds(view, condition, backend, t_diff, noise, weighting, "3D")
