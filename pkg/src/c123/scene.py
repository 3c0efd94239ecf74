"""Dense voxel radiance field with an emission-absorption ray marcher.

The scene is a pair of raw lattices sampled at the nodes of a regular grid
spanning ``[-half_extent, half_extent]^3``.  Values are interpolated
trilinearly and then activated: softplus for density, sigmoid for color.

Rendering is written directly in numpy with a hand-derived backward pass;
:meth:`RenderedView.backward` returns gradients of any linear functional of
the rendered rasters with respect to both raw grids.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy import sparse
from scipy.special import expit

DEFAULT_SAMPLES = 96
# softplus underflows to exactly 0 here
EMPTY_DENSITY = -1.0e4
CHECKPOINT_MAGIC = "C123-SCENE v1"

_HEADER_RE = re.compile(r"^C123-SCENE v1 D=(\d+) HALF=(\S+)$")


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    return expit(x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class SceneModel:
    """Raw density and color lattices plus the half extent of their bounding cube."""

    density: np.ndarray  # (D, D, D), indexed [x, y, z]
    color: np.ndarray  # (D, D, D, 3)
    half_extent: float = 1.0

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        d = self.density.shape[0]
        if self.density.shape != (d, d, d) or d < 2:
            raise ValueError(f"density grid must be D x D x D with D >= 2, got {self.density.shape}")
        if self.color.shape != (d, d, d, 3):
            raise ValueError(f"color grid must be {(d, d, d, 3)}, got {self.color.shape}")
        if not self.half_extent > 0:
            raise ValueError("half_extent must be positive")
        self.half_extent = float(self.half_extent)

    @classmethod
    def empty(cls, size, half_extent=1.0):
        """Scene whose activated density is zero everywhere and color mid-gray."""
        density = np.full((size,) * 3, EMPTY_DENSITY)
        return cls(density, np.zeros((size,) * 3 + (3,)), half_extent)

    @property
    def size(self) -> int:
        return self.density.shape[0]

    @property
    def voxel_width(self) -> float:
        return 2.0 * self.half_extent / (self.size - 1)

    def node_coordinates(self):
        """World coordinates of grid nodes as three (D, D, D) arrays."""
        axis = np.linspace(-self.half_extent, self.half_extent, self.size)
        return np.meshgrid(axis, axis, axis, indexing="ij")

    def activated_density(self):
        return softplus(self.density)

    def activated_color(self):
        return sigmoid(self.color)

    def copy(self) -> "SceneModel":
        return SceneModel(self.density.copy(), self.color.copy(), self.half_extent)

    def params_equal(self, other: "SceneModel") -> bool:
        return (
            self.half_extent == other.half_extent
            and np.array_equal(self.density, other.density)
            and np.array_equal(self.color, other.color)
        )


class SceneGrad(NamedTuple):
    density: np.ndarray
    color: np.ndarray


@dataclass(frozen=True)
class CameraPose:
    """Camera on a sphere around the origin, looking at the origin.

    ``R`` is the camera-to-world rotation with columns (right, up, back);
    the camera looks along ``-back``.  ``T`` is the camera center.
    """

    azimuth: float
    elevation: float
    radius: float
    fov: float
    R: np.ndarray = field(repr=False, compare=False)
    T: np.ndarray = field(repr=False, compare=False)

    @property
    def center(self) -> np.ndarray:
        return self.T

    @property
    def forward(self) -> np.ndarray:
        return -self.R[:, 2]

    def to_dict(self):
        return {"azimuth": self.azimuth, "elevation": self.elevation,
                "radius": self.radius, "fov": self.fov}


def pose_from_spherical(azimuth, elevation, radius, fov=40.0) -> CameraPose:
    """Place a camera at (azimuth, elevation, radius), degrees, looking at the origin.

    Azimuth 0 is the +x axis, elevation 0 the equatorial plane, +z is up.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if not -90.0 <= elevation <= 90.0:
        raise ValueError(f"elevation must lie in [-90, 90], got {elevation}")
    if not 0.0 < fov < 180.0:
        raise ValueError(f"fov must lie in (0, 180), got {fov}")
    azimuth = float(azimuth) % 360.0
    a, e = math.radians(azimuth), math.radians(elevation)
    back = np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
    # right never degenerates, even looking straight down
    right = np.array([-math.sin(a), math.cos(a), 0.0])
    up = np.cross(back, right)
    R = np.stack([right, up, back], axis=1)
    return CameraPose(azimuth, float(elevation), float(radius), float(fov), R, radius * back)


def camera_rays(pose: CameraPose, resolution: int):
    """Unit ray directions through pixel centers, shape (H*W, 3), row-major from the top-left."""
    half = math.tan(math.radians(pose.fov) / 2.0)
    coords = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    ys, xs = np.meshgrid(-coords, coords, indexing="ij")
    dirs = np.stack([xs * half, ys * half, -np.ones_like(xs)], axis=-1).reshape(-1, 3)
    dirs = dirs @ pose.R.T
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _ray_box(origin, dirs, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (-half - origin) * inv
        t1 = (half - origin) * inv
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    t_min = np.minimum(t0, t1).max(axis=1)
    t_max = np.maximum(t0, t1).min(axis=1)
    t_min = np.maximum(t_min, 0.0)
    return t_min, t_max, t_max > t_min


class _Tape(NamedTuple):
    hit: np.ndarray
    interp: sparse.csr_matrix  # (R*N, D^3) trilinear weights
    raw_density: np.ndarray  # (R, N)
    color: np.ndarray  # (R, N, 3) activated
    step: np.ndarray  # (R,)
    t: np.ndarray  # (R, N)
    weights: np.ndarray  # (R, N)
    trans_after: np.ndarray  # (R, N), transmittance past each sample
    alpha: np.ndarray  # (R,)
    depth: np.ndarray  # (R,)
    size: int


@dataclass
class RenderedView:
    """Rasters produced by rendering a scene from one pose.

    ``rgb`` is already composited over ``background``.
    """

    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    pose: CameraPose
    background: np.ndarray
    _tape: Optional[_Tape] = field(default=None, repr=False, compare=False)

    @property
    def resolution(self) -> int:
        return self.rgb.shape[0]

    def on_background(self, color) -> np.ndarray:
        """The same render composited over a different background color."""
        color = np.broadcast_to(np.asarray(color, dtype=np.float64), (3,))
        return self.rgb + (1.0 - self.alpha)[..., None] * (color - self.background)

    def backward(self, grad_rgb=None, grad_alpha=None, grad_depth=None) -> SceneGrad:
        """Pull raster gradients back to the raw scene grids.

        Each argument is the gradient of a scalar with respect to the matching
        raster (``rgb`` as composited over this view's background).
        """
        tape = self._tape
        if tape is None:
            raise ValueError("view was rendered without a gradient tape")
        n_pix = self.alpha.size
        hit = tape.hit
        g_c = np.zeros((n_pix, 3)) if grad_rgb is None else np.asarray(grad_rgb, dtype=np.float64).reshape(n_pix, 3)
        g_a = np.zeros(n_pix) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64).reshape(n_pix).copy()
        g_d = np.zeros(n_pix) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64).reshape(n_pix)
        # rgb = premultiplied + (1 - alpha) * background
        g_a = g_a - g_c @ self.background
        g_c, g_a, g_d = g_c[hit], g_a[hit], g_d[hit]

        alpha, depth = tape.alpha, tape.depth
        safe = alpha > 0
        g_dsum = np.where(safe, g_d / np.where(safe, alpha, 1.0), 0.0)
        g_a = g_a - g_dsum * depth

        # every output is sum_k w_k * v_k for a per-sample value v_k
        v = np.einsum("rnc,rc->rn", tape.color, g_c) + g_a[:, None] + g_dsum[:, None] * tape.t
        wv = tape.weights * v
        behind = wv.sum(axis=1, keepdims=True) - np.cumsum(wv, axis=1)
        g_sigma = tape.step[:, None] * (tape.trans_after * v - behind)
        g_raw_density = g_sigma * sigmoid(tape.raw_density)
        g_raw_color = (tape.weights[..., None] * g_c[:, None, :]) * tape.color * (1.0 - tape.color)

        per_sample = np.concatenate([g_raw_density[..., None], g_raw_color], axis=-1).reshape(-1, 4)
        packed = tape.interp.T @ per_sample
        shape = (tape.size,) * 3
        d_density, d_color = packed[:, 0], packed[:, 1:]
        return SceneGrad(d_density.reshape(shape), d_color.reshape(shape + (3,)))


def _corner_offsets(size):
    return np.array([(dx * size + dy) * size + dz for dx, dy, dz in np.ndindex(2, 2, 2)], dtype=np.int64)


def render(scene: SceneModel, pose: CameraPose, resolution: int, background=1.0,
           n_samples: int = DEFAULT_SAMPLES, keep_tape: bool = True) -> RenderedView:
    """Ray-march ``scene`` from ``pose`` into square rasters of side ``resolution``.

    ``background`` is a gray level or an RGB triple.  Pixels whose rays miss
    the bounding cube get alpha 0, depth 0 and the background color.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be at least 8, got {resolution}")
    half = scene.half_extent
    if np.all(np.abs(pose.center) <= half):
        raise ValueError("camera center lies inside the scene bounding box")
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    size = scene.size
    n_pix = resolution * resolution

    origin = pose.center
    dirs = camera_rays(pose, resolution)
    t_near, t_far, hit = _ray_box(origin, dirs, half)
    dirs, t_near, t_far = dirs[hit], t_near[hit], t_far[hit]

    step = (t_far - t_near) / n_samples
    t = t_near[:, None] + (np.arange(n_samples) + 0.5) * step[:, None]
    to_grid = (size - 1) / (2.0 * half)
    grid = (origin + half) * to_grid + t[..., None] * (dirs * to_grid)[:, None, :]
    np.clip(grid, 0.0, size - 1, out=grid)
    base = np.minimum(grid.astype(np.int64), size - 2)
    frac = grid - base

    base_index = (base[..., 0] * size + base[..., 1]) * size + base[..., 2]
    corner_index = base_index[..., None] + _corner_offsets(size)
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    corner_weight = np.empty(t.shape + (8,))
    for n, wxy in enumerate((gx * gy, gx * fy, fx * gy, fx * fy)):
        np.multiply(wxy, gz, out=corner_weight[..., 2 * n])
        np.multiply(wxy, fz, out=corner_weight[..., 2 * n + 1])
    n_points = corner_index.size // 8
    interp = sparse.csr_matrix(
        (corner_weight.reshape(-1), corner_index.reshape(-1), np.arange(0, 8 * n_points + 1, 8)),
        shape=(n_points, size ** 3),
    )

    packed = np.concatenate([scene.density.reshape(-1, 1), scene.color.reshape(-1, 3)], axis=1)
    raw = (interp @ packed).reshape(t.shape + (4,))
    raw_density, raw_color = raw[..., 0], raw[..., 1:]
    sigma = softplus(raw_density)
    color = sigmoid(raw_color)

    optical = np.cumsum(sigma * step[:, None], axis=1)
    trans_after = np.exp(-optical)
    trans_before = np.concatenate([np.ones((len(t), 1)), trans_after[:, :-1]], axis=1)
    weights = trans_before * -np.expm1(-(sigma * step[:, None]))
    alpha_hit = -np.expm1(-optical[:, -1]) if n_samples else np.zeros(len(t))
    premult_hit = np.einsum("rn,rnc->rc", weights, color)
    dsum = (weights * t).sum(axis=1)
    depth_hit = np.where(alpha_hit > 0, dsum / np.where(alpha_hit > 0, alpha_hit, 1.0), 0.0)

    alpha = np.zeros(n_pix)
    alpha[hit] = alpha_hit
    depth = np.zeros(n_pix)
    depth[hit] = depth_hit
    premult = np.zeros((n_pix, 3))
    premult[hit] = premult_hit
    rgb = np.clip(premult + (1.0 - alpha)[:, None] * bg, 0.0, 1.0)

    tape = None
    if keep_tape:
        tape = _Tape(hit, interp, raw_density, color, step, t,
                     weights, trans_after, alpha_hit, depth_hit, size)
    shape = (resolution, resolution)
    return RenderedView(rgb.reshape(shape + (3,)), depth.reshape(shape), alpha.reshape(shape), pose, bg, tape)


def render_mask(view: RenderedView) -> np.ndarray:
    """Soft foreground mask of a render: its accumulated opacity, unthresholded."""
    return view.alpha


def save_scene(scene: SceneModel, path) -> None:
    header = f"{CHECKPOINT_MAGIC} D={scene.size} HALF={scene.half_extent!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(scene.density, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(scene.color, dtype="<f4").tobytes())


def load_scene(path) -> SceneModel:
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    match = _HEADER_RE.match(data[:newline].decode("utf-8", errors="replace"))
    if not match:
        raise ValueError(f"{path}: bad checkpoint header")
    size, half = int(match.group(1)), float(match.group(2))
    body = data[newline + 1:]
    n = size ** 3
    if len(body) != 16 * n:
        raise ValueError(f"{path}: expected {16 * n} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return SceneModel(values[:n].reshape((size,) * 3), values[n:].reshape((size,) * 3 + (3,)), half)
