"""Reading and writing case directories, and building synthetic cases.

A case directory holds ``image.png`` (RGB or RGBA), ``mask.png`` (optional
when the image has alpha), ``depth.f32`` (optional raw little-endian
float32, row-major), ``prompt.txt`` and an optional ``category.txt``.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .losses import CaseInput
from .scene import CameraPose, SceneModel, render


class CaseError(ValueError):
    """A case directory is missing a file or holds inconsistent data."""


def _read_png(path):
    try:
        with Image.open(path) as img:
            img.load()
            return img.copy()
    except (OSError, SyntaxError) as exc:
        raise CaseError(f"{path}: cannot decode image ({exc})") from exc


def load_case(path, reference_pose: CameraPose) -> CaseInput:
    path = Path(path)
    if not path.is_dir():
        raise CaseError(f"{path}: case directory not found")
    image_path = path / "image.png"
    if not image_path.exists():
        raise CaseError(f"{image_path}: required file missing")
    img = _read_png(image_path)
    mask = None
    if img.mode in ("RGBA", "LA") or (img.mode == "P" and "transparency" in img.info):
        rgba = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
        alpha = rgba[..., 3:]
        image = rgba[..., :3] * alpha + (1.0 - alpha)
        mask = (rgba[..., 3] >= 0.5).astype(np.float64)
    else:
        image = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    h, w = image.shape[:2]

    mask_path = path / "mask.png"
    if mask_path.exists():
        m = np.asarray(_read_png(mask_path).convert("L"), dtype=np.float64)
        if m.shape != (h, w):
            raise CaseError(f"{mask_path}: size {m.shape} does not match image {(h, w)}")
        mask = (m >= 128).astype(np.float64)
    elif mask is None:
        raise CaseError(f"{mask_path}: required file missing (image has no alpha channel)")

    depth = None
    depth_path = path / "depth.f32"
    if depth_path.exists():
        raw = depth_path.read_bytes()
        if len(raw) != 4 * h * w:
            raise CaseError(f"{depth_path}: expected {4 * h * w} bytes for {h}x{w}, found {len(raw)}")
        depth = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(h, w)

    prompt_path = path / "prompt.txt"
    if not prompt_path.exists():
        raise CaseError(f"{prompt_path}: required file missing")
    lines = prompt_path.read_text(encoding="utf-8").splitlines()
    prompt = lines[0].strip() if lines else ""

    category = None
    category_path = path / "category.txt"
    if category_path.exists():
        category = category_path.read_text(encoding="utf-8").strip() or None
    return CaseInput(image, mask, depth, prompt, reference_pose, category=category, name=path.name)


def to_uint8(raster):
    return np.round(np.clip(raster, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_case(case: CaseInput, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(case.image), mode="RGB").save(path / "image.png")
    Image.fromarray(to_uint8(case.mask), mode="L").save(path / "mask.png")
    if case.depth is not None:
        (path / "depth.f32").write_bytes(np.ascontiguousarray(case.depth, dtype="<f4").tobytes())
    (path / "prompt.txt").write_text(case.prompt + "\n", encoding="utf-8")
    if case.category:
        (path / "category.txt").write_text(case.category + "\n", encoding="utf-8")
    return path


def _box_resize(raster, size):
    img = Image.fromarray(np.asarray(raster, dtype=np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.Resampling.BOX), dtype=np.float64)


def case_at_resolution(case: CaseInput, size: int) -> CaseInput:
    """Box-resample a case to ``size x size``; the mask is re-binarized at 0.5."""
    if case.resolution == size and case.image.shape[1] == size:
        return case
    image = np.stack([_box_resize(case.image[..., c], size) for c in range(3)], axis=-1)
    mask = (_box_resize(case.mask, size) >= 0.5).astype(np.float64)
    depth = None if case.depth is None else _box_resize(case.depth, size)
    return replace(case, image=np.clip(image, 0.0, 1.0), mask=mask, depth=depth)


def case_from_scene(scene: SceneModel, pose: CameraPose, resolution: int, prompt="an object",
                    n_samples=None, **kwargs) -> CaseInput:
    """Render a scene on white into a case: mask is alpha >= 0.5, depth is the rendered depth."""
    extra = {} if n_samples is None else {"n_samples": n_samples}
    view = render(scene, pose, resolution, background=1.0, keep_tape=False, **extra)
    mask = (view.alpha >= 0.5).astype(np.float64)
    depth = np.where(mask > 0, view.depth, 0.0)
    return CaseInput(view.rgb, mask, depth, prompt, pose, **kwargs)


def synthetic_target(size=16, half_extent=1.0, seed=0) -> SceneModel:
    """A few soft-edged colored blobs: a hidden ground truth for oracle runs."""
    rng = np.random.default_rng(seed)
    scene = SceneModel.empty(size, half_extent)
    x, y, z = scene.node_coordinates()
    inside = np.zeros_like(x)
    centers = [np.zeros(3)] + [rng.uniform(-0.35, 0.35, 3) * half_extent for _ in range(2)]
    radii = [0.45 * half_extent] + list(rng.uniform(0.2, 0.3, 2) * half_extent)
    for c, r in zip(centers, radii):
        dist = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) - r
        inside = np.maximum(inside, 1.0 / (1.0 + np.exp(dist / (0.06 * half_extent))))
    scene.density = -6.0 + 10.0 * inside
    scale = 2.0 / half_extent
    phase = rng.uniform(0, 2 * np.pi, 3)
    scene.color = np.stack([
        scale * x + np.sin(3 * y + phase[0]),
        scale * y + np.sin(3 * z + phase[1]),
        scale * z + np.sin(3 * x + phase[2]),
    ], axis=-1)
    return scene
