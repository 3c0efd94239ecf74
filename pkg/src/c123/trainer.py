"""Two-stage optimization loop.

Stage 1 (``INIT3D``) is guided by the pose-conditioned prior alone while a
boundary detector watches multi-view similarity.  Once it fires, stage 2
(``DYNAMIC``) blends the pose-conditioned and text-conditioned guidance with
a schedule that shifts weight toward the text prior.  Reference-view steps
apply the reconstruction loss in both stages.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .boundary import (BoundaryConfig, SimilarityHistory, detection_views, multiview_similarity,
                       should_transition)
from .cases import case_at_resolution, to_uint8
from .errors import NumericError
from .guidance import DiffusionStepSampler, sds_grad_2d, sds_grad_3d
from .losses import CaseInput, LossWeights, rec_loss_terms
from .scene import (CameraPose, RenderedView, SceneModel, inverse_softplus, load_scene, pose_from_spherical,
                    render, save_scene)
from .scheduler import ScheduleSpec, dynamic_prior_loss, prior_weights

log = logging.getLogger(__name__)

INIT3D = "INIT3D"
DYNAMIC = "DYNAMIC"
REFERENCE = "REFERENCE"
NOVEL = "NOVEL"


@dataclass
class TrainConfig:
    total_iterations: int = 10000
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.99)
    adam_eps: float = 1e-15
    p_ref: float = 0.25
    resolution: int = 64
    n_samples: int = 96
    grid_size: int = 32
    half_extent: float = 1.0
    radius: float = 3.0
    fov: float = 40.0
    azimuth_range: Tuple[float, float] = (0.0, 360.0)
    elevation_range: Tuple[float, float] = (-10.0, 45.0)
    ref_azimuth: float = 0.0
    ref_elevation: float = 0.0
    random_background: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)
    boundary: BoundaryConfig = None
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98
    seed: int = 0
    checkpoint_every: int = 500
    upgrade_at: Optional[int] = None

    def __post_init__(self):
        if self.boundary is None:
            self.boundary = BoundaryConfig(views=detection_views(self.radius, self.fov))
        if not 0.0 <= self.p_ref <= 1.0:
            raise ValueError("p_ref must lie in [0, 1]")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be non-negative")
        lo, hi = self.elevation_range
        if not -90.0 <= lo <= hi <= 90.0:
            raise ValueError("elevation_range must be an ordered pair inside [-90, 90]")

    def reference_pose(self) -> CameraPose:
        return pose_from_spherical(self.ref_azimuth, self.ref_elevation, self.radius, self.fov)


@dataclass
class Backends:
    guidance_3d: object
    guidance_2d: object
    embedding: object
    weighting_3d: Optional[Callable] = None
    weighting_2d: Optional[Callable] = None


@dataclass
class StageState:
    stage: str = INIT3D
    iteration: int = 0
    transition_iteration: Optional[int] = None
    history: SimilarityHistory = field(default_factory=SimilarityHistory)
    schedule: Optional[ScheduleSpec] = None


class Adam:
    """Adam over the two raw scene grids."""

    def __init__(self, lr, betas=(0.9, 0.99), eps=1e-15):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, scene: SceneModel, grads) -> None:
        params = (scene.density, scene.color)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        updated = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            new = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(new)):
                raise NumericError(f"non-finite parameter update at optimizer step {self.t}", flag="non-finite-update")
            updated.append(new)
        scene.density, scene.color = updated


def init_scene(cfg: TrainConfig) -> SceneModel:
    """Faint gray blob: activated density 0.1 inside a centered sphere of half the box."""
    scene = SceneModel.empty(cfg.grid_size, cfg.half_extent)
    x, y, z = scene.node_coordinates()
    inside = np.sqrt(x ** 2 + y ** 2 + z ** 2) <= 0.5 * cfg.half_extent
    scene.density = np.where(inside, inverse_softplus(0.1), inverse_softplus(1e-3))
    scene.color = np.zeros_like(scene.color)
    # float32-exact, so checkpoints hold exactly these values
    return _float32_roundtrip(scene)


def sample_view(cfg: TrainConfig, rng: np.random.Generator, reference_pose: Optional[CameraPose] = None):
    """Draw the reference view with probability ``p_ref``, otherwise a uniform novel view."""
    if rng.random() < cfg.p_ref:
        return REFERENCE, reference_pose if reference_pose is not None else cfg.reference_pose()
    azimuth = rng.uniform(*cfg.azimuth_range)
    elevation = rng.uniform(*cfg.elevation_range)
    return NOVEL, pose_from_spherical(azimuth, elevation, cfg.radius, cfg.fov)


class Trainer:
    """Holds the mutable optimization state; :meth:`step` advances one iteration."""

    def __init__(self, scene: SceneModel, case: CaseInput, cfg: TrainConfig, backends: Backends,
                 upgrade_hook: Optional[Callable] = None, checkpoint_dir=None):
        self.scene = scene
        self.case = case_at_resolution(case, cfg.resolution)
        self.cfg = cfg
        self.backends = backends
        self.state = StageState()
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = Adam(cfg.lr, cfg.betas, cfg.adam_eps)
        self.sampler = DiffusionStepSampler(cfg.t_min_frac, cfg.t_max_frac)
        self.upgrade_hook = upgrade_hook
        self.upgrade_calls = 0
        self.checkpoint_dir = None if checkpoint_dir is None else Path(checkpoint_dir)

    def _transition(self, iteration):
        state = self.state
        state.stage = DYNAMIC
        state.transition_iteration = iteration
        state.schedule = replace(self.cfg.schedule, T_opt=max(1, self.cfg.total_iterations - iteration))
        log.info("boundary reached at iteration %d", iteration)
        if self.checkpoint_dir is not None:
            save_scene(self.scene, self.checkpoint_dir / "ckpt_transition.c123")

    def _boundary(self, it, record):
        bcfg = self.cfg.boundary
        if self.state.stage != INIT3D:
            return
        if bcfg.mode == "start":
            if it == 0:
                self._transition(0)
            return
        if bcfg.mode == "never" or it == 0 or it % bcfg.h:
            return
        k = it // bcfg.h
        score = multiview_similarity(self.scene, self.case.prompt, bcfg, self.backends.embedding,
                                     resolution=self.cfg.resolution, n_samples=self.cfg.n_samples)
        self.state.history.append(k, score)
        record["similarity"] = score
        record["detection"] = k
        if should_transition(self.state.history, bcfg):
            self._transition(it)

    def _noise_like(self, backend, view):
        return self.rng.standard_normal(backend.encode(view.rgb).shape)

    def step(self) -> Dict:
        cfg, state, rng = self.cfg, self.state, self.rng
        it = state.iteration
        record = {"iteration": it}
        if cfg.upgrade_at is not None and it == cfg.upgrade_at:
            self.upgrade_calls += 1
            if self.upgrade_hook is not None:
                self.upgrade_hook(self)
        self._boundary(it, record)
        record["stage"] = state.stage

        kind, pose = sample_view(cfg, rng, self.case.reference_pose)
        background = float(rng.random()) if cfg.random_background else 1.0
        view = render(self.scene, pose, cfg.resolution, background=background, n_samples=cfg.n_samples)
        record.update(kind=kind, azimuth=pose.azimuth, elevation=pose.elevation, background=background)

        if kind == REFERENCE:
            rec = rec_loss_terms(view, self.case, cfg.loss_weights)
            record["losses"] = {"rec": rec.total, **rec.components()}
            if rec.depth_degenerate:
                record["flags"] = ["depth-degenerate"]
            grads = view.backward(rec.grad_rgb, rec.grad_alpha, rec.grad_depth)
        else:
            b3 = self.backends.guidance_3d
            t3 = self.sampler.sample(rng, b3.num_steps)
            g3 = sds_grad_3d(view, self.case, pose, b3, t3, self._noise_like(b3, view),
                             weighting=self.backends.weighting_3d)
            record["t_3d"] = t3
            losses = {"sds_3d": float(np.mean(g3.weighted ** 2))}
            if state.stage == DYNAMIC:
                b2 = self.backends.guidance_2d
                t2 = self.sampler.sample(rng, b2.num_steps)
                g2 = sds_grad_2d(view, self.case.prompt, b2, t2, self._noise_like(b2, view),
                                 weighting=self.backends.weighting_2d)
                w3, w2 = prior_weights(state.schedule, it - state.transition_iteration)
                image_grad = dynamic_prior_loss(g3, g2, (w3, w2))
                record["t_2d"] = t2
                record["weights"] = [w3, w2]
                losses["sds_2d"] = float(np.mean(g2.weighted ** 2))
            else:
                image_grad = g3.weighted
            record["losses"] = losses
            # mean-reduced surrogate, on the same footing as the MSE terms
            grads = view.backward(grad_rgb=image_grad / image_grad.size)

        self.optimizer.step(self.scene, grads)
        state.iteration += 1
        return record


@dataclass
class ReconstructionResult:
    scene: SceneModel
    log: List[Dict]
    transition_iteration: Optional[int]
    renders: Dict[str, RenderedView]
    history: SimilarityHistory
    upgrade_calls: int = 0


def evaluation_poses(cfg: TrainConfig, reference_pose: CameraPose):
    poses = {f"view_{int(p.azimuth):03d}": p for p in detection_views(cfg.radius, cfg.fov)}
    poses["reference"] = reference_pose
    return poses


def final_renders(scene: SceneModel, cfg: TrainConfig, reference_pose: CameraPose) -> Dict[str, RenderedView]:
    return {name: render(scene, pose, cfg.resolution, background=1.0, n_samples=cfg.n_samples, keep_tape=False)
            for name, pose in evaluation_poses(cfg, reference_pose).items()}


def _float32_roundtrip(scene: SceneModel) -> SceneModel:
    return SceneModel(scene.density.astype(np.float32).astype(np.float64),
                      scene.color.astype(np.float32).astype(np.float64), scene.half_extent)


def write_renders(renders: Dict[str, RenderedView], out_dir) -> None:
    out_dir = Path(out_dir)
    np.savez(out_dir / "renders.npz", **{name: v.rgb.astype(np.float32) for name, v in renders.items()})
    render_dir = out_dir / "renders"
    render_dir.mkdir(exist_ok=True)
    for name, view in renders.items():
        Image.fromarray(to_uint8(view.rgb), mode="RGB").save(render_dir / f"{name}.png")


def run(case: CaseInput, cfg: TrainConfig, backends: Backends, out_dir=None,
        scene: Optional[SceneModel] = None, upgrade_hook: Optional[Callable] = None) -> ReconstructionResult:
    """Run ``cfg.total_iterations`` steps and collect the final scene, log and renders.

    With ``out_dir`` the run log (``log.ndjson``), periodic checkpoints, the
    final ``scene.c123`` and the evaluation renders are written there.
    """
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    scene = init_scene(cfg) if scene is None else scene
    trainer = Trainer(scene, case, cfg, backends, upgrade_hook=upgrade_hook, checkpoint_dir=out)
    records: List[Dict] = []
    log_fh = None if out is None else open(out / "log.ndjson", "w", encoding="utf-8")
    try:
        for _ in range(cfg.total_iterations):
            try:
                record = trainer.step()
            except NumericError:
                if out is not None:
                    save_scene(trainer.scene, out / "abort.c123")
                raise
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            done = trainer.state.iteration
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_scene(trainer.scene, out / f"ckpt_{done:06d}.c123")
    finally:
        if log_fh is not None:
            log_fh.close()

    final = _float32_roundtrip(trainer.scene)
    renders = final_renders(final, cfg, trainer.case.reference_pose)
    if out is not None:
        save_scene(final, out / "scene.c123")
        write_renders(renders, out)
    return ReconstructionResult(final, records, trainer.state.transition_iteration, renders,
                                trainer.state.history, trainer.upgrade_calls)


def load_log(path) -> List[Dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_result(out_dir) -> Tuple[SceneModel, Dict[str, np.ndarray]]:
    out_dir = Path(out_dir)
    with np.load(out_dir / "renders.npz") as data:
        renders = {k: data[k].astype(np.float64) for k in data.files}
    return load_scene(out_dir / "scene.c123"), renders

