"""Single-image 3D reconstruction with a boundary-judged two-stage diffusion prior.

Stage one optimizes a voxel radiance field under a pose-conditioned 3D
prior; once multi-view embedding similarity plateaus, stage two blends in a
text-conditioned 2D prior on a decaying schedule.
"""

from .errors import BackendError, NotReadyError, NumericError
from .scene import (CameraPose, RenderedView, SceneGrad, SceneModel, camera_rays, load_scene,
                    pose_from_spherical, render, render_mask, save_scene)
from .losses import CaseInput, LossWeights, RecLoss, depth_loss, mask_loss, rec_loss, rgb_loss
from .guidance import (Conditioning, DiffusionStepSampler, EchoBackend, GuidanceGradient, OracleBackend,
                       sds_grad_2d, sds_grad_3d)
from .boundary import BoundaryConfig, SimilarityHistory, changing_rate, multiview_similarity, should_transition
from .scheduler import ScheduleSpec, dynamic_prior_loss, prior_weights
from .trainer import Backends, ReconstructionResult, TrainConfig, Trainer, run
from .evalkit import CaseReport, aggregate, clip_similarity_metric, evaluate_case, psnr

__version__ = "0.1.0"
