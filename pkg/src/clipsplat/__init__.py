"""Clip-level Gaussian splatting for monocular video reconstruction and
temporal-consistency refinement of externally edited frames."""

from .core import Camera, Gaussian, GaussianSet, Role, build_covariance, eval_sh, quaternion_to_rotation
from .decomposition import ClipManifest, MaskedVideo, SfmResult, init_background_points, parse_colmap_text, split_clips, synthetic_provider
from .deformation import DeformationField, HashEncoding, time_normalize
from .metrics import FlowField, LossValue, psnr, q_edit, read_flo, recon_loss, ssim, warp_ssim, write_flo
from .rasterizer import RenderOutput, Splat2D, project, render, render_backward
from .refiner import EditBatch, RefineConfig, refine_recursive_ensembled, refine_single_phase, synthetic_flicker_editor
from .training import AlphaMap, SceneModel, TrainConfig, build_scene, densify_and_prune, load_scene, merge_views, reconstruct_video, save_scene, train_clip

__version__ = "0.1.0"
