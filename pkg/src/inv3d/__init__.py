"""inv3d: 3D-aware GAN inversion via pseudo-multi-view optimization.

Invert a single view into a latent code and fine-tuned triplane generator by
warping visible texture through an estimated mesh, hallucinating occluded
regions with the generative prior, and jointly optimizing against the
synthesized pseudo-views.
"""

from .camera import CameraPose, camera_rays, pose_to_matrices, project_points
from .editing import (AttributeDirection, apply_edit, build_attribute_set,
                      fit_direction)
from .evaluation import (MetricReport, Trajectory, perceptual_distance, psnr,
                         reprojection_consistency, sphere_trajectory, ssim)
from .generator import (GeneratorConfig, LatentCode, LatentSpaceError,
                        RenderConfig, RenderOutput, TriplaneGenerator,
                        load_checkpoint, map_to_wplus, sample_latent,
                        save_checkpoint, synthesize, volume_render)
from .geometry import (Mask, TriMesh, erode_and_feather, extract_mesh,
                       project_colors, render_warp, vertex_visibility)
from .inversion import (FeatureExtractor, InversionResult, NonFiniteLoss,
                        OptimizerConfig, density_regularizer, invert_initial,
                        invert_pivotal, rec_loss, sample_aux_poses)
from .pipeline import BenchmarkResult, RunConfig, StageError, load_run, \
    run_inversion
from .pseudoview import (DifferenceMap, OccludedModel, PoissonSolveError,
                         PseudoView, adaptive_theta, compose_pseudo_view,
                         difference_map, fit_occluded_latent, render_occluded)
from .scenes import (DatasetError, ProceduralScene, generate_dataset,
                     load_dataset, random_scene, render_scene)
from .training import ToyTrainResult, TrainConfig, TrainingDivergence, \
    train_toy_generator

__version__ = "0.1.0"
