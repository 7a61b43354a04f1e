"""Gaussian splatting with per-Gaussian segmentation features trained by contrastive clustering."""
from .losses import (
    contrastive_clustering_loss, rendering_loss, spatial_regularization, ssim, total_loss,
)
from .metrics import EvalReport, Query, boundary_iou, evaluate, iou
from .rasterizer import RenderOptions, project, project_gaussian, rasterize, rasterize_backward, replay
from .scene import Camera, FeatureMap, Gaussian, GaussianCloud, SegmentMask
from .segmenter import (
    convex_hull_extract, object_mask, pick_discriminative_feature, segment_queries, segment_query,
    select_gaussians_3d, similarity_map,
)
from .synthdata import SceneSpec, make_dataset
from .trainer import TrainConfig, densify_and_prune, train

__version__ = "0.1.0"
