"""Refine a coarse human depth map from video by photo-consistency across
neighboring frames, with non-rigid motion taken from per-frame body meshes."""

from .camera import Intrinsics, WeakPerspectiveCam, project, unproject, weak_to_perspective
from .config import PipelineConfig
from .errors import (BehindCameraError, DegenerateNeighborhoodError, InputError, InvalidCameraError,
                     InvalidDepthError, NRDepthError, NumericalError, TopologyError)
from .evaluate import accuracy_and_mae, depth_to_cloud, evaluate_clouds, icp_register
from .masks import FrameTuple, build_frame_tuple, filter_tuples, group_tuples, validation_mask
from .mesh import TriMesh, TriMeshSequence, all_vertex_transforms, build_two_ring, per_vertex_transform
from .photometric import LossBreakdown, LossWeights, photo_loss, ssim_cs, total_loss, total_loss_gradient
from .raster import DepthMap, MotionMap, rasterize, render_depth, render_motion_map
from .refine import DetailMap, OptimizerConfig, compose_depth, optimize_detail
from .synth import generate_scene, render_appearance

__version__ = "0.1.0"
