"""Attention-based Dropout Layer for weakly supervised object localization, at desk scale."""
from .adl import AdlConfig, adl_forward, compute_attention_map, compute_drop_mask, compute_importance_map, has_patch_drop
from .localization import BBox, Heatmap, MetricsReport, cam_heatmap, evaluate, extract_bbox, iou, normalize_and_upsample
from .model import BlockSpec, HasSpec, ModelConfig, Network, SGDConfig, build_model, forward, predict, train
from .rng import Rng
from .synthdata import DataSpec, generate_dataset
from .tensor import Graph, finite_difference_check

__version__ = "0.1.0"
