"""Structured pruning of small CNNs ranked by layer-wise feature-map norms."""
from . import backend
from .data import Dataset, SynthSpec, augment, load_idx, sample_subset, synth_generate, write_idx
from .errors import (ConfigError, DataError, GraphError, LnPruneError, ModelFormatError, PlanError,
                     ShapeError, TrainingDiverged)
from .graph import LayerSpec, ModelGraph, forward, infer_shapes, replace_head_with_gap, resnet_style, vgg_style
from .norms import NormOrder, NormSchedule, NormStats, collect_stats, correlation_report, feature_norm, kernel_l1
from .pruner import Criterion, PrunePlan, apply_plan, build_plan, masked_graph, plan_report, rank_kernels
from .serialize import load_model, save_model
from .train import TrainConfig, evaluate, finetune_two_stage, sgd_step

__version__ = "0.1.0"
