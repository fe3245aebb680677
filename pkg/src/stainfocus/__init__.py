"""Stain-aware ordinal focus quality assessment for fluorescence microscopy."""

__version__ = "0.1.0"

from .analysis import AnalysisReport, analyze_dataset, mae, plcc, spatial_frequency, srcc
from .dataset import (
    DatasetManifest,
    ManifestEntry,
    Sample,
    ZStack,
    fewshot_sample,
    load_manifest,
    relabel_zstack,
    save_manifest,
    split_by_fov,
)
from .evaluation import MetricsReport, evaluate, predict
from .model import FocusRankModel, ModelConfig, load_checkpoint, save_checkpoint
from .synthgen import (
    DEFAULT_STAINS,
    GenConfig,
    StainOptics,
    generate_dataset,
    generate_texture,
    render_stack,
)
from .training import (
    TrainConfig,
    baseline_train,
    ce_loss,
    ordinal_kl_loss,
    run_ablation_ladder,
    stage1_train,
    stage2_train,
)

__all__ = [
    "AnalysisReport",
    "DEFAULT_STAINS",
    "DatasetManifest",
    "FocusRankModel",
    "GenConfig",
    "ManifestEntry",
    "MetricsReport",
    "ModelConfig",
    "Sample",
    "StainOptics",
    "TrainConfig",
    "ZStack",
    "analyze_dataset",
    "baseline_train",
    "ce_loss",
    "evaluate",
    "fewshot_sample",
    "generate_dataset",
    "generate_texture",
    "load_checkpoint",
    "load_manifest",
    "mae",
    "ordinal_kl_loss",
    "plcc",
    "predict",
    "relabel_zstack",
    "render_stack",
    "run_ablation_ladder",
    "save_checkpoint",
    "save_manifest",
    "spatial_frequency",
    "split_by_fov",
    "srcc",
    "stage1_train",
    "stage2_train",
]
