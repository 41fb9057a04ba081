"""Dual-encoder semantic segmentation with spline-network prompt tokens."""

__version__ = "0.1.0"

from .data import (
    DatasetError,
    DatasetSpec,
    SplitConfig,
    load_dataset,
    split_train_val,
    synth_generate,
)
from .decoder import (
    ClassEmbeddingTable,
    MaskDecoder,
    PromptGenerator,
    SegmentationOutput,
    decode,
    generate_prompt_tokens,
    predict_semantic,
)
from .encoders import (
    DimensionAlign,
    EncoderConfig,
    StubEncoder,
    build_encoder,
    dimension_align,
    encode_backbone,
    fuse_features,
)
from .kan import (
    KanEdgeFunction,
    KanGradients,
    KanLayer,
    KanNetwork,
    SplineGrid,
    bspline_basis,
    kan_edge_eval,
    kan_forward,
    kan_gradients,
    kan_layer_forward,
)
from .losses import (
    LossWeights,
    MetricReport,
    batch_hybrid_loss,
    dice_loss,
    dsc_metric,
    focal_loss,
    hybrid_loss,
    iou_metric,
    iou_mse_loss,
)
from .model import ModelConfig, SegmentationModel, freeze_encoders
from .training import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    ablate,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    train,
)

__all__ = [
    "__version__",
    "Checkpoint",
    "CheckpointError",
    "ClassEmbeddingTable",
    "DatasetError",
    "DatasetSpec",
    "DimensionAlign",
    "EncoderConfig",
    "KanEdgeFunction",
    "KanGradients",
    "KanLayer",
    "KanNetwork",
    "LossWeights",
    "MaskDecoder",
    "MetricReport",
    "ModelConfig",
    "PromptGenerator",
    "SegmentationModel",
    "SegmentationOutput",
    "SplineGrid",
    "SplitConfig",
    "StubEncoder",
    "TrainConfig",
    "TrainingDiverged",
    "ablate",
    "batch_hybrid_loss",
    "bspline_basis",
    "build_encoder",
    "checkpoint_load",
    "checkpoint_save",
    "decode",
    "dice_loss",
    "dimension_align",
    "dsc_metric",
    "encode_backbone",
    "evaluate",
    "focal_loss",
    "freeze_encoders",
    "fuse_features",
    "generate_prompt_tokens",
    "hybrid_loss",
    "iou_metric",
    "iou_mse_loss",
    "kan_edge_eval",
    "kan_forward",
    "kan_gradients",
    "kan_layer_forward",
    "load_dataset",
    "predict_semantic",
    "split_train_val",
    "synth_generate",
    "train",
]
