"""Attention head scoring, selection and masked fine-tuning on the toy GQA model."""

from ._alps import (
    AlpsError,
    CorruptError,
    FormatError,
    GeometryError,
    IoError,
    MissingTensorError,
    ModelGeometry,
    NonFiniteError,
    NumericError,
    RangeError,
    ShapeError,
    ValueError,
    VersionError,
    ablate,
    evaluate,
    head_projection,
    heatmap_csv,
    init_model,
    kl_divergence,
    kv_group_of,
    read_checkpoint,
    score,
    score_head,
    select,
    tempered_softmax,
    toy_geometry,
    train,
    w1_distance,
    write_checkpoint,
)

__all__ = [
    "AlpsError",
    "CorruptError",
    "FormatError",
    "GeometryError",
    "IoError",
    "MissingTensorError",
    "ModelGeometry",
    "NonFiniteError",
    "NumericError",
    "RangeError",
    "ShapeError",
    "ValueError",
    "VersionError",
    "ablate",
    "evaluate",
    "head_projection",
    "heatmap_csv",
    "init_model",
    "kl_divergence",
    "kv_group_of",
    "read_checkpoint",
    "score",
    "score_head",
    "select",
    "tempered_softmax",
    "toy_geometry",
    "train",
    "w1_distance",
    "write_checkpoint",
]
