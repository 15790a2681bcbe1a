"""Semi-supervised image classification with ROI regularization, VAT and entropy minimization."""

from ._core import (
    AdamSchedule,
    ConfigError,
    Model,
    ShapeError,
    ZcaTransform,
    __version__,
    config_text,
    entropy,
    generate_glyphs,
    gradcheck,
    kl_divergence,
    load_dataset,
    profile_names,
    reliability,
    save_dataset,
    select_mask,
    train,
)

__all__ = [
    "AdamSchedule",
    "ConfigError",
    "Model",
    "ShapeError",
    "ZcaTransform",
    "__version__",
    "config_text",
    "entropy",
    "generate_glyphs",
    "gradcheck",
    "kl_divergence",
    "load_dataset",
    "profile_names",
    "reliability",
    "save_dataset",
    "select_mask",
    "train",
]
