from .config import PRESETS, RobSelfConfig, preset
from .filter import (
    correlation_weights,
    importance_map,
    importance_threshold,
    large_kernel_mask,
    reference_filter,
)
from .network import (
    Diagnostics,
    ForwardResult,
    ModelState,
    align_guide,
    estimate_deformation,
    extract_features,
    forward,
    predict,
    standardize,
    upsample_source,
)

__all__ = [
    "PRESETS",
    "RobSelfConfig",
    "preset",
    "correlation_weights",
    "importance_map",
    "importance_threshold",
    "large_kernel_mask",
    "reference_filter",
    "Diagnostics",
    "ForwardResult",
    "ModelState",
    "align_guide",
    "estimate_deformation",
    "extract_features",
    "forward",
    "predict",
    "standardize",
    "upsample_source",
]
