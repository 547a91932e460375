"""Multi-layer augmentation policy search by regularized gradient matching."""

__version__ = "0.1.0"

from .errors import (AugSearchError, ConfigError, DataFormatError, DegenerateGradientError, NumericError,
                     PolicyLoadError, TrainingError)
from .imgops import Transform, TransformTable, apply_transform, build_transform_table, standard_table
from .policy import PolicyLayer, PolicyStack, apply_policy, load_policy, save_policy
from .search import SearchConfig, progressive_search, similarity_improvement_stats

__all__ = [
    "AugSearchError", "ConfigError", "DataFormatError", "DegenerateGradientError", "NumericError",
    "PolicyLoadError", "TrainingError", "Transform", "TransformTable", "apply_transform",
    "build_transform_table", "standard_table", "PolicyLayer", "PolicyStack", "apply_policy",
    "load_policy", "save_policy", "SearchConfig", "progressive_search", "similarity_improvement_stats",
]
