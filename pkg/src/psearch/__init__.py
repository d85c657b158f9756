"""Person search on frozen, hierarchical diffusion-style features.

Detection (attention-guided proposals) and re-identification (multi-scale
frequency refinement, text-guided part aggregation, stripe embeddings) run
as two branches with disjoint parameters on one frozen backbone.
"""
from psearch.backbone import (
    BackboneCatalog,
    FeatureSelection,
    LayerId,
    SyntheticBackbone,
    default_catalog,
)
from psearch.errors import (
    ArgumentError,
    CatalogError,
    ConfigError,
    ContractError,
    PersonSearchError,
)
from psearch.kernels import BACKEND as KERNEL_BACKEND
from psearch.model import PersonSearchModel

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "BackboneCatalog",
    "CatalogError",
    "ConfigError",
    "ContractError",
    "FeatureSelection",
    "KERNEL_BACKEND",
    "LayerId",
    "PersonSearchError",
    "PersonSearchModel",
    "SyntheticBackbone",
    "default_catalog",
]
