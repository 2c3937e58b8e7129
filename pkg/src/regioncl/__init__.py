"""Contrastive multi-modal region embeddings: similarity-mined triplets for
image encoders, skip-gram POI text vectors, attentive fusion aligned by
InfoNCE, and downstream socioeconomic evaluation."""

from .dataset import DatasetBundle, RegionRecord, SyntheticWorldConfig, generate_world, read_bundle, split_regions, write_bundle
from .errors import ContractError, DimensionError, FormatError, NonFiniteError, StageError, UnsupportedVersionError
from .tensor import Tensor, backward, default_dtype

__version__ = "0.1.0"
