"""Text-to-motion generation with dual-constrained causal masking and a diffusion head."""
from .errors import (
    CDAMDError, CheckpointError, ConfigError, DimensionError, FormatError, GenerationError, MaskContractError,
    NumericError, TrainingError, TruncatedFileError, ValidationError,
)
from .motion import CorpusItem, CorpusSpec, MotionSequence, MotionStats, generate_corpus, load_motion, save_motion

__version__ = "0.1.0"
