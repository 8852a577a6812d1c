"""Character-conditioned image generation at desk scale.

A frozen flow-matching transformer over pixel patches, conditioned on
character reference images through a dual-encoder, dual-stream adapter
with a timestep-aware query-projection head, trained by a three-stage
paired/unpaired curriculum on procedurally generated sprites.
"""

__version__ = "0.1.0"

from .config import RunConfig, StageConfig  # noqa: F401
from .errors import CharAdapterError, DataError, NumericalError, UsageError  # noqa: F401
