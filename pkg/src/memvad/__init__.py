"""Memory-guided video anomaly detection at research and desk scale."""

from memvad.memory import MemoryBank
from memvad.models import MemoryGuidedNet, ModelConfig
from memvad.config import RunConfig, preset

__all__ = ["MemoryBank", "MemoryGuidedNet", "ModelConfig", "RunConfig", "preset"]
__version__ = "0.1.0"
