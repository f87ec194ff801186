"""Streaming federated learning with per-device favorite-neighbor aggregation."""

__version__ = "0.1.0"

from neighborfl.config import SimConfig, configure_mode
from neighborfl.protocol import Simulation

__all__ = ["SimConfig", "Simulation", "configure_mode", "__version__"]
