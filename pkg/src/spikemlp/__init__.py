"""Spiking MLP-Mixer with LIF neurons, BN folding and operation-level cost analysis."""
from .config import NetworkConfig, RunConfig, SkipFlags, variant
from .network import Checkpoint, Network, count_params, load_checkpoint

__version__ = "0.1.0"

__all__ = ["Checkpoint", "Network", "NetworkConfig", "RunConfig", "SkipFlags", "count_params", "load_checkpoint",
           "variant"]
