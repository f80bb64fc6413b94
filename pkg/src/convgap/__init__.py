"""Convergence-gap model diffing for paired decoder-only checkpoints."""

from convgap.checkpoint import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from convgap.engine import LayerTrace, forward_trace, residual_perturbation_hook, substitute_mlp_window
from convgap.stats import EstimateWithCI, cluster_bootstrap, format_estimate

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "EstimateWithCI",
    "LayerTrace",
    "ModelConfig",
    "cluster_bootstrap",
    "format_estimate",
    "forward_trace",
    "load_checkpoint",
    "residual_perturbation_hook",
    "save_checkpoint",
    "substitute_mlp_window",
]
