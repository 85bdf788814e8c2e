"""Interaction-aware parameter-privacy data sharing for mixed-autonomy platoons."""

__version__ = "0.1.0"

from . import adversary, belief, config, dynamics, experiment, policy, training

__all__ = ["adversary", "belief", "config", "dynamics", "experiment", "policy", "training"]
