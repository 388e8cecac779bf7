"""Softmax partition-of-unity approximation and its exact Transformer realisation."""

from .construction import assemble, synth_network
from .domain import CubeDomain, Covering, ManifoldSpec, grid_covering, manifold_covering
from .softpou import HolderTarget, PouApproximator, PouConfig, build_pou, sup_error
from .transformer import TransformerParams, count_params, forward, forward_batch, max_magnitude

__all__ = [
    "CubeDomain", "Covering", "ManifoldSpec", "grid_covering", "manifold_covering",
    "HolderTarget", "PouApproximator", "PouConfig", "build_pou", "sup_error",
    "TransformerParams", "count_params", "forward", "forward_batch", "max_magnitude",
    "assemble", "synth_network",
]
