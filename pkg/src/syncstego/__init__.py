"""Correlation-synchronized embedding simulation for JPEG-domain steganography.

Modules: ``devpipe`` (synthetic RAW development), ``covmodel`` (DCT
correlations), ``lattice`` (lattice decomposition and neighbour tables),
``costmap`` (costs to probabilities to variances), ``syncembed`` (the
conditional sampler) and ``cli``.
"""
from .costmap import CostMap, probabilities_from_costs, ternary_entropy, variance_map
from .covmodel import CorrelationModel
from .devpipe import QuantizedDctImage, make_cover
from .lattice import build_schedule, lattice_of, load_neighbor_tables
from .syncembed import calibrate_payload, embed_image, synchronized_embed

__version__ = "0.1.0"

__all__ = [
    "CorrelationModel", "CostMap", "QuantizedDctImage", "build_schedule", "calibrate_payload", "embed_image",
    "lattice_of", "load_neighbor_tables", "make_cover", "probabilities_from_costs", "synchronized_embed",
    "ternary_entropy", "variance_map",
]
