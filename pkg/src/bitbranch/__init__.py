"""bitbranch: bit-packed binary neural network engine.

Exact XNOR-popcount kernels, grouped binary branch decomposition with
learned soft connections and dynamic hard branch selection, a small
numpy training engine, and benchmark / memory-model tooling.
"""

from bitbranch.bitcore import (
    BitTensor,
    ConvGeometry,
    binary_conv2d,
    fixed_point_dot,
    pack_bools,
    pack_signs,
    speedup_ratio,
    xnor_popcount_dot,
)

__all__ = [
    "BitTensor",
    "ConvGeometry",
    "binary_conv2d",
    "fixed_point_dot",
    "pack_bools",
    "pack_signs",
    "speedup_ratio",
    "xnor_popcount_dot",
]

__version__ = "0.1.0"
