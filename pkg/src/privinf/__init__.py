"""Two-party secure inference toolkit: additive sharing plus comparison FSS.

A trusted dealer hands both parties correlated randomness offline; online,
a client holding private data and a server holding model weights jointly
evaluate linear layers, polynomial activations and comparisons over
Z_{2^l} fixed-point shares, ending with graph-network inference where
neither party sees the other's inputs.
"""

from .errors import (
    BundleExhausted,
    BundleIntegrityError,
    ConfigError,
    DesyncError,
    HandshakeError,
    PrivinfError,
    VerificationError,
)
from .ring import Ring, RingParams

__all__ = [
    "Ring",
    "RingParams",
    "PrivinfError",
    "ConfigError",
    "HandshakeError",
    "DesyncError",
    "BundleExhausted",
    "BundleIntegrityError",
    "VerificationError",
]

__version__ = "0.1.0"
