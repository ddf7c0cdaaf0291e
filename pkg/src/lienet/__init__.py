"""Lie group networks for skeleton-based action recognition.

Skeletons become curves of relative bone rotations in SO(3); a network of
rotation-mapping, rotation-pooling and logarithm layers is trained with
Riemannian SGD that keeps every weight on the rotation group.
"""

from .errors import LieNetError
from .layers import Network, NetworkSpec, build_network
from .skeleton import LieSequence, SkeletonSequence, SkeletonTopology
from .training import Dataset, OptimizerConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "LieNetError",
    "LieSequence",
    "Network",
    "NetworkSpec",
    "OptimizerConfig",
    "SkeletonSequence",
    "SkeletonTopology",
    "build_network",
    "evaluate",
    "train",
]
