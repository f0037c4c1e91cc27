"""Dimension reduction via learned level sets.

A pseudo-reversible network pair learns coordinates along which the target
function is constant; predictions use local polynomial fits in the active
coordinates over neighbours chosen in the original input space.
"""

from .losses import Dataset, HyperParams
from .tensor_core import Mlp
from .training import TrainConfig, TrainedModel, build_dataset, lhs_sample, train
from .transforms import Prnn, RevNet, TransformKind

__version__ = "0.1.0"

__all__ = [
    "Dataset", "HyperParams", "Mlp", "Prnn", "RevNet", "TrainConfig", "TrainedModel",
    "TransformKind", "build_dataset", "lhs_sample", "train",
]
