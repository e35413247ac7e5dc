"""B-cos networks in numpy: alignment-pressured layers whose predictions
collapse to an exact input-dependent linear map."""

from .encoding import decode_row_to_color, encode_rgb6
from .explain import collapse, collapse_all_classes, contribution_map
from .layers import BcosConv2d, BcosDense
from .models import (BcosNetwork, build_cifar9, build_tiny, load_checkpoint,
                     save_checkpoint)
from .tensor import Tensor
from .training import TrainConfig, train

__all__ = [
    "BcosConv2d", "BcosDense", "BcosNetwork", "Tensor", "TrainConfig",
    "build_cifar9", "build_tiny", "collapse", "collapse_all_classes", "contribution_map",
    "decode_row_to_color", "encode_rgb6", "load_checkpoint", "save_checkpoint", "train",
]
