"""Training relaxations for mask-transformer panoptic segmentation on a small numpy autodiff core."""

from .losses import LossConfig, Targets, total_loss
from .matching import Assignment, hungarian
from .metrics import PanopticMap, pq, pq_dataset, miou
from .model import ModelConfig, forward, init_params
from .relax import RelaxConfig, reclass_apply, remask_apply, remask_map
from .tensor import Tape, Tensor, backward, fd_check, stop_gradient

__version__ = "0.1.0"
