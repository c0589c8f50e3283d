"""Moment channel attention on a minimal numpy autograd stack."""

from .autograd import Tensor
from .attention import AttentionConfig, GateOutput, mca_forward, eca_forward, se_forward
from .moments import MomentVector, EmaConfig, aggregate, ema_scalar, prop1_bound, check_bound
from .models import ModelSpec, build, save, load
from .train import TrainConfig, train, evaluate

__version__ = "0.1.0"
