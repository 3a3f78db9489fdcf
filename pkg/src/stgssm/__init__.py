"""Graph-gated selective state space models for spatiotemporal
forecasting, on a small deterministic autodiff engine."""

__version__ = "0.1.0"

from . import (block, data, flops, kalman_graph, kernels, model, scan,
               serialize, tensor)
from .kernels import BACKEND
from .tensor import (ContractError, DimensionError, DomainError,
                     NumericalError, Tape, Tensor)
