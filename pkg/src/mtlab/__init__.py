"""Multi-task visual perception laboratory on a small static-graph autodiff core."""
from . import ops, layers, losses  # noqa: F401  (registers graph ops)
from .graph import Graph, backward, eval_graph, grad_check
from .tensor import Precision, Tensor

__all__ = ["Graph", "Precision", "Tensor", "backward", "eval_graph", "grad_check"]
__version__ = "0.1.0"
