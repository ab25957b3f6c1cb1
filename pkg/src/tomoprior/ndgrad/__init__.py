from .graph import Graph, Node, Tensor
from .optim import AdamState, adam_step
from .checkpoint import load_tensors, save_tensors
from .gradcheck import grad_check

__all__ = [
    "Graph",
    "Node",
    "Tensor",
    "AdamState",
    "adam_step",
    "save_tensors",
    "load_tensors",
    "grad_check",
]
