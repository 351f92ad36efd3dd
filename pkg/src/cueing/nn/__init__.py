from . import functional, layers
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamState, adam_step
from .params import Parameter, ParamRegistry

__all__ = [
    "functional",
    "layers",
    "grad_check",
    "GradCheckReport",
    "AdamState",
    "adam_step",
    "Parameter",
    "ParamRegistry",
]
