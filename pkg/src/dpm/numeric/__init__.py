from . import ops
from .gradcheck import GradCheckReport, grad_check, grad_check_many, grad_check_outputs, rel_err
from .ops import primitives
from .params import (
    CKPT_MAGIC,
    SGD,
    CheckpointError,
    FreezeGroup,
    Param,
    ParamStore,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    finite_checks,
    get_dtype,
    no_grad,
    precision,
)

__all__ = [
    "ops", "primitives", "GradCheckReport", "grad_check", "grad_check_many", "grad_check_outputs", "rel_err",
    "CKPT_MAGIC", "SGD", "CheckpointError", "FreezeGroup", "Param", "ParamStore",
    "load_checkpoint", "save_checkpoint", "NonFiniteError", "ShapeError", "Tensor",
    "as_tensor", "backward", "finite_checks", "get_dtype", "no_grad", "precision",
]
