"""Float64 tensor substrate with reverse-mode differentiation."""

from soco.numerics import ops
from soco.numerics.gradcheck import GradcheckReport, gradcheck, relative_error
from soco.numerics.roi_align import roi_align, roi_align_matrix
from soco.numerics.tensor import (
    Tensor,
    as_tensor,
    backward,
    constant,
    is_grad_enabled,
    no_grad,
    parameter,
)

__all__ = [
    "GradcheckReport",
    "Tensor",
    "as_tensor",
    "backward",
    "constant",
    "gradcheck",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "parameter",
    "relative_error",
    "roi_align",
    "roi_align_matrix",
]
