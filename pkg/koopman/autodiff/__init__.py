from .tensor import Tensor, Parameter, Function, as_tensor, backward
from .gradcheck import finite_diff_check
from . import ops

__all__ = ['Tensor', 'Parameter', 'Function', 'as_tensor', 'backward', 'finite_diff_check', 'ops']
