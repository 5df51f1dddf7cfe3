"""Central finite-difference oracle for the backward rules."""

import numpy as np

from koopman.autodiff.tensor import backward

MIN_STEP = 1e-7
MAX_STEP = 1e-4


def finite_diff_check(f, params, h=1e-6, floor=1e-8):
    """
    Compare analytic gradients of f(params) against central differences.

    f maps the parameter list to a scalar Tensor. Returns the largest
    relative error |analytic - numeric| / max(|analytic|, |numeric|, floor)
    over every scalar coordinate of every parameter. Parameter values are
    restored and gradients left holding the analytic result.
    """
    if not MIN_STEP <= h <= MAX_STEP:
        raise ValueError(f"Step h={h} outside [{MIN_STEP}, {MAX_STEP}]")

    for param in params:
        param.zero_grad()
    backward(f(params))
    analytic = [param.grad.copy() for param in params]

    worst = 0.0
    for param, grad in zip(params, analytic):
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = float(f(params).data)
            flat[i] = original - h
            lower = float(f(params).data)
            flat[i] = original
            numeric = (upper - lower) / (2.0 * h)
            exact = grad.reshape(-1)[i]
            denom = max(abs(exact), abs(numeric), floor)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
