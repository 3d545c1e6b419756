"""Finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .core import ParamStore


class GradCheckError(RuntimeError):
    """Raised when the loss under check is not finite."""


def grad_check(loss_fn, store: ParamStore, inputs=(), h: float = 1e-5,
               floor: float = 1e-3, value_fn=None) -> float:
    """Compare reverse-mode gradients against central finite differences.

    `loss_fn(*inputs)` must run forward and backward, leaving parameter
    gradients in `store`, and return `(loss, input_grads)` where
    `input_grads` matches `inputs` elementwise (may be empty). Every
    non-frozen parameter element and every input element is perturbed.
    Evaluate in float64; float32 cannot resolve the h=1e-5 step.

    Returns the maximum relative error across all checked elements. The
    denominator is floored at `floor`: gradients smaller than that sit
    below the central-difference noise level (~|loss|*1e-11 at h=1e-5),
    where relative comparison is meaningless.

    `value_fn(*inputs)`, when given, evaluates the loss without the
    backward pass and is used for the perturbed evaluations.
    """
    store.zero_grads()
    loss, input_grads = loss_fn(*inputs)
    if not np.isfinite(loss):
        raise GradCheckError(f"non-finite loss {loss!r}; gradient check aborted")
    analytic = [(p, p.grad.copy()) for p in store.trainable()]
    for p in store:
        if p.frozen and np.any(p.grad != 0.0):
            raise GradCheckError(f"frozen parameter {p.name} received gradient")

    def eval_loss():
        if value_fn is not None:
            value = value_fn(*inputs)
        else:
            value, _ = loss_fn(*inputs)
        if not np.isfinite(value):
            raise GradCheckError(f"non-finite loss {value!r} during perturbation")
        return value

    worst = 0.0

    def check_array(arr, grad):
        nonlocal worst
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = eval_loss()
            flat[i] = keep - h
            down = eval_loss()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(numeric), floor)
            worst = max(worst, abs(gflat[i] - numeric) / denom)

    for p, g in analytic:
        check_array(p.value, g)
    for x, g in zip(inputs, input_grads):
        if g is None:
            continue
        check_array(np.asarray(x), g)
    return worst
