"""Graph evaluation helper and the central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import NumericError, Tensor, no_grad

Program = Callable[[Mapping[str, Tensor]], Tensor]


def evaluate_graph(inputs: Mapping[str, Tensor], program: Program) -> Tensor:
    """Run a program over named tensors and return its output tensor.

    The graph is retained whenever any input requires grad; op-level checks
    raise on shape mismatches and non-finite intermediates.
    """
    for name, t in inputs.items():
        if not isinstance(t, Tensor):
            raise TypeError(f"input {name!r} is not a Tensor")
    out = program(inputs)
    if not isinstance(out, Tensor):
        raise TypeError("program must return a Tensor")
    return out


def finite_difference_check(
    program: Program,
    point: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between backward() and central differences.

    The program must reduce to a scalar. All arithmetic runs at 64-bit; for
    each coordinate x the quotient (f(x+eps) - f(x-eps)) / 2 eps is compared
    against the analytic gradient as |a - q| / (|a| + 1e-8).
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")

    arrays = {name: np.asarray(v, dtype=np.float64).copy() for name, v in point.items()}
    tensors = {name: Tensor(v, requires_grad=True) for name, v in arrays.items()}
    out = evaluate_graph(tensors, program)
    if out.size != 1:
        raise ValueError("program must produce a scalar for gradient checking")
    out.backward()
    analytic = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }

    def run(probe: Mapping[str, np.ndarray]) -> float:
        with no_grad():
            wrapped = {name: Tensor(v) for name, v in probe.items()}
            return evaluate_graph(wrapped, program).item()

    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            hi = run(arrays)
            flat[i] = saved - epsilon
            lo = run(arrays)
            flat[i] = saved
            quotient = (hi - lo) / (2.0 * epsilon)
            if not np.isfinite(quotient):
                raise NumericError(f"non-finite difference quotient at {name}[{i}]")
            rel = abs(grad_flat[i] - quotient) / (abs(grad_flat[i]) + 1e-8)
            worst = max(worst, float(rel))
    return worst
