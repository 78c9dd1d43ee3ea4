"""Central finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import GradientCheckError
from .tensor import Tensor


def numeric_gradient(fn: Callable[..., Tensor], arrays: list[np.ndarray], index: int, eps: float) -> np.ndarray:
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn(*[Tensor(a) for a in arrays]).data.sum())
        flat[i] = orig - eps
        minus = float(fn(*[Tensor(a) for a in arrays]).data.sum())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    tolerance: float = 1e-4,
    eps: float | None = None,
    dtype=np.float64,
    check: Sequence[bool] | None = None,
) -> float:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` takes one Tensor per entry of ``inputs`` and returns a tensor that
    is summed to a scalar. Inputs are upcast to ``dtype`` (float64 by default,
    step 1e-5; float32 uses step 1e-3). ``check`` selects which inputs are
    probed. Returns the max over probed coordinates of
    ``|analytic - numeric| / max(1, |numeric|)`` and raises
    ``GradientCheckError`` naming the worst coordinate if it exceeds
    ``tolerance``.
    """
    if eps is None:
        eps = 1e-5 if np.dtype(dtype) == np.float64 else 1e-3
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=dtype) for x in inputs]
    check = [True] * len(arrays) if check is None else list(check)

    leaves = [Tensor(a.copy(), requires_grad=c) for a, c in zip(arrays, check)]
    out = fn(*leaves)
    out.backward(np.ones_like(out.data))

    worst = 0.0
    worst_at: tuple[int, int] | None = None
    for i, probe in enumerate(check):
        if not probe:
            continue
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        numeric = numeric_gradient(fn, arrays, i, eps)
        rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        j = int(np.argmax(rel)) if rel.size else 0
        if rel.size and rel.flat[j] > worst:
            worst, worst_at = float(rel.flat[j]), (i, j)
    if worst > tolerance:
        i, j = worst_at
        raise GradientCheckError(
            f"gradient mismatch at input {i}, flat index {j} "
            f"(coordinate {np.unravel_index(j, arrays[i].shape)}): rel. err {worst:.3e} > {tolerance:g}"
        )
    return worst
