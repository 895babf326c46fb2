"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor, backward, no_grad


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


def _floor(numeric_arrays: Sequence[np.ndarray]) -> float:
    # entries far below the tensor's gradient scale are judged against that scale
    scale = max((float(np.abs(n).max()) for n in numeric_arrays if n.size), default=0.0)
    return max(1e-3 * scale, 1e-7)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Max elementwise relative error between backprop and central differences.

    ``f`` maps one Tensor per input array to a scalar Tensor. Relative error is
    ``|analytic - numeric| / max(|numeric|, floor)`` where the floor is 1e-3 of
    the largest numeric gradient entry.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    arrays = [np.array(a, dtype=np.float64 if np.asarray(a).dtype != np.float32 else np.float32) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*tensors)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out, inputs=tensors)
    analytic = [t.grad for t in tensors]

    numeric = []
    with no_grad():
        for k, base in enumerate(arrays):
            num = np.zeros_like(base)
            flat = base.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*_wrap(arrays)).data.sum())
                flat[i] = orig - eps
                fm = float(f(*_wrap(arrays)).data.sum())
                flat[i] = orig
                num.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
            numeric.append(num)

    for a, n in zip(analytic, numeric):
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
            raise NumericError("grad_check: non-finite gradient encountered")
    floor = _floor(numeric)
    return max(float(_relative_errors(a, n, floor).max()) for a, n in zip(analytic, numeric))


def _wrap(arrays):
    return [Tensor(a) for a in arrays]


def parameter_grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    eps: float = 1e-6,
    samples_per_param: int = 2,
    seed: int = 0,
) -> dict[str, float]:
    """Check gradients of a scalar loss w.r.t. every named parameter in place.

    For each parameter tensor two quantities are compared with central
    differences: the directional derivative along a random unit direction
    (covers every entry at once) and ``samples_per_param`` individual entries.
    Returns the worst relative error per parameter name.
    """
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    grads = {name: p.grad.copy() for name, p in params}

    def f() -> float:
        with no_grad():
            return float(loss_fn().data.sum())

    errors: dict[str, float] = {}
    for name, p in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        direction = rng.standard_normal(p.shape)
        direction /= np.linalg.norm(direction)
        base = p.data.copy()
        p.data[...] = base + eps * direction
        fp = f()
        p.data[...] = base - eps * direction
        fm = f()
        p.data[...] = base
        num_dir = (fp - fm) / (2 * eps)
        ana_dir = float((g * direction).sum())
        # directional derivatives are judged against the gradient's norm
        worst = abs(ana_dir - num_dir) / max(abs(num_dir), 1e-3 * float(np.linalg.norm(g)), 1e-9)

        flat = p.data.reshape(-1)
        idxs = rng.choice(flat.size, size=min(samples_per_param, flat.size), replace=False)
        gmax = float(np.abs(g).max())
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(g.reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(abs(num), 1e-3 * gmax, 1e-9))
        if not np.isfinite(worst):
            raise NumericError(f"non-finite gradient comparison for {name}")
        errors[name] = worst
    return errors
