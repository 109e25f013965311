"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import UsageError
from .functional import kink_tape
from .tensor import Tensor, backward

DENOM_FLOOR = 1e-8


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise UsageError(f"gradient check needs a scalar-valued map, got shape {out.shape}")
    return float(out.data.reshape(()))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` recomputes a scalar from the *current* data of ``tensors``; each
    coordinate is perturbed in place and restored. ``max_coords`` caps the
    number of coordinates probed per tensor (drawn with ``rng``).
    """
    if not 1e-6 <= eps <= 1e-4:
        raise UsageError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    out = fn()
    _scalar(out)
    backward(out)
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(fn())
            flat[i] = orig - eps
            fm = _scalar(fn())
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], numeric)))
    return worst


def finite_diff_gradcheck(op: Callable[[Tensor], Tensor], point: Tensor | np.ndarray,
                          eps: float = 1e-5) -> float:
    """Check ``op`` (a scalar-valued map of one tensor) at ``point``."""
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64),
               requires_grad=True)
    return check_gradients(lambda: op(x), [x], eps=eps)


def check_probes(fn: Callable[[], Tensor], probes: Sequence[tuple[str, Tensor, int]],
                 eps: float = 1e-5, frozen: bool = False) -> dict[str, tuple[float, bool]]:
    """Relative error at selected flat coordinates, one backward pass total.

    ``probes`` holds ``(label, tensor, flat_index)`` triples. The result maps
    each label to ``(error, straddles_kink)``, the flag telling whether the
    +/-eps evaluations changed a relu mask or maxpool winner. With ``frozen``
    those evaluations replay the base point's masks and winners, so the
    difference quotient is taken on the branch backprop differentiates.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise UsageError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    tensors = {id(t): t for _, t, _ in probes}.values()
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with kink_tape() as base:
        out = fn()
    backward(out)
    analytic = {label: (0.0 if t.grad is None else float(t.grad.reshape(-1)[i])) for label, t, i in probes}
    replay = base if frozen else None
    results = {}
    for label, t, i in probes:
        flat = t.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        with kink_tape(replay) as up:
            fp = _scalar(fn())
        flat[i] = orig - eps
        with kink_tape(replay) as down:
            fm = _scalar(fn())
        flat[i] = orig
        kink = not (up.same_branch(base) and down.same_branch(base))
        results[label] = (float(relative_error(analytic[label], (fp - fm) / (2 * eps))), kink)
    return results
