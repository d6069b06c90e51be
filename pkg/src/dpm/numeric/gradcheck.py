"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    checked: int
    worst: tuple = ()
    per_tensor: dict[str, float] = field(default_factory=dict)
    roundoff_zeros: int = 0   # coordinates where both gradients sit below the float64 rounding floor of f

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def roundoff_bound(fp: float, fm: float, step: float) -> float:
    """Largest central difference that float64 rounding of f alone can produce."""
    return 4.0 * float(np.spacing(max(abs(fp), abs(fm), 1e-300))) / (2.0 * step)


def _scalar(t: Tensor, what: str) -> float:
    if t.data.size != 1:
        raise ValueError("grad_check objective must return a scalar")
    val = float(t.data.reshape(-1)[0])
    if not np.isfinite(val):
        raise NonFiniteError("grad_check", what)
    return val


def _prepare(tensors: Mapping[str, Tensor]) -> None:
    for t in tensors.values():
        t.grad = None
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit tensors; build them under precision(np.float64)")


def grad_check_outputs(f: Callable[[], Mapping[str, Tensor]], tensors: Mapping[str, Tensor],
                       step: float = 1e-5, tol: float = 1e-4, max_entries: int | None = None,
                       rng: np.random.Generator | None = None) -> dict[str, GradCheckReport]:
    """Gradient-check several scalar outputs of one graph against the same inputs.

    Each perturbed evaluation of ``f`` is shared by all outputs, so checking
    k objectives costs one finite-difference sweep instead of k.
    """
    _prepare(tensors)
    analytic: dict[str, dict[str, np.ndarray]] = {}
    keys = list(f().keys())
    for key in keys:
        out = f()[key]
        _scalar(out, f"objective {key!r}")
        backward(out)
        analytic[key] = {n: (np.zeros_like(t.data) if t.grad is None else t.grad) for n, t in tensors.items()}
        for t in tensors.values():
            t.grad = None

    def values() -> dict[str, float]:
        return {k: _scalar(v, f"objective {k!r} at perturbed point") for k, v in f().items()}

    rng = rng or np.random.default_rng(0)
    worst = {k: (0.0, ()) for k in keys}
    per = {k: {} for k in keys}
    zeros = {k: 0 for k in keys}
    checked = 0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        tw = {k: 0.0 for k in keys}
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = values()
            flat[i] = orig - step
            fm = values()
            flat[i] = orig
            checked += 1
            for k in keys:
                num = (fp[k] - fm[k]) / (2 * step)
                a = float(analytic[k][name].reshape(-1)[i])
                noise = roundoff_bound(fp[k], fm[k], step)
                if abs(a) <= noise and abs(num) <= noise:
                    # both sides are indistinguishable from zero at float64 resolution:
                    # an exactly invariant direction (e.g. a shared shift under a distance)
                    zeros[k] += 1
                    continue
                err = float(rel_err(np.float64(a), np.float64(num)))
                tw[k] = max(tw[k], err)
                if err > worst[k][0]:
                    worst[k] = (err, (name, int(i), a, num))
        for k in keys:
            per[k][name] = tw[k]
    return {k: GradCheckReport(worst[k][0], tol, checked, worst[k][1], per[k], zeros[k]) for k in keys}


def grad_check_many(f: Callable[[], Tensor], tensors: Mapping[str, Tensor], step: float = 1e-5,
                    tol: float = 1e-4, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` must rebuild its graph from the current contents of ``tensors``
    on each call. With ``max_entries`` set, only that many randomly chosen
    coordinates per tensor are perturbed.
    """
    return grad_check_outputs(lambda: {"f": f()}, tensors, step, tol, max_entries, rng)["f"]


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Single-input form: ``f(x)`` is a scalar function of ``x``."""
    was = x.requires_grad
    x.requires_grad = True
    try:
        return grad_check_many(lambda: f(x), {"x": x}, step=step, tol=tol)
    finally:
        x.requires_grad = was
