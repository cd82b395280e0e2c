"""Central finite-difference gradient checker; the project-wide gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import NonFiniteError, ParamStore, Tape, Tensor, backward, no_record


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)   # tensor name -> worst relative error
    checked_entries: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst <= tol

    def lines(self) -> list[str]:
        return [f"{name:60s} {err:.3e} ({self.checked_entries[name]} entries)"
                for name, err in sorted(self.max_rel_error.items())]


NOISE_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Worst entry-wise discrepancy, normalized by the tensor's largest gradient magnitude.

    ``floor`` bounds the normalizer from below so that structurally zero or
    negligible gradients are judged against rounding noise, not against
    themselves.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_diff_check(f: Callable[[], Tensor], store: ParamStore, h: float = 1e-6,
                      tol: Optional[float] = None, max_entries: Optional[int] = None,
                      seed: int = 0, names: Optional[list] = None) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``f()`` with central differences.

    ``f`` reads its parameters from ``store``.  With ``max_entries`` set, each
    larger tensor is checked on a random subset of that many entries.
    Gradients below ``NOISE_FLOOR * max(1, |f|)`` are compared on that
    absolute scale.  Raises AssertionError when ``tol`` is given and exceeded.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    store.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("finite_diff_check: f returned a non-finite value")
    backward(loss, tape, store)
    floor = NOISE_FLOOR * max(1.0, abs(float(np.asarray(loss.data).reshape(-1)[0])))

    def evaluate() -> float:
        with no_record():
            val = f()
        v = float(np.asarray(val.data).reshape(-1)[0])
        if not np.isfinite(v):
            raise NonFiniteError("finite_diff_check: f returned a non-finite value")
        return v

    report = GradCheckReport()
    for name, p in store.items():
        if names is not None and name not in names:
            continue
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max(max_entries, 1), replace=False))
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * h)
        analytic = p.grad.reshape(-1)[idx]
        report.max_rel_error[name] = relative_error(analytic, numeric, floor)
        report.checked_entries[name] = int(idx.size)
    if tol is not None and not report.passed(tol):
        bad = {k: v for k, v in report.max_rel_error.items() if v > tol}
        raise AssertionError(f"gradient check failed (tol={tol}): {bad}")
    return report


def check_function(fn: Callable[..., Tensor], *arrays: np.ndarray, h: float = 1e-6,
                   seed: int = 0) -> GradCheckReport:
    """Gradient-check ``sum(fn(*inputs) * R)`` for a fixed random projection R."""
    store = ParamStore()
    for i, arr in enumerate(arrays):
        store.add(f"in{i}", np.array(arr, dtype=np.float64))
    names = [f"in{i}" for i in range(len(arrays))]
    rng = np.random.default_rng(seed + 1)
    with no_record():
        probe = fn(*[store[n] for n in names])
    proj = Tensor(rng.standard_normal(probe.shape))

    from . import ops

    def f():
        return ops.sum(ops.mul(fn(*[store[n] for n in names]), proj))

    return finite_diff_check(f, store, h=h, seed=seed)
