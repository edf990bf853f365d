"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    n_checked: int
    per_tensor: dict[str, float] = field(default_factory=dict)
    # (name, flat index, analytic, numeric, relative error)
    failures: list[tuple[str, int, float, float, float]] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e} scalars={self.n_checked}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    loss_fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    h: float = 1e-6,
    tol: float = 1e-5,
    grad_hook: Callable[[dict[str, np.ndarray]], None] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    Every scalar of every tensor in ``tensors`` with ``requires_grad`` set is
    perturbed by +-h; frozen tensors are left out of the report entirely.
    ``grad_hook`` may edit the analytic gradients before comparison (used to
    inject faults in tests). Exceeding ``tol`` is reported, never raised.
    """
    live = {name: t for name, t in tensors.items() if t.requires_grad}
    for t in live.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in live.items()}
    if grad_hook is not None:
        grad_hook(analytic)

    report = GradCheckReport(max_rel_err=0.0, passed=True, tol=tol, n_checked=0)
    with no_grad():
        for name, t in live.items():
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * h)
            a = analytic[name].reshape(-1)
            rel = relative_error(a, numeric)
            worst = float(rel.max()) if rel.size else 0.0
            report.per_tensor[name] = worst
            report.n_checked += rel.size
            report.max_rel_err = max(report.max_rel_err, worst)
            for i in np.flatnonzero(rel >= tol):
                report.failures.append((name, int(i), float(a[i]), float(numeric[i]), float(rel[i])))
    for t in live.values():
        t.zero_grad()
    report.passed = not report.failures
    return report
