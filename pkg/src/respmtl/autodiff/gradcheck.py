from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.per_param.items() if not e <= self.tolerance]


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    # infinity-norm error relative to the larger gradient magnitude; the floor keeps
    # finite-difference round-off on exactly-zero gradients from reading as 100% error
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
               tolerance: float = 1e-4, step: float = 1e-5, floor: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. Evaluate in float64; the step is too small for float32.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    report = GradCheckReport(0.0, tolerance)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        err = _rel_error(analytic, numeric, floor)
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    for p in params.values():
        p.grad = None
    return report
