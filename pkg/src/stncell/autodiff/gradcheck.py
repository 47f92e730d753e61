"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractError
from .tensor import Tensor

# Central differences of an O(1) loss carry roundoff of about
# |f| * 1e-16 / eps ~ 1e-11 at eps = 1e-5.  Flooring the denominator at 1e-6
# keeps gradients smaller than that noise from reading as relative errors.
DENOMINATOR_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    checked: int
    # (input index, flat element index, analytic, numeric, relative error)
    failures: List[Tuple[int, int, float, float, float]] = field(default_factory=list)
    # Candidate elements passed over because a +-eps step changed a branch.
    rejected: int = 0

    def __bool__(self) -> bool:
        return self.passed


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOMINATOR_FLOOR)
    return np.abs(analytic - numeric) / denom


def finite_diff_gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    elements: Optional[Sequence[Sequence[int]]] = None,
) -> GradcheckReport:
    """Compare reverse-mode gradients of scalar ``f(*tensors)`` to central differences.

    ``elements`` optionally restricts the check, per input, to a list of flat
    indices (spot checks on large parameter tensors).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in inputs]

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in tensors]

    def evaluate(k: int, flat_index: int, delta: float) -> float:
        args = []
        for j, a in enumerate(arrays):
            a = a.copy()
            if j == k:
                a.reshape(-1)[flat_index] += delta
            args.append(Tensor(a))
        return f(*args).item()

    failures = []
    worst = 0.0
    checked = 0
    for k, a in enumerate(arrays):
        indices = range(a.size) if elements is None else elements[k]
        for idx in indices:
            numeric = (evaluate(k, idx, eps) - evaluate(k, idx, -eps)) / (2 * eps)
            ana = float(analytic[k].reshape(-1)[idx])
            err = float(relative_error(ana, numeric))
            worst = max(worst, err)
            checked += 1
            if err > tol:
                failures.append((k, int(idx), ana, numeric, err))
    return GradcheckReport(passed=not failures, max_rel_error=worst, checked=checked, failures=failures)
