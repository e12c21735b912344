"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .engine import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    entries_checked: dict[str, int] = field(default_factory=dict)

    @property
    def flagged(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _evaluate(closure) -> float:
    with no_grad():
        value = float(closure().item())
    if not np.isfinite(value):
        raise ContractError(f"gradient check aborted: closure returned non-finite loss {value}")
    return value


def gradient_check(closure: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                   tolerance: float = 1e-6, entries_per_param: int | None = None,
                   floor: float = 1e-6, seed: int = 0,
                   names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare backward() against central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is ~0 from amplifying rounding noise.
    With ``entries_per_param`` set, that many coordinates per tensor are
    drawn at random instead of sweeping every entry.
    """
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    loss = closure()
    if not np.isfinite(loss.data).all():
        raise ContractError(f"gradient check aborted: non-finite loss {loss.data}")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p, a in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        if entries_per_param is None or entries_per_param >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=entries_per_param, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _evaluate(closure)
            flat[i] = orig - eps
            fm = _evaluate(closure)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            an = a.reshape(-1)[i]
            err = abs(an - num) / max(abs(an), abs(num), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.entries_checked[name] = len(idx)
    return report
