"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# Below this magnitude a gradient is compared in absolute terms: central
# differences carry ~ulp(loss)/step of rounding noise (about 1e-10 here), so an
# exactly-zero gradient would otherwise read as a large relative error.
ERROR_FLOOR = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = ERROR_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    n_checked: int = 0
    n_skipped: int = 0

    @property
    def flagged(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if v > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.flagged

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def lines(self):
        for k, v in sorted(self.max_rel_error.items()):
            yield f"{'FLAG' if v > self.tolerance else 'ok  '} {k:<40s} {v:.3e}"


def grad_check(loss_fn, params: dict, grads: dict, tolerance: float = 1e-4, samples_per_param: int = 8,
               step: float = 1e-5, seed: int = 0, names=None, max_attempts: int = 4) -> GradCheckReport:
    """Compare ``grads`` against central differences of ``loss_fn()``.

    ``params`` are perturbed in place (and restored); ``grads`` must already
    hold the analytic gradient at the unperturbed point. For each parameter a
    random subsample of ``samples_per_param`` entries is checked.

    ReLU and max-pool make the loss piecewise smooth. An entry whose
    difference quotients at ``step`` and ``step / 2`` disagree sits within
    one step of a kink, where no finite-difference estimate is valid; it is
    counted in ``n_skipped`` and another entry is drawn, up to
    ``max_attempts`` draws per sample.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    def quotient(p, idx, h):
        orig = p[idx]
        p[idx] = orig + h
        up = loss_fn()
        p[idx] = orig - h
        down = loss_fn()
        p[idx] = orig
        return (up - down) / (2 * h)

    for name in names or sorted(params):
        p, g = params[name], grads[name]
        worst = 0.0
        for _ in range(min(samples_per_param, p.size)):
            for attempt in range(max_attempts):
                idx = np.unravel_index(rng.integers(p.size), p.shape)
                n1 = quotient(p, idx, step)
                n2 = quotient(p, idx, step / 2)
                if relative_error(n1, n2) <= tolerance or attempt == max_attempts - 1:
                    break
                report.n_skipped += 1
            worst = max(worst, relative_error(float(g[idx]), n1))
            report.n_checked += 1
        report.max_rel_error[name] = worst
    return report
