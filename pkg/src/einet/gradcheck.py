"""Central finite-difference validation of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import GradientCheckError
from .tensor import GradTape, Tensor, float64_mode, selection_trace


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)  # probes straddling a kink

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tol]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, atol); ``atol`` keeps near-zero entries from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-3,
    tol: float = 1e-3,
    max_checks: int | None = 16,
    seed: int = 0,
    gradients: Mapping[str, np.ndarray] | None = None,
    atol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` with central differences.

    ``f`` and the differences run in float64. At most ``max_checks``
    randomly chosen entries per parameter are probed (all when ``None``).
    A probe whose ``+h`` / ``-h`` evaluations take a different max index or
    activation mask than the unperturbed one straddles a kink, where a
    central difference is not a derivative; such probes are counted in
    ``skipped`` and replaced by other entries. Passing ``gradients`` checks
    those instead of the tape's result, which is how a corrupted gradient is
    shown to fail.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with float64_mode():
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

        def evaluate(values) -> tuple[float, list[bytes]]:
            with selection_trace() as trace:
                out = float(f({k: Tensor(v, name=k) for k, v in values.items()}).data)
            return out, trace

        f0, trace0 = evaluate(base)
        if evaluate(base)[0] != f0:
            raise GradientCheckError("function is not deterministic under repeated evaluation")

        if gradients is None:
            with GradTape() as tape:
                watched = {k: tape.watch(v, name=k) for k, v in base.items()}
                loss = f(watched)
            analytic = dict(zip(watched, tape.gradient(loss, list(watched.values()))))
        else:
            analytic = {k: np.asarray(v, dtype=np.float64) for k, v in gradients.items()}

        for name, value in base.items():
            flat = value.reshape(-1)
            n = flat.size
            want = n if max_checks is None else min(n, max_checks)
            candidates = rng.permutation(n)
            a_all = analytic[name].reshape(-1)
            used, num, skipped = [], [], 0
            for i in candidates:
                if len(used) == want:
                    break
                orig = flat[i]
                flat[i] = orig + h
                fp, tp = evaluate(base)
                flat[i] = orig - h
                fm, tm = evaluate(base)
                flat[i] = orig
                if tp != trace0 or tm != trace0:
                    skipped += 1
                    continue
                used.append(i)
                num.append((fp - fm) / (2 * h))
            if want and not used:
                raise GradientCheckError(f"every entry of {name!r} sits within h of a kink")
            a = a_all[np.array(used, dtype=np.int64)]
            report.errors[name] = float(relative_error(a, np.array(num), atol).max()) if used else 0.0
            report.checked[name] = len(used)
            report.skipped[name] = skipped
    return report
