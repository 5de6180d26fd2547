"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from soco.numerics import ops
from soco.numerics.tensor import Tensor, backward, constant, no_grad, parameter


@dataclass
class GradcheckReport:
    name: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        status = "PASS" if self.passed else "FAIL"
        out = [f"{status} {self.name}: max rel err {self.max_error:.3e} (tol {self.tolerance:.0e})"]
        out += [f"    {k}: {v:.3e}" for k, v in self.errors.items()]
        return out


# Scale floor: central differences at eps=1e-5 carry ~1e-10 of rounding noise,
# so a tensor whose true gradient is exactly zero (a bias feeding batch norm)
# is compared in absolute terms instead of dividing noise by noise.
SCALE_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = SCALE_FLOOR,
                   resolution: np.ndarray | float = 0.0) -> float:
    """max |a - n| scaled by the largest gradient magnitude in the tensor (at least ``floor``).

    ``resolution`` is the rounding uncertainty of each numeric entry; a
    difference below it is not measurable and counts as zero.
    """
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    gap = np.maximum(np.abs(analytic - numeric) - resolution, 0.0)
    return float(np.max(gap, initial=0.0) / scale)


def gradcheck(fn: Callable[[Mapping[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray], *,
              eps: float = 1e-5, tolerance: float = 1e-4, max_elements: int | None = None,
              seed: int = 0, name: str = "gradcheck") -> GradcheckReport:
    """Compare backprop gradients of ``fn`` against central differences.

    ``fn`` maps a dict of tensors to an output tensor; non-scalar outputs are
    contracted with a fixed random projection so every output element
    contributes.  With ``max_elements`` only that many randomly chosen
    entries per input are perturbed.
    """
    # Separate stream from anything a caller might seed with the same integer.
    rng = np.random.default_rng((seed, 0x6C4E))
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    leaves = {k: parameter(v) for k, v in arrays.items()}
    out = fn(leaves)
    proj = rng.standard_normal(out.shape) if out.size > 1 else None

    def scalarize(t: Tensor) -> Tensor:
        return t if proj is None else ops.sum(ops.mul(t, constant(proj)))

    grads = dict(zip(leaves, backward(scalarize(out), list(leaves.values()))))

    def evaluate(vals: dict[str, np.ndarray]) -> float:
        with no_grad():
            return float(scalarize(fn({k: constant(v) for k, v in vals.items()})).data)

    report = GradcheckReport(name=name, tolerance=tolerance)
    for key, base in arrays.items():
        flat_idx = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            flat_idx = np.sort(rng.choice(base.size, size=max_elements, replace=False))
        numeric = np.empty(flat_idx.size)
        resolution = np.empty(flat_idx.size)
        for j, idx in enumerate(flat_idx):
            numeric[j], resolution[j] = _probe(evaluate, arrays, key, int(idx), eps, tolerance)
        report.errors[key] = relative_error(grads[key].reshape(-1)[flat_idx], numeric, resolution=resolution)
    return report


# A ReLU or max-pool kink inside [x - eps, x + eps] corrupts the central
# difference even when the analytic gradient is exact.  Such a stencil shows up
# as disagreeing one-sided slopes; it is retried with a smaller step.
KINK_SHRINK = 10.0
KINK_RETRIES = 3
# Slack for rounding in f itself, in units of |f|; a one-sided slope carries it divided by eps.
ROUNDING = 64 * np.finfo(np.float64).eps


def _probe(evaluate: Callable[[dict[str, np.ndarray]], float], arrays: dict[str, np.ndarray],
           key: str, idx: int, eps: float, tolerance: float) -> tuple[float, float]:
    """Central difference at one entry and the rounding uncertainty of that estimate."""
    base = arrays[key]

    def at(delta: float) -> float:
        moved = base.copy().reshape(-1)
        moved[idx] += delta
        return evaluate({**arrays, key: moved.reshape(base.shape)})

    f0 = at(0.0)
    for _ in range(KINK_RETRIES + 1):
        f_plus, f_minus = at(eps), at(-eps)
        right, left = (f_plus - f0) / eps, (f0 - f_minus) / eps
        central = (f_plus - f_minus) / (2 * eps)
        # Smooth stretches give slopes within O(f'' eps) of each other; a retry
        # that was not needed costs evaluations, never accuracy.
        noise = ROUNDING * max(abs(f0), 1.0) / eps
        if abs(right - left) <= tolerance * max(abs(right), abs(left), SCALE_FLOOR) + noise:
            break
        eps /= KINK_SHRINK
    return central, noise
