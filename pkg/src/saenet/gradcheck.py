"""Central-difference gradient checking for modules and single ops."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .errors import ContractError


@dataclass
class GradCheckReport:
    """Max relative error per checked array (parameters plus ``input``)."""

    errors: dict[str, float]
    tolerance: float
    non_finite: list[str] = field(default_factory=list)
    resamples: int = 0

    @property
    def passed(self) -> bool:
        return not self.non_finite and all(e <= self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tolerance]

    def to_csv(self) -> str:
        lines = ["name,max_rel_err,status"]
        for name, err in self.errors.items():
            status = "non-finite" if name in self.non_finite else ("ok" if err <= self.tolerance else "FAIL")
            lines.append(f"{name},{err:.3e},{status}")
        return "\n".join(lines) + "\n"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_ratio: float = 1e-3) -> float:
    """Max over entries of ``|a - n| / max(|n|, floor_ratio * max|n|)``.

    The floor keeps entries that are tiny compared with the array's largest
    gradient from turning finite-difference noise into huge ratios.
    """
    scale = float(np.abs(numeric).max(initial=0.0))
    denom = np.maximum(np.abs(numeric), max(floor_ratio * scale, 1e-12))
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def _compare(loss_at: Callable[[], float], targets, h: float, max_entries: Optional[int],
             rng: np.random.Generator, floor_ratio: float):
    errors, non_finite = {}, []
    for name, arr, analytic in targets:
        if not np.all(np.isfinite(analytic)):
            errors[name] = float("nan")
            non_finite.append(name)
            continue
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        numeric = np.empty(len(flat_idx))
        flat = arr.reshape(-1)  # view: arrays are contiguous
        for k, i in enumerate(flat_idx):
            old = flat[i]
            flat[i] = old + h
            fp = loss_at()
            flat[i] = old - h
            fm = loss_at()
            flat[i] = old
            numeric[k] = (fp - fm) / (2 * h)
        if not np.all(np.isfinite(numeric)):
            errors[name] = float("nan")
            non_finite.append(name)
            continue
        errors[name] = relative_error(analytic.reshape(-1)[flat_idx], numeric, floor_ratio)
    return errors, non_finite


def grad_check(module, input_shape: Sequence[int], tolerance: float = 1e-4, *, h: float = 1e-5,
               seed: int = 0, dtype=np.float64, kink_tol: float = 1e-3, max_resample: int = 500,
               max_entries: Optional[int] = None, check_input: bool = True,
               floor_ratio: float = 1e-3) -> GradCheckReport:
    """Compare backprop gradients of ``module`` with central differences.

    The module is cast to ``dtype`` in place and run in whatever mode it is
    in (train mode for batch norm).  The scalar under test is
    ``sum(module(x) * R)`` for a fixed random projection ``R``.  Inputs are
    redrawn until every relu input sits at least ``kink_tol`` away from zero.
    ``max_entries`` caps the number of finite-difference probes per array.
    """
    module.to(dtype)
    rng = np.random.default_rng(seed)
    for attempt in range(max_resample + 1):
        x = rng.standard_normal(tuple(input_shape)).astype(dtype)
        with ag.no_grad(), ag.record_relu_margins() as margins:
            out = module(ag.constant(x)).value
        if not margins or min(margins) >= kink_tol:
            break
    else:
        raise ContractError(f"no kink-free input found after {max_resample} resamples")
    proj = rng.standard_normal(out.shape).astype(dtype)

    def loss_at() -> float:
        with ag.no_grad():
            return float(np.sum(module(ag.Node(x)).value * proj))

    params = list(module.parameters())
    for p in params:
        p.zero_grad()
    xn = ag.variable(x)
    ag.backward(ag.sum_all(ag.mul(module(xn), ag.constant(proj))))

    targets = [(p.name or f"param{i}", p.value, p.grad.copy()) for i, p in enumerate(params)]
    if check_input:
        targets.append(("input", x, xn.grad))
    errors, non_finite = _compare(loss_at, targets, h, max_entries, rng, floor_ratio)
    return GradCheckReport(errors, tolerance, non_finite, resamples=attempt)


def check_op(fn: Callable[..., ag.Node], inputs: dict[str, np.ndarray], tolerance: float = 1e-4, *,
             h: float = 1e-5, seed: int = 0, floor_ratio: float = 1e-3) -> GradCheckReport:
    """Gradient-check a function of several arrays.  ``fn`` receives one Node per input."""
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    with ag.no_grad():
        out = fn(*[ag.Node(a) for a in arrays.values()]).value
    proj = rng.standard_normal(np.shape(out))

    def loss_at() -> float:
        with ag.no_grad():
            return float(np.sum(fn(*[ag.Node(a) for a in arrays.values()]).value * proj))

    leaves = [ag.variable(a) for a in arrays.values()]
    ag.backward(ag.sum_all(ag.mul(fn(*leaves), ag.constant(proj))))
    targets = []
    for (name, arr), leaf in zip(arrays.items(), leaves):
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        targets.append((name, arr, grad))
    errors, non_finite = _compare(loss_at, targets, h, None, rng, floor_ratio)
    return GradCheckReport(errors, tolerance, non_finite)
