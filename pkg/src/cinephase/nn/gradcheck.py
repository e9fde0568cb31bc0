"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import backward, forward
from .params import ParamStore


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_param: dict = field(default_factory=dict)
    checked: int = 0


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    objective: Callable[[ParamStore], tuple[float, dict]],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``objective``'s analytic gradients against central differences.

    ``objective(params)`` returns ``(loss, grads)`` where ``grads`` maps every
    parameter name to its analytic gradient. Every parameter tensor is checked;
    with ``max_entries`` set, at most that many randomly chosen entries per
    tensor are perturbed. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, analytic = objective(params)
    rng = np.random.default_rng(seed)
    per_param = {}
    checked = 0
    for name in params:
        value = params.values[name]
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        grad = np.asarray(analytic[name]).reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            plus, _ = objective(params)
            flat[i] = orig - h
            minus, _ = objective(params)
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, relative_error(float(grad[i]), numeric, floor))
        per_param[name] = worst
        checked += len(idx)
    max_err = max(per_param.values(), default=0.0)
    return GradCheckReport(max_rel_err=max_err, passed=max_err <= tol, per_param=per_param, checked=checked)


def grad_check(layers, params: ParamStore, x: np.ndarray, loss_fn, h: float = 1e-5, tol: float = 1e-3,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Finite-difference check of a sequential network.

    ``loss_fn(output)`` returns ``(loss, dloss/doutput)``. Dropout masks are
    drawn from a generator reseeded identically for every evaluation.
    """

    def objective(p: ParamStore):
        out, tape = forward(layers, p, x, mode="train", rng=np.random.default_rng(seed))
        loss, g = loss_fn(out)
        p.zero_grad()
        backward(tape, g)
        grads = {name: p.grads[name] for name in p}
        p.zero_grad()
        return float(loss), grads

    return check_gradients(objective, params, h=h, tol=tol, max_entries=max_entries, seed=seed)
