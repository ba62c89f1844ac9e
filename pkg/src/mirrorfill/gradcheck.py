"""Analytic-vs-numeric gradient verification.

Analytic gradients come from reverse-mode differentiation of the checked
operation; the numeric side is an independent central finite-difference
oracle evaluated coordinate by coordinate. Checks are only meaningful away
from kinks of piecewise-smooth operations (bilinear kernel at integer
lattice points, probability clamps), which callers arrange by construction.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch

from .errors import NumericError, ValidationError


def numeric_gradient(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    arg_index: int,
    epsilon: float,
) -> torch.Tensor:
    """Central finite differences of a scalar function wrt one argument."""
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    base = [t.detach().clone() for t in inputs]
    target = base[arg_index]
    grad = torch.zeros_like(target)
    flat = target.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + epsilon
        hi = float(f(*base))
        flat[i] = orig - epsilon
        lo = float(f(*base))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * epsilon)
    return grad


def max_relative_error(
    analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-9
) -> float:
    """Max over coordinates of |a - n| / max(|a|, |n|); coordinates where
    both magnitudes sit below the floor are treated as agreeing zeros."""
    a = analytic.double().view(-1)
    n = numeric.double().view(-1)
    denom = torch.maximum(a.abs(), n.abs())
    keep = denom > floor
    if not keep.any():
        return 0.0
    rel = (a - n).abs()[keep] / denom[keep]
    return rel.max().item()


def grad_check(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    epsilon: float = 1e-6,
    wrt: Sequence[int] | None = None,
    floor: float = 1e-9,
) -> float:
    """Compare reverse-mode gradients against central differences.

    f maps the input tensors to a scalar. Returns the max relative error
    over all coordinates of all checked arguments. Inputs should be double
    precision; non-finite intermediates raise NumericError.
    """
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    leaves = []
    for i, t in enumerate(inputs):
        t = t.detach().clone()
        if i in wrt:
            t.requires_grad_(True)
        leaves.append(t)
    out = f(*leaves)
    if not torch.isfinite(out):
        raise NumericError("non-finite value in checked operation")
    grads = torch.autograd.grad(out, [leaves[i] for i in wrt], allow_unused=False)
    worst = 0.0
    for k, i in enumerate(wrt):
        num = numeric_gradient(f, [t.detach() for t in leaves], i, epsilon)
        if not torch.isfinite(num).all():
            raise NumericError("non-finite numeric gradient")
        worst = max(worst, max_relative_error(grads[k], num, floor=floor))
    return worst


def grad_check_parameters(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    n_coords: int,
    epsilon: float = 1e-6,
    seed: int = 0,
    floor: float = 1e-9,
) -> float:
    """Spot-check dLoss/dTheta for a random sample of weight coordinates.

    loss_fn re-evaluates the loss from the current parameter values, so the
    finite-difference probe can mutate parameters in place.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_coords):
        pi = int(torch.randint(len(params), (1,), generator=rng))
        p = params[pi]
        ci = int(torch.randint(p.numel(), (1,), generator=rng))
        analytic = 0.0 if grads[pi] is None else grads[pi].view(-1)[ci].item()
        with torch.no_grad():
            flat = p.view(-1)
            orig = flat[ci].item()
            flat[ci] = orig + epsilon
            hi = float(loss_fn())
            flat[ci] = orig - epsilon
            lo = float(loss_fn())
            flat[ci] = orig
        numeric = (hi - lo) / (2.0 * epsilon)
        denom = max(abs(analytic), abs(numeric))
        if denom > floor:
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
