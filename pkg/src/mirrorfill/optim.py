"""Deterministic ADAM over a named parameter dict.

Hand-rolled rather than wrapped so the moment buffers serialize directly
into the checkpoint format and a resumed run is bit-identical. All managed
parameters are re-bound as views into one contiguous buffer (and their
.grad fields as views into a matching gradient buffer, which autograd
accumulates into), so an update is a handful of kernels regardless of how
many small tensors the networks have. Steps with non-finite gradients are
rejected (parameters untouched) and logged.
"""

from __future__ import annotations

import logging
import math

import torch

log = logging.getLogger(__name__)


class Adam:
    def __init__(
        self,
        params: dict[str, torch.Tensor],
        lr: float = 2e-4,
        beta1: float = 0.5,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.keys = list(self.params.keys())
        self._shapes = {}
        self._slices = {}
        offset = 0
        for k in self.keys:
            p = self.params[k]
            self._shapes[k] = p.shape
            self._slices[k] = (offset, offset + p.numel())
            offset += p.numel()
        ref = next(iter(self.params.values())) if self.params else torch.empty(0)
        self.flat_p = torch.empty(offset, dtype=ref.dtype)
        self.flat_g = torch.zeros(offset, dtype=ref.dtype)
        with torch.no_grad():
            for k in self.keys:
                a, b = self._slices[k]
                p = self.params[k]
                self.flat_p[a:b] = p.detach().reshape(-1)
                p.data = self.flat_p[a:b].view(self._shapes[k])
                p.grad = self.flat_g[a:b].view(self._shapes[k])
        self.m = torch.zeros_like(self.flat_p)
        self.v = torch.zeros_like(self.flat_p)
        self._denom = torch.empty_like(self.flat_p)

    @torch.no_grad()
    def step(self) -> bool:
        """Apply one update from the accumulated gradients.

        Returns False (and leaves everything untouched, including t and the
        moments) if any gradient is non-finite.
        """
        # a finite sum implies all entries finite (any inf/nan propagates)
        if not torch.isfinite(self.flat_g.sum()):
            log.warning("rejected step %d: non-finite gradient", self.t + 1)
            return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        g = self.flat_g
        self.m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
        self.v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
        # lr * (m / bc1) / (sqrt(v / bc2) + eps), factored to spare two passes
        sbc2 = math.sqrt(bc2)
        torch.sqrt(self.v, out=self._denom)
        self._denom.add_(self.eps * sbc2)
        self.flat_p.addcdiv_(self.m, self._denom, value=-self.lr * sbc2 / bc1)
        return True

    def zero_grad(self) -> None:
        self.flat_g.zero_()

    def grad_view(self, key: str) -> torch.Tensor:
        a, b = self._slices[key]
        return self.flat_g[a:b].view(self._shapes[key])

    def state_arrays(self, prefix: str) -> dict[str, torch.Tensor]:
        """Moment buffers and step counter as flat named arrays."""
        out = {f"{prefix}.t": torch.tensor([float(self.t)])}
        for k in self.keys:
            a, b = self._slices[k]
            out[f"{prefix}.m.{k}"] = self.m[a:b].view(self._shapes[k])
            out[f"{prefix}.v.{k}"] = self.v[a:b].view(self._shapes[k])
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, torch.Tensor]) -> None:
        self.t = int(arrays[f"{prefix}.t"].item())
        with torch.no_grad():
            for k in self.keys:
                a, b = self._slices[k]
                self.m[a:b] = arrays[f"{prefix}.m.{k}"].reshape(-1)
                self.v[a:b] = arrays[f"{prefix}.v.{k}"].reshape(-1)
