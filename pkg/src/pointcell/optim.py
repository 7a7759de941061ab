"""AdamW with decoupled weight decay.

Decay multiplies the parameter by (1 - lr * weight_decay) before the
Adam update; it never flows through the moment estimates. Moments are
bias-corrected. State arrays are keyed by parameter name so they can
be persisted alongside model weights.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamW:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        if lr < 0:
            raise ContractError(f"lr must be non-negative, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ContractError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0:
            raise ContractError(f"eps must be positive, got {eps}")
        if weight_decay < 0:
            raise ContractError(f"weight_decay must be non-negative, got {weight_decay}")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """Apply one update. Every parameter must carry a gradient."""
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter '{name}' has no gradient")
            if p.grad.shape != p.data.shape:
                raise ContractError(f"parameter '{name}' gradient shape {p.grad.shape} != {p.data.shape}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment estimates under namespaced keys, for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            mk, vk = f"opt.m.{k}", f"opt.v.{k}"
            if mk not in arrays or vk not in arrays:
                raise ContractError(f"optimizer state missing for parameter '{k}'")
            if arrays[mk].shape != self.params[k].data.shape:
                raise ContractError(f"optimizer state shape mismatch for '{k}'")
            self.m[k] = arrays[mk].astype(np.float64).copy()
            self.v[k] = arrays[vk].astype(np.float64).copy()
        self.step_count = int(step_count)
