"""Decoupled-weight-decay adaptive-moment optimizer and cosine LR schedule.

Weight decay is applied only to tensors of rank >= 2 (projection matrices
and convolution kernels); biases, norm gains, and per-channel vectors are
exempt.  The moment buffers are part of the optimizer state dict so a
resumed run continues bit-identically.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine import Tensor


class AdamW:
    def __init__(
        self,
        params: Sequence[Tuple[str, Tensor]],
        lr: float = 2e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        names = [n for n, _ in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params: List[Tuple[str, Tensor]] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in self.params}

    def zero_grad(self):
        for _, t in self.params:
            t.zero_grad()

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else float(lr)
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, t in self.params:
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and t.data.ndim >= 2:
                t.data -= lr * self.weight_decay * t.data
            t.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"step": np.array([self.step_count], dtype=np.int64)}
        for name in self.m:
            state[f"m.{name}"] = self.m[name].copy()
            state[f"v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.step_count = int(np.asarray(state["step"]).reshape(-1)[0])
        for name in self.m:
            for prefix, buf in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{name}"
                if key not in state:
                    raise ValueError(f"optimizer state missing {key}")
                arr = np.asarray(state[key])
                if arr.shape != buf[name].shape:
                    raise ValueError(f"optimizer state shape mismatch for {key}")
                buf[name][...] = arr.astype(buf[name].dtype)


def cosine_lr(step: int, total_steps: int, base_lr: float = 2e-4, min_lr: float = 1e-6) -> float:
    """Cosine annealing from base_lr at step 0 to min_lr at the final step."""
    if total_steps <= 1:
        return base_lr
    progress = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
