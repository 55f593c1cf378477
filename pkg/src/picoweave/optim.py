"""AdamW with decoupled weight decay and the warmup + half-cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from picoweave.tensor import NonFiniteError, Tensor


def lr_at_step(step: int, peak_lr: float, warmup_steps: int, total_steps: int,
               min_lr: float = 0.0) -> float:
    """Linear ramp 0 -> peak over warmup, then half-cosine peak -> min."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + (peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-decay Adam over a name -> Tensor parameter map.

    Parameters whose gradient is unset are skipped entirely for the step
    (no moment update, no decay), mirroring the usual grad-is-None
    semantics. Decay multiplies parameters by (1 - lr * wd) after the
    moment update.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.95,
                 weight_decay: float = 0.1, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p._grad
            if g is None:
                continue
            if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"{k}.m"] = self.m[k]
            out[f"{k}.v"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = arrays[f"{k}.m"].astype(self.m[k].dtype, copy=True)
            self.v[k] = arrays[f"{k}.v"].astype(self.v[k].dtype, copy=True)
