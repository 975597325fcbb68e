"""SGD-with-momentum and Adam optimizers over named parameter dicts,
plus the milestone learning-rate schedule."""

from __future__ import annotations

import numpy as np


class OptimizerError(Exception):
    pass


def _check(params: dict, grads: dict) -> None:
    for name, p in params.items():
        if name not in grads:
            raise OptimizerError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise OptimizerError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for {name!r}")


class SGD:
    """param <- param - lr * buffer, buffer <- momentum * buffer + grad."""

    def __init__(self, param_names, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise OptimizerError(f"lr must be > 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise OptimizerError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.buffers = {name: None for name in param_names}

    def step(self, params: dict, grads: dict) -> None:
        _check(params, grads)
        for name, p in params.items():
            g = grads[name].astype(p.dtype)
            buf = self.buffers[name]
            if buf is None:
                buf = np.zeros_like(p)
            buf = self.momentum * buf + g
            self.buffers[name] = buf
            p -= (self.lr * buf).astype(p.dtype)

    def state_arrays(self, prefix: str = "opt.") -> dict:
        out = {}
        for name, buf in self.buffers.items():
            if buf is not None:
                out[f"{prefix}momentum.{name}"] = buf
        return out

    def load_state(self, arrays: dict, prefix: str = "opt.") -> None:
        for name in self.buffers:
            key = f"{prefix}momentum.{name}"
            if key in arrays:
                self.buffers[name] = arrays[key].copy()


class Adam:
    """Standard Adam with bias correction; betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, param_names, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise OptimizerError(f"lr must be > 0, got {lr}")
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: None for name in param_names}
        self.v = {name: None for name in param_names}

    def step(self, params: dict, grads: dict) -> None:
        _check(params, grads)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name].astype(np.float64)
            m = self.m[name] if self.m[name] is not None else np.zeros(p.shape)
            v = self.v[name] if self.v[name] is not None else np.zeros(p.shape)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= update.astype(p.dtype)

    def state_arrays(self, prefix: str = "opt.") -> dict:
        out = {f"{prefix}t": np.array([self.t], dtype=np.int64)}
        for name in self.m:
            if self.m[name] is not None:
                out[f"{prefix}m.{name}"] = self.m[name]
                out[f"{prefix}v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict, prefix: str = "opt.") -> None:
        if f"{prefix}t" in arrays:
            self.t = int(arrays[f"{prefix}t"][0])
        for name in self.m:
            if f"{prefix}m.{name}" in arrays:
                self.m[name] = arrays[f"{prefix}m.{name}"].copy()
                self.v[name] = arrays[f"{prefix}v.{name}"].copy()


def lr_at_epoch(initial: float, decay: float, milestone_fractions, epoch: int,
                total_epochs: int) -> float:
    """Learning rate for a 1-based epoch under the milestone step schedule:
    initial * decay^(number of milestones crossed)."""
    milestones = sorted(int(np.ceil(f * total_epochs)) for f in milestone_fractions)
    crossed = sum(1 for m in milestones if epoch > m)
    return initial * decay ** crossed
