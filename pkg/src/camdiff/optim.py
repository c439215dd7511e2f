"""LAMB and AdamW optimizers plus the linear warmup/decay learning-rate rule.

State lives in plain numpy arrays keyed by parameter name so it can be
serialized into checkpoints and restored bit-exactly for resumed runs.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

TRUST_CLAMP = (1e-3, 10.0)


class _AdamBase:
    """Shared Adam-style moment bookkeeping."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-6, weight_decay=0.0):
        for name, p in params.items():
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ValueError(f"optimizer param {name!r} must be a requires_grad Tensor")
        self.params = dict(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _moments(self, name, grad):
        b1, b2 = self.betas
        m = self._m[name]
        v = self._v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        mhat = m / (1.0 - b1 ** self.step_count)
        vhat = v / (1.0 - b2 ** self.step_count)
        return mhat, vhat

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self._m.items()},
            "v": {k: v.copy() for k, v in self._v.items()},
        }

    def load_state_dict(self, state: dict):
        if set(state["m"]) != set(self._m):
            raise ValueError("optimizer state does not match parameter set")
        self.step_count = int(state["step_count"])
        for k in self._m:
            self._m[k] = np.array(state["m"][k], dtype=self._m[k].dtype)
            self._v[k] = np.array(state["v"][k], dtype=self._v[k].dtype)


class LAMB(_AdamBase):
    """Layerwise adaptive moments with a per-tensor trust ratio.

    Each tensor's Adam-style update direction is rescaled by
    ``||w|| / ||update||`` clamped to ``trust_clamp``; a zero weight or
    update norm falls back to ratio 1. Weight decay enters the update
    direction before the trust ratio, decoupled from the moments.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-6,
                 weight_decay=0.0, trust_clamp=TRUST_CLAMP):
        super().__init__(params, lr, betas, eps, weight_decay)
        self.trust_clamp = (float(trust_clamp[0]), float(trust_clamp[1]))

    def step(self):
        self.step_count += 1
        lo, hi = self.trust_clamp
        for name, p in self.params.items():
            if p.grad is None:
                continue
            mhat, vhat = self._moments(name, p.grad)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update += self.weight_decay * p.data
            w_norm = float(np.linalg.norm(p.data))
            u_norm = float(np.linalg.norm(update))
            if w_norm == 0.0 or u_norm == 0.0:
                trust = 1.0
            else:
                trust = min(max(w_norm / u_norm, lo), hi)
            p.data = p.data - (self.lr * trust) * update


class AdamW(_AdamBase):
    """Adam with decoupled weight decay."""

    def step(self):
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            mhat, vhat = self._moments(name, p.grad)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update += self.weight_decay * p.data
            p.data = p.data - self.lr * update


def warmup_linear_lr(step: int, total_steps: int, warmup_steps: int,
                     peak: float, final: float) -> float:
    """Linear ramp 0 -> peak over warmup, then linear decay peak -> final."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step <= 0 or warmup_steps <= 0:
        return 0.0 if warmup_steps > 0 else peak
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak + (final - peak) * min(frac, 1.0)


def make_optimizer(kind: str, params: dict, lr: float, weight_decay: float = 0.0):
    kind = kind.lower()
    if kind == "lamb":
        return LAMB(params, lr=lr, weight_decay=weight_decay)
    if kind == "adamw":
        return AdamW(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'lamb' or 'adamw')")
