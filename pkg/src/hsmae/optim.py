"""Adam with decoupled weight decay over a flat name -> array parameter dict."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)

    def copy(self) -> "OptState":
        return OptState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.step)


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01


def decays(name: str, p: np.ndarray) -> bool:
    # biases, norm gains and the mask token are exempt
    return p.ndim >= 2


def adamw_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptState,
    cfg: AdamWConfig,
    skip: frozenset[str] = frozenset(),
) -> tuple[dict[str, np.ndarray], OptState]:
    """Return updated copies of ``params`` and ``opt``; names in ``skip`` are left untouched."""
    t = opt.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        if name in skip:
            new_p[name], new_m[name], new_v[name] = p.copy(), opt.m[name].copy(), opt.v[name].copy()
            continue
        g = grads[name].astype(p.dtype)
        m = cfg.beta1 * opt.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * opt.v[name] + (1.0 - cfg.beta2) * g * g
        upd = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if decays(name, p):
            upd = upd + cfg.weight_decay * p
        new_p[name] = (p - cfg.lr * upd).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, OptState(new_m, new_v, t)
