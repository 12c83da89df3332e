"""Adam with bias correction over :class:`ParamSet` trees."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ParamSet, zeros_like


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: ParamSet, lr: float = 1e-3) -> AdamState:
    return AdamState(zeros_like(params), zeros_like(params), 0, lr)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState) -> tuple[ParamSet, AdamState]:
    params.check_compatible(grads)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in layer {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[name] = (p - step).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    new_state = AdamState(
        params.replace(new_m), params.replace(new_v), t, state.lr, b1, b2, state.eps
    )
    return params.replace(new_p), new_state
