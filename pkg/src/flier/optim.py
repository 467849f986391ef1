"""AdamW, cosine schedule, layer-wise lr decay and EMA shadow weights."""
from __future__ import annotations

import math
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from .tensor import ParameterSet, ShapeError


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def llrd_scale(depth: int, max_depth: int, decay: float = 0.7) -> float:
    """Multiplier ``decay ** (max_depth - depth)``; the top layer gets 1."""
    if not 0 <= depth <= max_depth:
        raise ValueError(f"depth {depth} outside [0, {max_depth}]")
    return decay ** (max_depth - depth)


def layer_lrs(params: ParameterSet, lr: float, decay: float) -> dict[str, float]:
    top = params.max_depth()
    return {name: lr * llrd_scale(params.depth(name), top, decay) for name in params}


class AdamW:
    """Adam with decoupled weight decay.

    Only parameters holding a gradient are touched by :meth:`step`; a
    parameter absent from a phase's graph keeps its value and its moments.
    """

    def __init__(self, params: ParameterSet, weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self, lrs, names=None) -> None:
        """``lrs`` maps parameter name to learning rate (or is a single float).

        ``names`` restricts the update to a subset of parameters.
        """
        for name, p in self.params.items():
            if p.grad is None or (names is not None and name not in names):
                continue
            lr = lrs if isinstance(lrs, float) else lrs[name]
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data),
                                         "t": 0}
            adamw_update(p, st, lr, self.weight_decay, self.beta1, self.beta2, self.eps)


def adamw_update(p, st: dict, lr: float, weight_decay: float, beta1: float, beta2: float,
                 eps: float) -> None:
    g = p.grad
    st["t"] += 1
    t = st["t"]
    st["m"] = beta1 * st["m"] + (1 - beta1) * g
    st["v"] = beta2 * st["v"] + (1 - beta2) * g * g
    m_hat = st["m"] / (1 - beta1 ** t)
    v_hat = st["v"] / (1 - beta2 ** t)
    data = p.data
    if weight_decay:
        data = data - lr * weight_decay * data
    p.data = data - lr * m_hat / (np.sqrt(v_hat) + eps)


class EmaShadow:
    """Exponential moving average of a parameter set."""

    def __init__(self, params: ParameterSet, momentum: float = 0.9998):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
        self.momentum = momentum
        self.shadow: "OrderedDict[str, np.ndarray]" = params.state()

    def update(self, params: ParameterSet) -> None:
        names = params.names()
        if names != list(self.shadow):
            raise KeyError("EMA shadow and parameter set have different names")
        m = self.momentum
        for name, p in params.items():
            prev = self.shadow[name]
            if prev.shape != p.shape:
                raise ShapeError(f"EMA shape mismatch for {name!r}: {prev.shape} vs {p.shape}")
            self.shadow[name] = m * prev + (1.0 - m) * p.data

    @contextmanager
    def applied(self, params: ParameterSet):
        """Temporarily swap the shadow weights into ``params``."""
        backup = params.state()
        params.load_state(self.shadow)
        try:
            yield params
        finally:
            params.load_state(backup)
