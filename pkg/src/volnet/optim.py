"""Binary cross-entropy on logits and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from volnet import ops
from volnet.tensor import GradMap, ShapeError, Tensor


def bce_with_logits(logits: Tensor, targets: Tensor, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy computed from logits without overflow.

    Per element: ``max(x, 0) - x*y + log(1 + exp(-|x|))``. ``pos_weight``
    multiplies the positive-class term (1.0 means no class weighting).
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    y = targets.data.astype(x.dtype)
    n = x.size
    softplus_neg = np.maximum(-x, 0) + np.log1p(np.exp(-np.abs(x)))  # log(1 + exp(-x))
    w = 1 + (pos_weight - 1) * y
    loss = np.asarray(((1 - y) * x + w * softplus_neg).mean(), dtype=x.dtype)

    def back(g):
        return ((g / n) * ((1 - y) - w * ops.stable_sigmoid(-x))).astype(x.dtype), None

    return ops._emit("bce_with_logits", loss, (logits, targets), back)


@dataclass
class Hyperparams:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 50

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([self.t], dtype=np.float32)}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "AdamState":
        state = cls(t=int(tensors["opt.t"][0]) if "opt.t" in tensors else 0)
        for key, arr in tensors.items():
            if key.startswith("opt.m."):
                state.m[key[6:]] = np.array(arr)
            elif key.startswith("opt.v."):
                state.v[key[6:]] = np.array(arr)
        return state


class MissingGradientError(KeyError):
    pass


def adam_step(params: Mapping[str, Tensor], grads, state: AdamState, hp: Hyperparams) -> None:
    """One in-place Adam update of every parameter in ``params``.

    ``grads`` is a :class:`GradMap` from the tape (looked up per tensor) or a
    plain ``name -> array`` mapping.
    """
    resolved = {}
    for name, p in params.items():
        if isinstance(grads, GradMap):
            g = grads.grad_of(p)
            g = None if g is None else g.data
        else:
            g = grads.get(name)
        if g is None:
            raise MissingGradientError(f"no gradient for trainable parameter {name!r}")
        resolved[name] = np.asarray(g, dtype=p.dtype)
    state.t += 1
    b1, b2 = hp.beta1, hp.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = resolved[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= hp.lr * (m / c1) / (np.sqrt(v / c2) + hp.eps)
