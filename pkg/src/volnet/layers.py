"""Parameterized layers: conv + batch-norm, residual basic block, multi-head
attention and the linear classifier.

Layers are plain functions of ``(input, params, state)``. ``params`` maps
dot-separated names to tensors; batch-norm running statistics live in a
separate mapping because they are not trained by the optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from volnet import ops
from volnet.ops import BatchNormState
from volnet.tensor import ShapeError, Tensor


class ParamSpec(NamedTuple):
    name: str
    shape: tuple[int, ...]
    init: str  # "conv" | "linear" | "ones" | "zeros"


@dataclass
class Parameter:
    name: str
    value: Tensor
    trainable: bool = True


@dataclass(frozen=True)
class MHAConfig:
    num_heads: int = 4
    embed_dim: int = 512

    def __post_init__(self):
        if self.num_heads < 1:
            raise ValueError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"block stride must be 1 or 2, got {self.stride}")

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


def fan_in(spec: ParamSpec) -> int:
    if spec.init == "conv":
        return math.prod(spec.shape[1:])
    if spec.init == "linear":
        return spec.shape[0]
    raise ValueError(f"{spec.name}: fan-in undefined for init {spec.init!r}")


def init_params(specs: Iterable[ParamSpec], seed: int | np.random.Generator, dtype=np.float32) -> list[Parameter]:
    """Kaiming-uniform weights (variance 2/fan_in), unit gammas, zero biases.

    Draws happen in ``specs`` order from one generator, so a given seed and
    spec list always produce the same values.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for spec in specs:
        if spec.init in ("conv", "linear"):
            bound = math.sqrt(6.0 / fan_in(spec))
            value = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.init == "ones":
            value = np.ones(spec.shape)
        elif spec.init == "zeros":
            value = np.zeros(spec.shape)
        else:
            raise ValueError(f"unknown init {spec.init!r}")
        out.append(Parameter(spec.name, Tensor(value.astype(dtype), requires_grad=True, name=spec.name)))
    return out


# -- conv + bn ----------------------------------------------------------------

def conv_bn_specs(prefix: str, cin: int, cout: int, kernel: tuple[int, int, int]) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}conv.weight", (cout, cin, *kernel), "conv"),
        ParamSpec(f"{prefix}bn.gamma", (cout,), "ones"),
        ParamSpec(f"{prefix}bn.beta", (cout,), "zeros"),
    ]


def conv_bn(x, params, bn_state, prefix, stride, padding, train, relu=True):
    y = ops.conv3d(x, params[f"{prefix}conv.weight"], None, stride=stride, padding=padding)
    y = ops.batchnorm3d(y, params[f"{prefix}bn.gamma"], params[f"{prefix}bn.beta"], bn_state[f"{prefix}bn"], train)
    return ops.relu(y) if relu else y


# -- residual basic block ----------------------------------------------------

def block_param_specs(cfg: BlockConfig, prefix: str = "") -> list[ParamSpec]:
    specs = conv_bn_specs(f"{prefix}conv1.", cfg.in_channels, cfg.out_channels, (3, 3, 3))
    specs += conv_bn_specs(f"{prefix}conv2.", cfg.out_channels, cfg.out_channels, (3, 3, 3))
    if cfg.has_projection:
        specs += conv_bn_specs(f"{prefix}downsample.", cfg.in_channels, cfg.out_channels, (1, 1, 1))
    return specs


def block_bn_specs(cfg: BlockConfig, prefix: str = "") -> list[tuple[str, int]]:
    names = [f"{prefix}conv1.bn", f"{prefix}conv2.bn"]
    if cfg.has_projection:
        names.append(f"{prefix}downsample.bn")
    return [(n, cfg.out_channels) for n in names]


def basic_block_forward(
    x: Tensor,
    cfg: BlockConfig,
    params: Mapping[str, Tensor],
    bn_state: Mapping[str, BatchNormState],
    train: bool,
    prefix: str = "",
) -> Tensor:
    """conv3x3x3(stride) -> BN -> relu -> conv3x3x3 -> BN, plus shortcut, then relu."""
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"basic block expects [N,{cfg.in_channels},D,H,W], got {x.shape}")
    s = cfg.stride
    y = conv_bn(x, params, bn_state, f"{prefix}conv1.", (s, s, s), 1, train)
    y = conv_bn(y, params, bn_state, f"{prefix}conv2.", 1, 1, train, relu=False)
    if cfg.has_projection:
        shortcut = conv_bn(x, params, bn_state, f"{prefix}downsample.", (s, s, s), 0, train, relu=False)
    else:
        shortcut = x
    return ops.relu(ops.add(y, shortcut))


# -- attention ---------------------------------------------------------------

def mha_param_specs(cfg: MHAConfig, prefix: str = "") -> list[ParamSpec]:
    e = cfg.embed_dim
    return [
        ParamSpec(f"{prefix}q_weight", (e, e), "linear"),
        ParamSpec(f"{prefix}k_weight", (e, e), "linear"),
        ParamSpec(f"{prefix}v_weight", (e, e), "linear"),
        ParamSpec(f"{prefix}o_weight", (e, e), "linear"),
        ParamSpec(f"{prefix}o_bias", (e,), "zeros"),
    ]


def attention_weights(tokens: Tensor, cfg: MHAConfig, params: Mapping[str, Tensor], prefix: str = "") -> Tensor:
    """Per-head attention matrices ``[N, heads, T, T]`` (rows sum to 1)."""
    q, k, _ = _qkv(tokens, cfg, params, prefix)
    return _weights(q, k, cfg)


def _qkv(tokens, cfg, params, prefix):
    n, t, e = tokens.shape
    h, d = cfg.num_heads, cfg.head_dim

    def heads(w):
        # [N, T, E] -> [N, heads, T, head_dim]; head i owns columns i*d:(i+1)*d.
        return ops.permute(ops.reshape(ops.matmul(tokens, w), (n, t, h, d)), (0, 2, 1, 3))

    return (heads(params[f"{prefix}q_weight"]), heads(params[f"{prefix}k_weight"]),
            heads(params[f"{prefix}v_weight"]))


def _weights(q, k, cfg):
    scores = ops.scale(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim))
    return ops.softmax(scores, axis=-1)


def mha_forward(tokens: Tensor, cfg: MHAConfig, params: Mapping[str, Tensor], prefix: str = "") -> Tensor:
    """Residual multi-head self-attention over ``[N, T, E]`` tokens.

    No positional encoding and no normalization, so the block is
    permutation-equivariant over T and reduces to the identity when the
    output projection is zero.
    """
    if tokens.ndim != 3 or tokens.shape[2] != cfg.embed_dim:
        raise ShapeError(f"mha expects [N,T,{cfg.embed_dim}] tokens, got {tokens.shape}")
    n, t, e = tokens.shape
    q, k, v = _qkv(tokens, cfg, params, prefix)
    heads = ops.matmul(_weights(q, k, cfg), v)
    merged = ops.reshape(ops.permute(heads, (0, 2, 1, 3)), (n, t, e))
    attended = ops.add(ops.matmul(merged, params[f"{prefix}o_weight"]), params[f"{prefix}o_bias"])
    return ops.add(tokens, attended)


# -- classifier --------------------------------------------------------------

def linear_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = ops.matmul(x, weight)
    if bias is None:
        return y
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return ops.add(y, bias)
