"""3D ResNet-18 with an optional multi-head attention block before pooling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from volnet import checkpoint, layers, ops
from volnet.layers import BlockConfig, MHAConfig, Parameter, ParamSpec
from volnet.ops import BatchNormState, GeometryError
from volnet.tensor import Tensor

VARIANTS = ("plain", "with_mha")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "with_mha"
    channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    in_channels: int = 1
    num_heads: int = 4
    stem_kernel: tuple[int, int, int] = (3, 7, 7)
    stem_stride: tuple[int, int, int] = (1, 2, 2)
    stem_padding: tuple[int, int, int] = (1, 3, 3)
    stage_strides: tuple[int, int, int, int] = (1, 2, 2, 2)
    blocks_per_stage: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ValueError(f"need four positive stage widths, got {self.channels}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.variant == "with_mha":
            self.mha  # validates divisibility

    @classmethod
    def tiny(cls, variant: str = "with_mha") -> "ModelConfig":
        return cls(variant=variant, channels=(4, 8, 16, 32))

    @property
    def mha(self) -> MHAConfig | None:
        if self.variant != "with_mha":
            return None
        return MHAConfig(num_heads=self.num_heads, embed_dim=self.channels[-1])

    def blocks(self) -> Iterator[tuple[str, BlockConfig]]:
        cin = self.channels[0]
        for si, (cout, stride) in enumerate(zip(self.channels, self.stage_strides)):
            for bi in range(self.blocks_per_stage):
                yield f"layer{si + 1}.{bi}.", BlockConfig(cin, cout, stride if bi == 0 else 1)
                cin = cout


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict[str, Tensor]
    bn_state: dict[str, BatchNormState] = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        return [Parameter(name, t) for name, t in self.params.items()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    specs = layers.conv_bn_specs("stem.", cfg.in_channels, cfg.channels[0], cfg.stem_kernel)
    for prefix, bcfg in cfg.blocks():
        specs += layers.block_param_specs(bcfg, prefix)
    if cfg.mha is not None:
        specs += layers.mha_param_specs(cfg.mha, "mha.")
    specs += [ParamSpec("fc.weight", (cfg.channels[-1], 1), "linear"), ParamSpec("fc.bias", (1,), "zeros")]
    return specs


def bn_specs(cfg: ModelConfig) -> list[tuple[str, int]]:
    out = [("stem.bn", cfg.channels[0])]
    for prefix, bcfg in cfg.blocks():
        out += layers.block_bn_specs(bcfg, prefix)
    return out


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    params = {p.name: p.value for p in layers.init_params(param_specs(cfg), seed)}
    return ModelParams(cfg, params, {name: BatchNormState(c) for name, c in bn_specs(cfg)})


def feature_shapes(cfg: ModelConfig, spatial: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Spatial dims after the stem and after each stage; raises on empty output."""
    shapes = []
    cur = ops.conv3d_output_shape(spatial, cfg.stem_kernel, cfg.stem_stride, cfg.stem_padding)
    if any(n < k for n, k in zip(spatial, cfg.stem_kernel)) or min(cur) < 1:
        raise GeometryError(f"input {tuple(spatial)} is too small for the {cfg.stem_kernel} stem")
    shapes.append(cur)
    for stride in cfg.stage_strides:
        cur = ops.conv3d_output_shape(cur, (3, 3, 3), (stride,) * 3, (1, 1, 1))
        shapes.append(cur)
    return shapes


def forward(mp: ModelParams, batch: Tensor, train: bool = False) -> Tensor:
    """Logits ``[N]`` for a ``[N, C, D, H, W]`` batch.

    ``train`` selects batch statistics (and running-stat updates) in the
    batch-norm layers; eval mode is side-effect free.
    """
    cfg = mp.config
    if batch.ndim != 5 or batch.shape[1] != cfg.in_channels:
        raise GeometryError(f"expected [N,{cfg.in_channels},D,H,W] input, got {batch.shape}")
    feature_shapes(cfg, batch.shape[2:])
    p, st = mp.params, mp.bn_state
    x = layers.conv_bn(batch, p, st, "stem.", cfg.stem_stride, cfg.stem_padding, train)
    for prefix, bcfg in cfg.blocks():
        x = layers.basic_block_forward(x, bcfg, p, st, train, prefix)
    if cfg.mha is not None:
        n, e, d, h, w = x.shape
        tokens = ops.permute(ops.reshape(x, (n, e, d * h * w)), (0, 2, 1))
        tokens = layers.mha_forward(tokens, cfg.mha, p, "mha.")
        x = ops.reshape(ops.permute(tokens, (0, 2, 1)), (n, e, d, h, w))
    pooled = ops.avgpool3d_global(x)
    logits = layers.linear_forward(pooled, p["fc.weight"], p["fc.bias"])
    return ops.reshape(logits, (logits.shape[0],))


def predict(mp: ModelParams, batch: Tensor) -> Tensor:
    """Eval-mode probabilities ``sigmoid(logit)``."""
    return Tensor(ops.stable_sigmoid(forward(mp, batch, train=False).data))


# -- checkpoints -------------------------------------------------------------

def model_tensors(mp: ModelParams) -> dict[str, np.ndarray]:
    cfg = mp.config
    out = {
        "meta.variant": np.array([VARIANTS.index(cfg.variant)], dtype=np.float32),
        "meta.channels": np.array(cfg.channels, dtype=np.float32),
        "meta.in_channels": np.array([cfg.in_channels], dtype=np.float32),
        "meta.num_heads": np.array([cfg.num_heads], dtype=np.float32),
    }
    out.update({name: t.data for name, t in mp.params.items()})
    for name, s in mp.bn_state.items():
        out[f"buf.{name}.running_mean"] = s.running_mean
        out[f"buf.{name}.running_var"] = s.running_var
    return out


def model_from_tensors(tensors: dict[str, np.ndarray]) -> ModelParams:
    try:
        cfg = ModelConfig(
            variant=VARIANTS[int(tensors["meta.variant"][0])],
            channels=tuple(int(c) for c in tensors["meta.channels"]),
            in_channels=int(tensors["meta.in_channels"][0]),
            num_heads=int(tensors["meta.num_heads"][0]),
        )
    except KeyError as err:
        raise checkpoint.CheckpointError(f"checkpoint lacks model metadata {err}") from None
    mp = build_model(cfg, seed=0)
    for name, t in mp.params.items():
        if name not in tensors or tensors[name].shape != t.shape:
            raise checkpoint.CheckpointError(f"checkpoint tensor {name!r} missing or mis-shaped")
        t.data[...] = tensors[name]
    for name, s in mp.bn_state.items():
        s.running_mean[...] = tensors[f"buf.{name}.running_mean"]
        s.running_var[...] = tensors[f"buf.{name}.running_var"]
    return mp


def save_model(path: str | Path, mp: ModelParams, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = model_tensors(mp)
    if extra:
        tensors.update(extra)
    checkpoint.save_checkpoint(path, tensors)


def load_model(path: str | Path) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Model plus the remaining (``opt.``/``meta.``) tensors of the file."""
    tensors = checkpoint.load_checkpoint(path)
    mp = model_from_tensors(tensors)
    used = set(model_tensors(mp))
    return mp, {k: v for k, v in tensors.items() if k not in used}
