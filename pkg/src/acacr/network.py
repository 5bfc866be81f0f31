"""Residual cloud-removal network.

Layout (18 layers): stem conv+ReLU, 8 residual blocks, attention block,
3 residual blocks, attention block, 3 residual blocks, refine conv, plus a
long skip adding the input to the refined output. The refine conv starts at
zero so a freshly built network is the identity map.

The two attention slots hold RACABs (stride-2 conv path, attention at half
resolution, bilinear x2 upsample) for the 'ca'/'ac' variants, or plain
residual blocks for the 'base' variant.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .attention import (AttentionConfig, AttentionParams, attention_forward,
                        init_attention_params)

__all__ = [
    "NetworkConfig", "BlockParams", "NetworkParams", "CheckpointError",
    "build_network", "residual_block", "racab", "forward",
    "save_checkpoint", "load_checkpoint",
]

STAGE_PLAN = (8, 1, 3, 1, 3)   # RB / attention / RB / attention / RB
ATTENTION_STAGES = (1, 3)
NET_VARIANTS = ("base", "ca", "ac")


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkConfig:
    c_in: int = 3
    channels: int = 32          # full-scale runs use 256
    alpha: float = 0.1
    variant: str = "ac"         # base | ca | ac
    patch_size: int = 2

    def __post_init__(self):
        if self.variant not in NET_VARIANTS:
            raise ValueError(f"unknown network variant {self.variant!r}")
        if self.channels % 4:
            raise ValueError("channels must be divisible by 4")
        if self.c_in < 1 or self.channels < 1 or self.patch_size < 1:
            raise ValueError("c_in, channels and patch_size must be positive")

    @property
    def size_multiple(self) -> int:
        # stride-2 path then patching at half resolution
        return 2 * self.patch_size

    def attention_config(self) -> Optional[AttentionConfig]:
        if self.variant == "base":
            return None
        return AttentionConfig(channels=self.channels, variant=self.variant,
                               patch_size=self.patch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class BlockParams:
    conv1: Tensor
    conv2: Tensor
    attn: Optional[AttentionParams] = None

    @property
    def is_attention(self) -> bool:
        return self.attn is not None

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.conv1", self.conv1), (f"{prefix}.conv2", self.conv2)]
        if self.attn is not None:
            out.extend(self.attn.named(f"{prefix}.attn."))
        return out


@dataclass
class NetworkParams:
    config: NetworkConfig
    stem: Tensor
    blocks: list[BlockParams]
    refine: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("stem", self.stem)]
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named(f"block{i:02d}"))
        out.append(("refine", self.refine))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()


def _he_kernel(rng: T.RngStream, k: int, cin: int, cout: int, dtype) -> Tensor:
    std = math.sqrt(2.0 / (k * k * cin))
    return Tensor(rng.normal((k, k, cin, cout), std=std, dtype=dtype), requires_grad=True)


def build_network(config: NetworkConfig, rng: T.RngStream,
                  dtype=np.float32) -> NetworkParams:
    c = config.channels
    attn_cfg = config.attention_config()
    blocks: list[BlockParams] = []
    for stage, count in enumerate(STAGE_PLAN):
        attention_stage = stage in ATTENTION_STAGES
        for _ in range(count):
            blk = BlockParams(
                conv1=_he_kernel(rng, 3, c, c, dtype),
                conv2=_he_kernel(rng, 3, c, c, dtype),
            )
            if attention_stage and attn_cfg is not None:
                blk.attn = init_attention_params(attn_cfg, rng, dtype=dtype)
            blocks.append(blk)
    return NetworkParams(
        config=config,
        stem=_he_kernel(rng, 3, config.c_in, c, dtype),
        blocks=blocks,
        # zero refine conv makes the whole network the identity at init
        refine=Tensor(np.zeros((3, 3, c, config.c_in), dtype=dtype), requires_grad=True),
    )


def residual_block(x: Tensor, blk: BlockParams, alpha: float) -> Tensor:
    inner = T.relu(T.conv2d(T.relu(T.conv2d(x, blk.conv1)), blk.conv2))
    return T.add(x, T.scalar_mul(inner, alpha))


def racab(x: Tensor, blk: BlockParams, alpha: float,
          attn_config: AttentionConfig) -> Tensor:
    """Residual attention block: stride-2 conv, conv, attention at half
    resolution, bilinear x2 upsample, scaled residual add."""
    h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"attention block needs even extents, got {h}x{w}")
    s = attn_config.patch_size
    if (h // 2) % s or (w // 2) % s:
        raise ValueError(f"half-resolution extents {h // 2}x{w // 2} must be "
                         f"divisible by patch size {s}")
    feat = T.relu(T.conv2d(T.relu(T.conv2d(x, blk.conv1, stride=2)), blk.conv2))
    att = attention_forward(feat, blk.attn, attn_config)
    up = T.bilinear_upsample(att, 2)
    return T.add(x, T.scalar_mul(up, alpha))


def forward(x: Tensor, params: NetworkParams) -> Tensor:
    """Stem -> blocks -> refine, then the long skip adds the input back."""
    config = params.config
    h, w, c = x.shape
    if c != config.c_in:
        raise ValueError(f"input has {c} bands, network expects {config.c_in}")
    mult = config.size_multiple
    if h % mult or w % mult:
        raise ValueError(f"input extents {h}x{w} must be multiples of {mult}")
    attn_cfg = config.attention_config()
    feat = T.relu(T.conv2d(x, params.stem))
    for blk in params.blocks:
        if blk.is_attention:
            feat = racab(feat, blk, config.alpha, attn_cfg)
        else:
            feat = residual_block(feat, blk, config.alpha)
    refined = T.conv2d(feat, params.refine)
    return T.add(x, refined)


# -- checkpoints ------------------------------------------------------------
# File layout: magic 'ACKP', u32 LE header length, compact JSON header,
# then TNSR blocks in the order declared by header['tensors'].

_CKPT_MAGIC = b"ACKP"
CKPT_VERSION = 1


def save_checkpoint(path, params: NetworkParams, extra: Optional[dict] = None,
                    extra_tensors: Optional[list[tuple[str, np.ndarray]]] = None) -> None:
    named = [(name, t.data) for name, t in params.named()]
    if extra_tensors:
        named.extend(extra_tensors)
    header = {
        "version": CKPT_VERSION,
        "network": params.config.to_dict(),
        "tensors": [name for name, _ in named],
    }
    if extra:
        header.update(extra)
    hjson = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hjson)))
        fh.write(hjson)
        for _, arr in named:
            fh.write(T.tnsr_bytes(arr))


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    config = NetworkConfig.from_dict(header["network"])

    arrays: dict[str, np.ndarray] = {}
    pos = 8 + hlen
    for name in header["tensors"]:
        try:
            arr, pos = T.tnsr_from_bytes(buf, pos)
        except T.TnsrFormatError as exc:
            raise CheckpointError(f"corrupt tensor block {name!r}: {exc}") from exc
        arrays[name] = arr

    rng = T.RngStream(0)
    params = build_network(config, rng, dtype=np.float32)
    for name, t in params.named():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(f"tensor {name!r} shape {arrays[name].shape} "
                                  f"does not match config shape {t.data.shape}")
        t.data = arrays[name].astype(t.data.dtype)
    header["_extra_arrays"] = {k: v for k, v in arrays.items()
                               if k not in dict(params.named())}
    return params, header
