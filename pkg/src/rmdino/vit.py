"""Functional ViT backbone and DINO projection head.

Parameters live in a flat ``dict[str, Tensor]`` so the trainer can treat the
student and teacher as isomorphic trees (EMA, checkpointing, weight decay
masks all key off the names).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from . import tensor as T
from .resample import grid_interp_matrix
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    img_size: int = 64
    local_img_size: int = 32
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    heads: int = 3
    mlp_ratio: float = 4.0
    head_hidden: int = 256
    head_bottleneck: int = 64
    out_dim: int = 256
    in_chans: int = 3

    def __post_init__(self):
        for size in (self.img_size, self.local_img_size):
            if size % self.patch_size:
                raise ValueError(f"view size {size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.out_dim < 2:
            raise ValueError("out_dim must be at least 2")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full(cls) -> "ViTConfig":
        """ViT-Tiny/16 with the 65,536-way DINO head."""
        return cls(img_size=224, local_img_size=96, patch_size=16, embed_dim=192, depth=12,
                   heads=3, head_hidden=2048, head_bottleneck=256, out_dim=65536)


@dataclass
class BackboneOutput:
    cls_embedding: Tensor  # [B × D]
    last_attn: np.ndarray  # [B × heads × tokens × tokens]


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    return np.clip(rng.standard_normal(shape) * std, -2 * std, 2 * std)


def init_params(cfg: ViTConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Deterministic initialisation: truncated-normal weights, zero biases, unit norms."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    d, c, p = cfg.embed_dim, cfg.in_chans, cfg.patch_size
    raw: dict[str, np.ndarray] = {
        "cls_token": _trunc_normal(rng, (d,)),
        "pos_embed": _trunc_normal(rng, (cfg.grid * cfg.grid + 1, d)),
        "patch_embed.w": _trunc_normal(rng, (c * p * p, d)),
        "patch_embed.b": np.zeros(d),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        raw[b + "norm1.g"] = np.ones(d)
        raw[b + "norm1.b"] = np.zeros(d)
        raw[b + "attn.qkv.w"] = _trunc_normal(rng, (d, 3 * d))
        raw[b + "attn.qkv.b"] = np.zeros(3 * d)
        raw[b + "attn.proj.w"] = _trunc_normal(rng, (d, d))
        raw[b + "attn.proj.b"] = np.zeros(d)
        raw[b + "norm2.g"] = np.ones(d)
        raw[b + "norm2.b"] = np.zeros(d)
        raw[b + "mlp.fc1.w"] = _trunc_normal(rng, (d, cfg.mlp_dim))
        raw[b + "mlp.fc1.b"] = np.zeros(cfg.mlp_dim)
        raw[b + "mlp.fc2.w"] = _trunc_normal(rng, (cfg.mlp_dim, d))
        raw[b + "mlp.fc2.b"] = np.zeros(d)
    raw["norm.g"] = np.ones(d)
    raw["norm.b"] = np.zeros(d)
    dims = [d, cfg.head_hidden, cfg.head_hidden, cfg.head_bottleneck]
    for j in range(3):
        raw[f"head.fc{j + 1}.w"] = _trunc_normal(rng, (dims[j], dims[j + 1]))
        raw[f"head.fc{j + 1}.b"] = np.zeros(dims[j + 1])
    raw["head.last.v"] = _trunc_normal(rng, (cfg.head_bottleneck, cfg.out_dim))
    return {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in raw.items()}


def is_decayed(name: str) -> bool:
    """Weight decay applies to weight matrices only."""
    return name.endswith(".w") or name.endswith(".v")


def is_head(name: str) -> bool:
    return name.startswith("head.")


def num_tokens(h: int, w: int, p: int) -> int:
    return (h // p) * (w // p) + 1


@lru_cache(maxsize=16)
def _pos_interp(src: int, gh: int, gw: int) -> np.ndarray:
    return grid_interp_matrix((src, src), (gh, gw))


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """[B×C×H×W] -> [B × P × C·p·p], patches in row-major grid order."""
    b, c, h, w = images.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * p * p))


def position_table(params: dict[str, Tensor], cfg: ViTConfig, gh: int, gw: int) -> Tensor:
    pos = params["pos_embed"]
    if (gh, gw) == (cfg.grid, cfg.grid):
        return pos
    patch_pos = T.getitem(pos, slice(1, None))
    interp = Tensor(_pos_interp(cfg.grid, gh, gw).astype(pos.dtype))
    return T.concat([T.getitem(pos, slice(0, 1)), T.matmul(interp, patch_pos)], axis=0)


def patch_embed(images: np.ndarray, cfg: ViTConfig, params: dict[str, Tensor]) -> Tensor:
    """Tokens [B × (P+1) × D]: CLS prepended, positions added."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != cfg.in_chans:
        raise ValueError(f"expected [B×{cfg.in_chans}×H×W], got {images.shape}")
    b, _, h, w = images.shape
    p = cfg.patch_size
    dtype = params["patch_embed.w"].dtype
    patches = Tensor(patchify(images.astype(dtype, copy=False), p))
    x = T.matmul(patches, params["patch_embed.w"]) + params["patch_embed.b"]
    cls = T.add(Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=dtype)), params["cls_token"])
    x = T.concat([cls, x], axis=1)
    return T.add(x, position_table(params, cfg, h // p, w // p))


def _block(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: ViTConfig) -> tuple[Tensor, np.ndarray]:
    b, n, d = x.shape
    hd = d // cfg.heads
    h = T.layer_norm(x, params[prefix + "norm1.g"], params[prefix + "norm1.b"])
    qkv = T.matmul(h, params[prefix + "attn.qkv.w"]) + params[prefix + "attn.qkv.b"]
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, cfg.heads, hd)), (2, 0, 3, 1, 4))
    out, attn = T.scaled_dot_attention(qkv[0], qkv[1], qkv[2])
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
    x = x + (T.matmul(out, params[prefix + "attn.proj.w"]) + params[prefix + "attn.proj.b"])
    h = T.layer_norm(x, params[prefix + "norm2.g"], params[prefix + "norm2.b"])
    h = T.gelu(T.matmul(h, params[prefix + "mlp.fc1.w"]) + params[prefix + "mlp.fc1.b"])
    h = T.matmul(h, params[prefix + "mlp.fc2.w"]) + params[prefix + "mlp.fc2.b"]
    return x + h, attn


def forward(images: np.ndarray, cfg: ViTConfig, params: dict[str, Tensor]) -> BackboneOutput:
    x = patch_embed(images, cfg, params)
    attn = None
    for i in range(cfg.depth):
        x, attn = _block(x, params, f"blocks.{i}.", cfg)
    cls = T.layer_norm(T.getitem(x, (slice(None), 0)), params["norm.g"], params["norm.b"])
    return BackboneOutput(cls, attn)


def head_bottleneck(emb: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = T.gelu(T.matmul(emb, params["head.fc1.w"]) + params["head.fc1.b"])
    h = T.gelu(T.matmul(h, params["head.fc2.w"]) + params["head.fc2.b"])
    return T.matmul(h, params["head.fc3.w"]) + params["head.fc3.b"]


def head_last(z: Tensor, params: dict[str, Tensor]) -> Tensor:
    """L2-normalise the bottleneck, then the weight-normalised (unit-column) linear layer."""
    w = T.l2_normalize(params["head.last.v"], axis=0)
    return T.matmul(T.l2_normalize(z, axis=-1), w)


def head_forward(emb: Tensor, params: dict[str, Tensor]) -> Tensor:
    if emb.shape[-1] != params["head.fc1.w"].shape[0]:
        raise ValueError(f"head expects dim {params['head.fc1.w'].shape[0]}, got {emb.shape[-1]}")
    return head_last(head_bottleneck(emb, params), params)
