"""Attention-map export and the masked-view preview panels."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import vit
from .data import write_pgm, write_png
from .resample import upsample_nearest
from .tensor import Tensor
from .views import IMAGENET_MEAN, IMAGENET_STD, ViewConfig, make_views, normalize


def to_gray(m: np.ndarray) -> np.ndarray:
    """Min-max normalise to [0, 255] bytes; a constant map becomes all 128."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def cls_attention(attn: np.ndarray, gh: int, gw: int) -> np.ndarray:
    """CLS→patch rows of one image's last-block attention, [heads × g_H × g_W]."""
    return attn[:, 0, 1:].reshape(attn.shape[0], gh, gw)


@dataclass
class AttentionExport:
    paths: list[Path]
    attn: np.ndarray  # raw [heads × tokens × tokens] before normalisation
    maps: list[np.ndarray]  # uint8 [H × W] per written file


def export_attention(params: dict[str, Tensor], cfg: vit.ViTConfig, image: np.ndarray,
                     out_dir: str | Path, head_mode: str = "all") -> AttentionExport:
    """Write ``attn_head{h}.pgm`` per head (``head_mode='all'``) plus ``attn_mean.pgm``.

    ``image`` is a raw [3×H×W] array in [0, 1] with H, W multiples of the patch size.
    """
    if head_mode not in ("all", "mean"):
        raise ValueError(f"head_mode must be 'all' or 'mean', got {head_mode!r}")
    _, h, w = image.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not a multiple of patch size {p}")
    x = normalize(image, IMAGENET_MEAN, IMAGENET_STD)[None].astype(params["patch_embed.w"].dtype)
    attn = vit.forward(x, cfg, params).last_attn[0]
    per_head = cls_attention(attn, h // p, w // p)
    out = Path(out_dir)
    maps, paths = [], []
    if head_mode == "all":
        for i, m in enumerate(per_head):
            g = to_gray(upsample_nearest(m, p))
            maps.append(g)
            paths.append(write_pgm(g, out / f"attn_head{i}.pgm"))
    g = to_gray(upsample_nearest(per_head.mean(axis=0), p))
    maps.append(g)
    paths.append(write_pgm(g, out / "attn_mean.pgm"))
    return AttentionExport(paths, attn, maps)


def mask_preview(image: np.ndarray, cfg: ViewConfig, rng: np.random.Generator, out_dir: str | Path):
    """Five PNG panels: original, both masked student globals, the first two clean locals."""
    vs = make_views(image, cfg, rng)
    out = Path(out_dir)
    panels = [("1_original", image)]
    panels += [(f"{i + 2}_global{i}_masked", v) for i, v in enumerate(vs.student_globals[:2])]
    panels += [(f"{i + 4}_local{i}_clean", v) for i, v in enumerate(vs.student_locals[:2])]
    paths = [write_png(img, out / f"{name}.png") for name, img in panels]
    return paths, vs
