"""Frozen-feature evaluation: k-NN vote and linear probe, both scored by top-1."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import vit
from .resample import resize_bilinear
from .tensor import Tensor
from .views import IMAGENET_MEAN, IMAGENET_STD, normalize


@dataclass
class FeatureBank:
    features: np.ndarray  # [N × D], unit rows
    labels: np.ndarray  # [N]
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


def unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Resize the short side to ``size`` then take the central ``size × size``."""
    _, h, w = img.shape
    if (h, w) != (size, size):
        s = size / min(h, w)
        nh, nw = max(size, int(round(h * s))), max(size, int(round(w * s)))
        img = resize_bilinear(img, nh, nw)
        top, left = (nh - size) // 2, (nw - size) // 2
        img = img[:, top:top + size, left:left + size]
    return img


def extract_features(params: dict[str, Tensor], cfg: vit.ViTConfig, images: Sequence[np.ndarray],
                     labels, split: str = "train", batch_size: int = 64) -> FeatureBank:
    """Unit-normalised CLS embeddings; no masking, no augmentation."""
    if params["patch_embed.w"].shape[1] != cfg.embed_dim or "pos_embed" not in params:
        raise ValueError("parameters do not match the model config")
    dtype = params["patch_embed.w"].dtype
    feats = []
    for start in range(0, len(images), batch_size):
        chunk = [normalize(center_crop_resize(im, cfg.img_size), IMAGENET_MEAN, IMAGENET_STD)
                 for im in images[start:start + batch_size]]
        out = vit.forward(np.stack(chunk).astype(dtype), cfg, params)
        feats.append(out.cls_embedding.data.astype(np.float64))
    features = unit_rows(np.concatenate(feats) if feats else np.zeros((0, cfg.embed_dim)))
    return FeatureBank(features, np.asarray(labels), split)


def knn_classify(train: FeatureBank, test: FeatureBank, k: int = 20, temp: float | None = 0.07,
                 num_classes: int | None = None) -> np.ndarray:
    """Similarity-weighted k-NN vote.

    Neighbours are ranked by cosine similarity, ties by train index. Each
    neighbour votes ``exp(sim / temp)`` for its class (``temp=None`` or ``inf``
    gives uniform votes); the arg-max class wins, ties to the smallest id.
    """
    if len(train) == 0:
        raise ValueError("empty train bank")
    if not 1 <= k <= len(train):
        raise ValueError(f"k={k} must be in [1, {len(train)}]")
    if train.features.shape[1] != test.features.shape[1]:
        raise ValueError("train/test feature dims differ")
    n_cls = num_classes or int(max(train.labels.max(), test.labels.max(initial=0)) + 1)
    sims = unit_rows(test.features) @ unit_rows(train.features).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top_sims = np.take_along_axis(sims, order, axis=1)
    if temp is None or math.isinf(temp):
        weights = np.ones_like(top_sims)
    else:
        weights = np.exp(top_sims / temp)
    votes = np.zeros((len(test), n_cls))
    np.add.at(votes, (np.arange(len(test))[:, None], train.labels[order]), weights)
    return votes.argmax(axis=1)


def top1_accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        return 0.0
    return float((predictions == labels).mean())


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 50
    lr: float = 0.5
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0


def linear_probe(train: FeatureBank, test: FeatureBank, cfg: ProbeConfig = ProbeConfig(),
                 num_classes: int | None = None) -> tuple[tuple[np.ndarray, np.ndarray], float]:
    """Softmax-regression probe with momentum SGD and a per-step cosine lr.

    Returns ``((W, b), test top-1)``.
    """
    n_cls = num_classes or int(max(train.labels.max(), test.labels.max(initial=0)) + 1)
    d = train.features.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9B0BE]))
    w = rng.normal(0.0, 0.01, size=(d, n_cls))
    b = np.zeros(n_cls)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    x_all, y_all = train.features.astype(np.float64), train.labels
    n = len(train)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            z = x @ w + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(y)), y] -= 1.0
            p /= len(y)
            gw, gb = x.T @ p, p.sum(axis=0)
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            vw = cfg.momentum * vw + gw
            vb = cfg.momentum * vb + gb
            w -= lr * vw
            b -= lr * vb
            step += 1
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise FloatingPointError(f"linear probe diverged at step {step} (lr={lr:.3g}); lower probe_lr")
    pred = (test.features @ w + b).argmax(axis=1)
    return (w, b), top1_accuracy(pred, test.labels)
