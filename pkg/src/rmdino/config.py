"""Flat ``key=value`` run configuration.

Defaults are the full-scale (ViT-Tiny/16, 65,536-dim head) settings; the
``desk`` preset shrinks the model and views so a full run fits on a laptop CPU.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .views import ViewConfig
from .vit import ViTConfig

# Keys that locate a run rather than define it; excluded from the fingerprint.
LOCATION_KEYS = ("dataset", "run_dir")

HELP = {
    "img_size_global": "global view size (px)",
    "img_size_local": "local view size (px)",
    "patch_size": "ViT patch size",
    "embed_dim": "token width",
    "depth": "transformer blocks",
    "heads": "attention heads",
    "mlp_ratio": "MLP hidden / embed_dim",
    "head_hidden": "projection head hidden width",
    "head_bottleneck": "projection head bottleneck width",
    "out_dim": "DINO output dim K",
    "epochs": "training epochs",
    "max_steps": "stop after this many steps (0 = no cap)",
    "batch_size": "images per step",
    "base_lr": "peak lr before batch/256 scaling",
    "min_lr": "cosine lr floor",
    "warmup_frac": "fraction of steps with linear lr warmup",
    "weight_decay": "initial weight decay",
    "weight_decay_end": "final weight decay",
    "clip_grad": "global grad-norm clip",
    "beta1": "AdamW beta1",
    "beta2": "AdamW beta2",
    "adam_eps": "AdamW epsilon",
    "freeze_last_layer_epochs": "epochs with the head's last layer frozen",
    "ema_start": "teacher EMA momentum at step 0",
    "ema_end": "teacher EMA momentum at the end",
    "temp_student": "student temperature",
    "temp_teacher": "teacher temperature",
    "center_momentum": "teacher centering momentum",
    "global_crops": "global views per image",
    "global_scale_min": "global crop min area",
    "global_scale_max": "global crop max area",
    "local_crops": "local views per image",
    "local_scale_min": "local crop min area",
    "local_scale_max": "local crop max area",
    "mask_ratio": "fraction of student global-view patches zeroed",
    "hflip_prob": "horizontal flip probability",
    "heavy_aug": "colour jitter + random grayscale",
    "knn_k": "k-NN neighbours",
    "knn_temp": "k-NN vote temperature",
    "probe_epochs": "linear probe epochs",
    "probe_lr": "linear probe peak lr",
    "probe_momentum": "linear probe SGD momentum",
    "probe_batch_size": "linear probe batch size",
    "seed": "run seed",
    "checkpoint_every": "checkpoint period in epochs",
    "dtype": "training dtype (f32 or f64)",
    "dataset": "dataset root",
    "run_dir": "output directory",
}


@dataclass(frozen=True)
class RunConfig:
    # model
    img_size_global: int = 224
    img_size_local: int = 96
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 12
    heads: int = 3
    mlp_ratio: float = 4.0
    head_hidden: int = 2048
    head_bottleneck: int = 256
    out_dim: int = 65536
    # optimisation
    epochs: int = 100
    max_steps: int = 0
    batch_size: int = 50
    base_lr: float = 0.0005
    min_lr: float = 1e-6
    warmup_frac: float = 0.1
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    clip_grad: float = 3.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze_last_layer_epochs: int = 0
    # distillation
    ema_start: float = 0.996
    ema_end: float = 1.0
    temp_student: float = 0.1
    temp_teacher: float = 0.04
    center_momentum: float = 0.9
    # views
    global_crops: int = 2
    global_scale_min: float = 0.4
    global_scale_max: float = 1.0
    local_crops: int = 8
    local_scale_min: float = 0.05
    local_scale_max: float = 0.4
    mask_ratio: float = 0.1
    hflip_prob: float = 0.5
    heavy_aug: bool = False
    # evaluation
    knn_k: int = 20
    knn_temp: float = 0.07
    probe_epochs: int = 50
    probe_lr: float = 0.5
    probe_momentum: float = 0.9
    probe_batch_size: int = 64
    # run
    seed: int = 0
    checkpoint_every: int = 10
    dtype: str = "f32"
    dataset: str = ""
    run_dir: str = "runs/default"

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        base = cls(img_size_global=64, img_size_local=32, patch_size=8, embed_dim=96, depth=4,
                   heads=3, head_hidden=256, head_bottleneck=64, out_dim=256, epochs=10,
                   batch_size=16, base_lr=0.004, checkpoint_every=5)
        return replace(base, **overrides)

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name == "full":
            return cls()
        if name == "desk":
            return cls.desk()
        raise ValueError(f"unknown preset {name!r} (expected 'full' or 'desk')")

    def validate(self) -> "RunConfig":
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1; epochs and max_steps >= 0")
        if not 0 <= self.center_momentum <= 1 or not 0 <= self.ema_start <= 1 or not 0 <= self.ema_end <= 1:
            raise ValueError("momenta must lie in [0, 1]")
        if self.temp_student <= 0 or self.temp_teacher <= 0:
            raise ValueError("temperatures must be positive")
        if self.global_crops < 1 or self.local_crops < 0:
            raise ValueError("need at least one global crop")
        self.vit_config()
        self.view_config()
        return self

    def vit_config(self) -> ViTConfig:
        return ViTConfig(img_size=self.img_size_global, local_img_size=self.img_size_local,
                         patch_size=self.patch_size, embed_dim=self.embed_dim, depth=self.depth,
                         heads=self.heads, mlp_ratio=self.mlp_ratio, head_hidden=self.head_hidden,
                         head_bottleneck=self.head_bottleneck, out_dim=self.out_dim)

    def view_config(self) -> ViewConfig:
        return ViewConfig(global_size=self.img_size_global, local_size=self.img_size_local,
                          patch_size=self.patch_size, n_global=self.global_crops,
                          n_local=self.local_crops,
                          global_scale=(self.global_scale_min, self.global_scale_max),
                          local_scale=(self.local_scale_min, self.local_scale_max),
                          mask_ratio=self.mask_ratio, hflip_prob=self.hflip_prob,
                          heavy_aug=self.heavy_aug)

    # --- serialisation -----------------------------------------------------

    def to_text(self, exclude: tuple[str, ...] = ()) -> str:
        lines = []
        for f in fields(self):
            if f.name in exclude:
                continue
            lines.append(f"{f.name}={_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text(exclude=LOCATION_KEYS).encode()).hexdigest()

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, raw in pairs.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            parsed[key] = _parse(raw, getattr(self, key))
        return replace(self, **parsed)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).with_overrides(parse_pairs(text))

    @classmethod
    def load(cls, path: str | Path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), base)


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, like):
    if isinstance(like, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw
