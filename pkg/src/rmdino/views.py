"""Multi-crop views with random patch masking on the student's global crops.

Each global crop is produced once and copied: the teacher gets it as-is, the
student gets it multiplied by a nearest-upsampled binary patch mask. Local
crops are never masked. Masking happens in raw [0, 1] pixel space, before the
per-channel normalisation applied by :meth:`ViewSet.teacher_inputs` and
friends, so masked pixels are exactly 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .resample import resize_bilinear, upsample_nearest

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ViewConfig:
    global_size: int = 64
    local_size: int = 32
    patch_size: int = 8
    n_global: int = 2
    n_local: int = 8
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    mask_ratio: float = 0.1
    hflip_prob: float = 0.5
    heavy_aug: bool = False
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        for lo, hi in (self.global_scale, self.local_scale):
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError(f"scale range ({lo}, {hi}) must lie in (0, 1]")
        for s in (self.global_size, self.local_size):
            if s % self.patch_size:
                raise ValueError(f"crop size {s} not divisible by patch size {self.patch_size}")


# ---------------------------------------------------------------------------
# masking


def mask_count(num_patches: int, ratio: float) -> int:
    """floor(ratio * P), robust to ratios like 0.29 whose binary value sits just below."""
    return int(math.floor(ratio * num_patches + 1e-9))


def sample_mask_indices(num_patches: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct indices from [0, P), uniform over k-subsets (partial Fisher-Yates)."""
    if not 0 <= k <= num_patches:
        raise ValueError(f"cannot mask {k} of {num_patches} patches")
    pool = np.arange(num_patches)
    for i in range(k):
        j = int(rng.integers(i, num_patches))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k].copy()


@dataclass
class MaskPlan:
    grid: tuple[int, int]
    ratio: float
    indices: np.ndarray

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def k(self) -> int:
        return len(self.indices)

    @classmethod
    def sample(cls, grid: tuple[int, int], ratio: float, rng: np.random.Generator) -> "MaskPlan":
        p = grid[0] * grid[1]
        return cls(grid, ratio, sample_mask_indices(p, mask_count(p, ratio), rng))

    def patch_grid(self) -> np.ndarray:
        """Binary [g_H × g_W] grid, 1 = visible, 0 = masked."""
        m = np.ones(self.num_patches, dtype=np.float32)
        m[self.indices] = 0.0
        return m.reshape(self.grid)


@dataclass
class PixelMask:
    mask: np.ndarray  # [H × W] in {0, 1}

    @property
    def zero_pixels(self) -> int:
        return int((self.mask == 0).sum())


def build_pixel_mask(plan: MaskPlan, h: int, w: int, p: int) -> PixelMask:
    if (h, w) != (plan.grid[0] * p, plan.grid[1] * p):
        raise ValueError(f"{h}x{w} does not match grid {plan.grid} at patch size {p}")
    return PixelMask(upsample_nearest(plan.patch_grid(), p))


def apply_mask(image: np.ndarray, mask: PixelMask) -> np.ndarray:
    """Element-wise product of a [C×H×W] image with the mask, broadcast over channels."""
    if image.shape[-2:] != mask.mask.shape:
        raise ValueError(f"image {image.shape} vs mask {mask.mask.shape}")
    return image * mask.mask.astype(image.dtype)[None]


# ---------------------------------------------------------------------------
# cropping


def _crop_box(h: int, w: int, scale: tuple[float, float], rng: np.random.Generator,
              ratio=(3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def random_resized_crop(image: np.ndarray, scale: tuple[float, float], out_size: int,
                        rng: np.random.Generator, hflip_prob: float = 0.0) -> np.ndarray:
    """Area-fraction-uniform crop of a [C×H×W] image, bilinearly resized to out_size²."""
    if not 0.0 < scale[0] <= scale[1] <= 1.0:
        raise ValueError(f"scale range {scale} must lie in (0, 1]")
    _, h, w = image.shape
    top, left, ch, cw = _crop_box(h, w, scale, rng)
    out = resize_bilinear(image[:, top:top + ch, left:left + cw], out_size, out_size)
    if hflip_prob and rng.random() < hflip_prob:
        out = out[:, :, ::-1].copy()
    return out


def _color_jitter(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.8:
        b, c, s = rng.uniform(0.6, 1.4, size=3)
        img = img * b
        img = (img - img.mean()) * c + img.mean()
        gray = img.mean(axis=0, keepdims=True)
        img = (img - gray) * s + gray
    if rng.random() < 0.2:
        img = np.repeat(img.mean(axis=0, keepdims=True), img.shape[0], axis=0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _crop(image, scale, size, cfg: ViewConfig, rng) -> np.ndarray:
    out = random_resized_crop(image, scale, size, rng, cfg.hflip_prob)
    if cfg.heavy_aug:
        out = _color_jitter(out, rng)
    return out.astype(np.float32, copy=False)


def draw_crops(image: np.ndarray, cfg: ViewConfig, rng: np.random.Generator):
    """Global then local crops, in that order, from one RNG stream."""
    globals_ = [_crop(image, cfg.global_scale, cfg.global_size, cfg, rng) for _ in range(cfg.n_global)]
    locals_ = [_crop(image, cfg.local_scale, cfg.local_size, cfg, rng) for _ in range(cfg.n_local)]
    return globals_, locals_


# ---------------------------------------------------------------------------
# view sets


@dataclass
class ViewSet:
    """Raw-space views of one image; normalised copies come from the *_inputs methods."""

    teacher_globals: list[np.ndarray]
    student_globals: list[np.ndarray]
    student_locals: list[np.ndarray]
    plans: list[MaskPlan] = field(default_factory=list)
    masks: list[PixelMask] = field(default_factory=list)
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    def __len__(self) -> int:
        return len(self.teacher_globals) + len(self.student_globals) + len(self.student_locals)

    def _norm(self, views):
        return [normalize(v, self.mean, self.std) for v in views]

    def teacher_inputs(self):
        return self._norm(self.teacher_globals)

    def student_global_inputs(self):
        return self._norm(self.student_globals)

    def student_local_inputs(self):
        return self._norm(self.student_locals)


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return ((img - m) / s).astype(np.float32)


def make_views(image: np.ndarray, cfg: ViewConfig, rng: np.random.Generator) -> ViewSet:
    """All views of one [C×H×W] image in [0, 1].

    Crop geometry and mask draws come from two independent child streams of
    ``rng``, so the clean crops can be regenerated without the masks.
    """
    crop_rng, mask_rng = rng.spawn(2)
    globals_, locals_ = draw_crops(image, cfg, crop_rng)
    g = cfg.global_size // cfg.patch_size
    plans, masks, students = [], [], []
    for crop in globals_:
        plan = MaskPlan.sample((g, g), cfg.mask_ratio, mask_rng)
        pm = build_pixel_mask(plan, cfg.global_size, cfg.global_size, cfg.patch_size)
        plans.append(plan)
        masks.append(pm)
        students.append(apply_mask(crop, pm))
    return ViewSet(globals_, students, locals_, plans, masks, cfg.mean, cfg.std)


def sample_rng(run_seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of batch composition and worker count."""
    return np.random.default_rng(np.random.SeedSequence([run_seed, epoch, index]))


def collate(viewsets: list[ViewSet]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a batch view-major: ``[V·B × C × H × W]`` for teacher, student globals, locals."""
    def stack(getter):
        per = [getter(vs) for vs in viewsets]
        return np.stack([per[b][v] for v in range(len(per[0])) for b in range(len(per))])

    return (stack(ViewSet.teacher_inputs), stack(ViewSet.student_global_inputs),
            stack(ViewSet.student_local_inputs))
