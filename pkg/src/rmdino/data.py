"""Class-per-directory datasets, image I/O and the synthetic shape dataset."""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


def read_image(path: str | Path) -> np.ndarray:
    """Decode to a float32 [3×H×W] array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[C×H×W] float in [0, 1] -> [H×W×C] uint8."""
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_png(img: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG", optimize=False)
    return path


def write_pgm(gray: np.ndarray, path: str | Path) -> Path:
    """Binary P5 greymap, one byte per pixel."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


@dataclass
class DatasetManifest:
    root: Path
    classes: list[str]
    samples: list[tuple[str, int]]
    split: dict[str, str] = field(default_factory=dict)
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, split: str | None) -> list[tuple[str, int]]:
        if split is None:
            return list(self.samples)
        return [s for s in self.samples if self.split.get(s[0], "train") == split]

    def arrays(self, split: str | None = None) -> tuple[list[np.ndarray], np.ndarray]:
        chosen = self.subset(split)
        return [self.images[p] for p, _ in chosen], np.array([c for _, c in chosen], dtype=np.int64)


def _read_split(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields_ = line.split("\t")
        if len(fields_) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'path<TAB>split'")
        out[fields_[0]] = fields_[1]
    return out


def load_dataset(root: str | Path, split_file: str | Path | None = None) -> DatasetManifest:
    """Scan ``<root>/<class>/<image>.{png,ppm}`` in lexicographic order and decode everything."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    samples, images = [], {}
    for cid, cname in enumerate(classes):
        for f in sorted((root / cname).iterdir(), key=lambda p: p.name):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            rel = f"{cname}/{f.name}"
            try:
                images[rel] = read_image(f)
            except (OSError, ValueError) as e:
                logger.warning("skipping unreadable image %s: %s", f, e)
                continue
            samples.append((rel, cid))
    if not samples:
        raise ValueError(f"no decodable images under {root}")
    split_path = Path(split_file) if split_file else root / "split.tsv"
    split = _read_split(split_path) if split_path.is_file() else {}
    return DatasetManifest(root, classes, samples, split, images)


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("circle", "square", "stripes", "checker")


def render_synth(cls: int, num_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One [3×size×size] image: class-specific shape and hue on a muted background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    rad = rng.uniform(0.18, 0.32)
    shape = SHAPES[cls % len(SHAPES)]
    if shape == "circle":
        fg = (xx - cx) ** 2 + (yy - cy) ** 2 < rad ** 2
    elif shape == "square":
        fg = (np.abs(xx - cx) < rad) & (np.abs(yy - cy) < rad)
    elif shape == "stripes":
        angle = rng.uniform(-0.3, 0.3)
        freq = rng.uniform(4.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        fg = np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * freq * 2 * np.pi + phase) > 0
    else:
        cell = rng.uniform(0.12, 0.2)
        ox, oy = rng.uniform(0, cell, size=2)
        fg = (np.floor((xx + ox) / cell) + np.floor((yy + oy) / cell)) % 2 == 0
    hue = (cls / num_classes + rng.uniform(-0.03, 0.03)) % 1.0
    color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0)))
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.2), rng.uniform(0.1, 0.4)))
    img = np.where(fg[None], color[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_synth(out_dir: str | Path, num_classes: int = 4, per_class: int = 200, img_size: int = 64,
              seed: int = 0, test_every: int = 4) -> Path:
    """Write ``<out>/class_XX/img_XXXX.png`` plus ``split.tsv`` (every ``test_every``-th image is test)."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    lines = []
    for c in range(num_classes):
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, c, i]))
            rel = f"class_{c:02d}/img_{i:04d}.png"
            write_png(render_synth(c, num_classes, img_size, rng), out / rel)
            lines.append(f"{rel}\t{'test' if test_every and i % test_every == test_every - 1 else 'train'}")
    (out / "split.tsv").write_text("\n".join(lines) + "\n")
    return out
