"""Deterministic synthetic cloudy/clear sample generation and dataset I/O.

Clear scenes are band-correlated fractal value noise with a checker strip
and a gradient strip for edge content. Cloud masks are thresholded fractal
noise with a softness-controlled ramp, alpha-composited with a near-white
cloud color:

    cloudy = mask * cloud_color + (1 - mask) * clear

Every sample is a pure function of (global seed, split, index), so datasets
regenerate bitwise identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

__all__ = [
    "SamplePair", "DatasetManifest", "value_noise", "synth_clear",
    "synth_mask", "composite", "make_sample", "random_crop",
    "save_pair", "load_pair", "generate_dataset", "load_manifest",
    "iter_split",
]

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
DEFAULT_CLOUD_COLOR = 0.95


@dataclass
class SamplePair:
    clear: np.ndarray   # [H, W, C] in [0, 1]
    cloudy: np.ndarray  # same shape
    mask: np.ndarray    # [H, W, 1] alpha in [0, 1]
    seed: int


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    h: int
    w: int
    c_in: int
    train_count: int
    test_count: int
    cloud: dict = field(default_factory=lambda: {
        "coverage": 0.4, "softness": 0.3, "color": DEFAULT_CLOUD_COLOR})

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "h": self.h,
            "w": self.w,
            "c_in": self.c_in,
            "train_count": self.train_count,
            "test_count": self.test_count,
            "cloud": self.cloud,
        }

    def counts(self, split: str) -> int:
        if split == "train":
            return self.train_count
        if split == "test":
            return self.test_count
        raise ValueError(f"unknown split {split!r}")


def _resize_bilinear(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Plain numpy bilinear resize of a 2-D grid (align-corners style)."""
    sh, sw = a.shape
    ys = np.linspace(0.0, sh - 1.0, h)
    xs = np.linspace(0.0, sw - 1.0, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, sh - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, sw - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    return ((1 - wy) * ((1 - wx) * a[y0][:, x0] + wx * a[y0][:, x1])
            + wy * ((1 - wx) * a[y1][:, x0] + wx * a[y1][:, x1]))


def value_noise(rng: np.random.Generator, h: int, w: int,
                octaves: int = 4, base_cells: int = 4) -> np.ndarray:
    """Fractal value noise in [0, 1]: random lattices upsampled bilinearly,
    summed with halving amplitudes."""
    out = np.zeros((h, w), dtype=np.float64)
    total = 0.0
    for o in range(octaves):
        cells = base_cells * (2 ** o)
        lattice = rng.random((min(cells, h), min(cells, w)))
        amp = 0.5 ** o
        out += amp * _resize_bilinear(lattice, h, w)
        total += amp
    return (out / total).astype(np.float32)


def _sample_rng(seed: int, split: str, index: int, stream: str) -> np.random.Generator:
    tag = {"train": 0, "test": 1}[split]
    kind = {"clear": 0, "mask": 1, "crop": 2}[stream]
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, tag, index, kind])))


def synth_clear(rng: np.random.Generator, h: int, w: int, c_in: int) -> np.ndarray:
    """Procedural clear scene: correlated noise bands plus a checker strip
    and a horizontal gradient strip, clamped to [0, 1]."""
    if h < 8 or w < 8:
        raise ValueError("scene extents must be at least 8")
    base = value_noise(rng, h, w)
    bands = []
    for _ in range(c_in):
        detail = value_noise(rng, h, w)
        mix = 0.65 * base + 0.35 * detail
        gain = rng.uniform(0.7, 1.0)
        offset = rng.uniform(-0.1, 0.1)
        bands.append(gain * mix + offset)
    img = np.stack(bands, axis=-1)

    # checker strip across the top quarter for hard edges
    cs = max(2, h // 8)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    checker = (((yy // cs) + (xx // cs)) % 2).astype(np.float32)
    strip = slice(0, h // 4)
    img[strip] = 0.5 * img[strip] + 0.5 * (0.2 + 0.6 * checker[strip])[:, :, None]

    # gradient strip across the bottom quarter
    grad = (xx / max(1, w - 1)).astype(np.float32)
    strip = slice(h - h // 4, h)
    img[strip] = 0.5 * img[strip] + 0.5 * grad[strip][:, :, None]

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_mask(rng: np.random.Generator, h: int, w: int,
               coverage: float, softness: float) -> np.ndarray:
    """Cloud alpha mask with mean close to the requested coverage."""
    if not 0.0 <= coverage <= 1.0:
        raise ValueError("coverage must be in [0, 1]")
    if not 0.0 <= softness <= 1.0:
        raise ValueError("softness must be in [0, 1]")
    if coverage == 0.0:
        return np.zeros((h, w, 1), dtype=np.float32)
    if coverage == 1.0:
        return np.ones((h, w, 1), dtype=np.float32)
    noise = value_noise(rng, h, w, octaves=3).astype(np.float64)
    threshold = np.quantile(noise, 1.0 - coverage)
    width = max(1e-6, 0.25 * softness)
    mask = np.clip((noise - threshold) / width + 0.5, 0.0, 1.0)
    return mask.astype(np.float32)[:, :, None]


def composite(clear: np.ndarray, mask: np.ndarray,
              cloud_color: float = DEFAULT_CLOUD_COLOR) -> np.ndarray:
    if clear.shape[:2] != mask.shape[:2] or mask.shape[2] != 1:
        raise ValueError(f"incompatible shapes: clear {clear.shape}, mask {mask.shape}")
    return (mask * cloud_color + (1.0 - mask) * clear).astype(np.float32)


def make_sample(seed: int, split: str, index: int, h: int, w: int, c_in: int,
                coverage: float, softness: float,
                cloud_color: float = DEFAULT_CLOUD_COLOR) -> SamplePair:
    clear = synth_clear(_sample_rng(seed, split, index, "clear"), h, w, c_in)
    mask = synth_mask(_sample_rng(seed, split, index, "mask"), h, w, coverage, softness)
    return SamplePair(clear=clear, cloudy=composite(clear, mask, cloud_color),
                      mask=mask, seed=seed)


def random_crop(pair: SamplePair, crop: int, rng: T.RngStream,
                multiple: int = 1) -> SamplePair:
    h, w = pair.clear.shape[:2]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds sample extents {h}x{w}")
    if crop % multiple:
        raise ValueError(f"crop {crop} must be a multiple of {multiple}")
    top = rng.integers(0, h - crop + 1)
    left = rng.integers(0, w - crop + 1)
    sl = (slice(top, top + crop), slice(left, left + crop))
    return SamplePair(clear=pair.clear[sl].copy(), cloudy=pair.cloudy[sl].copy(),
                      mask=pair.mask[sl].copy(), seed=pair.seed)


# -- on-disk layout ---------------------------------------------------------

def _pair_paths(root: Path, split: str, index: int) -> dict[str, Path]:
    stem = root / split / f"{index:05d}"
    return {
        "clear": stem.with_suffix(".clear.tnsr"),
        "cloudy": stem.with_suffix(".cloudy.tnsr"),
        "mask": stem.with_suffix(".mask.tnsr"),
    }


def _save_png_preview(path: Path, img: np.ndarray) -> None:
    from PIL import Image

    data = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if data.shape[2] == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def save_pair(root: Path, split: str, index: int, pair: SamplePair,
              previews: bool = True) -> None:
    paths = _pair_paths(Path(root), split, index)
    paths["clear"].parent.mkdir(parents=True, exist_ok=True)
    T.save_tnsr(paths["clear"], pair.clear)
    T.save_tnsr(paths["cloudy"], pair.cloudy)
    T.save_tnsr(paths["mask"], pair.mask)
    # previews are lossy 8-bit renderings, never read back
    if previews and pair.clear.shape[2] == 3:
        for key in ("clear", "cloudy", "mask"):
            _save_png_preview(paths[key].with_suffix(".png"), getattr(pair, key))


def load_pair(root: Path, split: str, index: int, seed: int = 0) -> SamplePair:
    paths = _pair_paths(Path(root), split, index)
    return SamplePair(
        clear=T.load_tnsr(paths["clear"]),
        cloudy=T.load_tnsr(paths["cloudy"]),
        mask=T.load_tnsr(paths["mask"]),
        seed=seed,
    )


def generate_dataset(root, seed: int, count: int, h: int, w: int, c_in: int = 3,
                     coverage: float = 0.4, softness: float = 0.3,
                     cloud_color: float = DEFAULT_CLOUD_COLOR,
                     previews: bool = True) -> DatasetManifest:
    """Write a train/test dataset (2:1 split, rounded) plus manifest.json."""
    root = Path(root)
    train_count = round(count * 2 / 3)
    test_count = count - train_count
    manifest = DatasetManifest(
        root=root, seed=seed, h=h, w=w, c_in=c_in,
        train_count=train_count, test_count=test_count,
        cloud={"coverage": coverage, "softness": softness, "color": cloud_color},
    )
    for split, n in (("train", train_count), ("test", test_count)):
        for idx in range(n):
            pair = make_sample(seed, split, idx, h, w, c_in,
                               coverage, softness, cloud_color)
            save_pair(root, split, idx, pair, previews=previews)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_NAME, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    with open(root / MANIFEST_NAME) as fh:
        d = json.load(fh)
    if d.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported dataset manifest version {d.get('version')}")
    return DatasetManifest(
        root=root, seed=d["seed"], h=d["h"], w=d["w"], c_in=d["c_in"],
        train_count=d["train_count"], test_count=d["test_count"], cloud=d["cloud"],
    )


def iter_split(manifest: DatasetManifest, split: str):
    for idx in range(manifest.counts(split)):
        yield idx, load_pair(manifest.root, split, idx, seed=manifest.seed)
