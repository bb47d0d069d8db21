"""Synthetic class-structured images, triggers, poisoning and patch masks."""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nets import PatchGrid, patchify, unpatchify
from .rng import Rng

TAGS = ("train", "test", "dede-train")


@dataclass(frozen=True)
class ImageBatch:
    pixels: np.ndarray
    labels: np.ndarray
    poisoned: np.ndarray
    tag: str = "train"

    def __post_init__(self):
        n = self.pixels.shape[0]
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be N x C x H x W, got {self.pixels.shape}")
        if self.labels.shape != (n,) or self.poisoned.shape != (n,):
            raise ValueError("labels/poison flags must have one entry per image")
        if n and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def take(self, idx) -> "ImageBatch":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return ImageBatch(self.pixels[idx], self.labels[idx], self.poisoned[idx], self.tag)

    @staticmethod
    def concat(batches: list["ImageBatch"], tag: str | None = None) -> "ImageBatch":
        return ImageBatch(
            np.concatenate([b.pixels for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.poisoned for b in batches]),
            tag or batches[0].tag,
        )

    @staticmethod
    def empty(image_shape: tuple[int, int, int], tag: str = "train") -> "ImageBatch":
        return ImageBatch(
            np.zeros((0,) + tuple(image_shape), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=bool),
            tag,
        )


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    classes: int = 4
    channels: int = 3
    height: int = 16
    width: int = 16
    noise: float = 0.05
    jitter: int = 2
    template_seed: int = 0
    sizes: dict = field(default_factory=lambda: {
        "pretrain": 2048, "dede_train": 1024, "downstream_train": 1024, "test": 1024,
    })

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if min(self.channels, self.height, self.width) <= 0:
            raise ValueError("image geometry must be positive")
        if self.noise < 0 or self.jitter < 0:
            raise ValueError("noise and jitter must be nonnegative")
        if not self.sizes or any(int(v) <= 0 for v in self.sizes.values()):
            raise ValueError("split sizes must be positive")


def make_templates(spec: SyntheticDatasetSpec) -> np.ndarray:
    """One (C, H, W) template per class: a distinct hue plus a periodic stripe pattern.

    Patterns are periodic on the image so translation jitter (a circular roll)
    never exposes an edge.
    """
    rng = Rng(spec.template_seed).child("templates")
    k, c, h, w = spec.classes, spec.channels, spec.height, spec.width
    offset = rng.uniform01()
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.zeros((k, c, h, w))
    freqs = rng.integers(1, 4, (k, 2))
    phases = rng.uniform01(k) * 2 * np.pi
    for i in range(k):
        hue = (offset + i / k) % 1.0
        rgb = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.8))
        base = np.resize(rgb, c)
        pattern = 0.15 * np.cos(2 * np.pi * (freqs[i, 0] * yy + freqs[i, 1] * xx) + phases[i])
        out[i] = base[:, None, None] + pattern[None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _roll_batch(images: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    n, c, h, w = images.shape
    rows = (np.arange(h)[None, :] - dy[:, None]) % h
    cols = (np.arange(w)[None, :] - dx[:, None]) % w
    return images[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                  rows[:, None, :, None], cols[:, None, None, :]]


def generate_split(spec: SyntheticDatasetSpec, n: int, rng: Rng, tag: str = "train",
                   templates: np.ndarray | None = None) -> ImageBatch:
    spec.validate()
    if n <= 0:
        raise ValueError("split size must be positive")
    if templates is None:
        templates = make_templates(spec)
    labels = (np.arange(n) % spec.classes)[rng.permutation(n)].astype(np.int64)
    x = templates[labels].astype(np.float64)
    if spec.jitter:
        shifts = rng.integers(-spec.jitter, spec.jitter + 1, (2, n))
        x = _roll_batch(x, shifts[0], shifts[1])
    if spec.noise:
        x = x + spec.noise * rng.standard_normal(x.shape)
    pixels = np.clip(x, 0.0, 1.0).astype(np.float32)
    return ImageBatch(pixels, labels, np.zeros(n, dtype=bool), tag)


def generate_dataset(spec: SyntheticDatasetSpec, rng: Rng) -> dict[str, ImageBatch]:
    spec.validate()
    templates = make_templates(spec)
    tags = {"dede_train": "dede-train", "test": "test"}
    return {
        name: generate_split(spec, int(size), rng.child(name), tags.get(name, "train"), templates)
        for name, size in spec.sizes.items()
    }


def nearest_template(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    d = ((images[:, None] - templates[None]) ** 2).reshape(len(images), len(templates), -1).sum(-1)
    return d.argmin(axis=1)


# -------------------------------------------------------------------- triggers


@dataclass(frozen=True)
class Trigger:
    kind: str = "patch"
    size: int = 3
    row: int | None = None
    col: int | None = None
    value: float = 1.0
    amplitude: float = 0.05
    freq_u: int = 6
    freq_v: int = 6

    def __post_init__(self):
        if self.kind not in ("patch", "spectral"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "spectral" and not 0.0 <= self.amplitude <= 0.1:
            raise ValueError("spectral amplitude must lie in [0, 0.1]")

    def origin(self, height: int, width: int) -> tuple[int, int]:
        r = height - self.size if self.row is None else self.row
        c = width - self.size if self.col is None else self.col
        if r < 0 or c < 0 or r + self.size > height or c + self.size > width:
            raise ValueError(f"trigger at ({r}, {c}) size {self.size} outside {height}x{width}")
        return r, c

    def sinusoid(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        return self.amplitude * np.sin(2 * np.pi * (self.freq_u * yy / height + self.freq_v * xx / width))


def apply_trigger(images: np.ndarray, t: Trigger) -> np.ndarray:
    """Return a triggered copy of an (N, C, H, W) batch or a single (C, H, W) image."""
    single = images.ndim == 3
    x = np.array(images[None] if single else images, dtype=np.float32, copy=True)
    h, w = x.shape[-2:]
    if t.kind == "patch":
        r, c = t.origin(h, w)
        x[..., r : r + t.size, c : c + t.size] = t.value
    else:
        x = np.clip(x + t.sinusoid(h, w).astype(np.float32), 0.0, 1.0)
    return x[0] if single else x


def poison_count(rate: float, n: int) -> int:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"poison rate {rate} outside [0, 1]")
    return int(math.floor(rate * n + 1e-9))


def poison_dataset(batch: ImageBatch, t: Trigger, rate: float, target: int, rng: Rng,
                   pool: str = "non-target") -> ImageBatch:
    """Trigger floor(rate * N) uniformly chosen samples; labels are left unchanged.

    ``pool`` restricts the candidates: ``non-target`` (evaluation splits),
    ``target`` (poisoned pretraining) or ``any``.
    """
    k = poison_count(rate, len(batch))
    if pool == "non-target":
        eligible = np.nonzero(batch.labels != target)[0]
    elif pool == "target":
        eligible = np.nonzero(batch.labels == target)[0]
    elif pool == "any":
        eligible = np.arange(len(batch))
    else:
        raise ValueError(f"unknown pool {pool!r}")
    if k > len(eligible):
        raise ValueError(f"cannot poison {k} samples from a pool of {len(eligible)}")
    pixels = batch.pixels.copy()
    flags = batch.poisoned.copy()
    if k:
        chosen = eligible[rng.subset(len(eligible), k)]
        pixels[chosen] = apply_trigger(pixels[chosen], t)
        flags[chosen] = True
    return ImageBatch(pixels, batch.labels.copy(), flags, batch.tag)


def triggered_copy(batch: ImageBatch, t: Trigger) -> ImageBatch:
    return ImageBatch(apply_trigger(batch.pixels, t), batch.labels.copy(),
                      np.ones(len(batch), dtype=bool), batch.tag)


# ----------------------------------------------------------------------- masks


def visible_count(alpha: float, patch_count: int) -> int:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"masking ratio {alpha} outside [0, 1]")
    k = int(math.floor((1.0 - alpha) * patch_count + 0.5))
    # only alpha == 1 may hide everything; 0.99 on a 16-patch grid would otherwise round to 0
    floor = 1 if alpha < 1.0 and patch_count else 0
    return min(max(k, floor), patch_count)


@dataclass(frozen=True)
class MaskSpec:
    alpha: float
    patch_count: int
    visible: np.ndarray  # (N, k) sorted distinct indices per sample

    @property
    def k(self) -> int:
        return self.visible.shape[1]


def sample_mask(alpha: float, patch_count: int, rng: Rng, count: int = 1) -> MaskSpec:
    k = visible_count(alpha, patch_count)
    return MaskSpec(alpha, patch_count, rng.subsets(count, patch_count, k))


@dataclass(frozen=True)
class MaskedImage:
    pixels: np.ndarray
    mask: MaskSpec


def apply_mask(images: np.ndarray, mask: MaskSpec, grid: PatchGrid) -> MaskedImage:
    """Zero every pixel of non-visible patches; visible patches are copied unchanged."""
    patches = patchify(np.asarray(images), grid)
    if mask.visible.shape[0] != patches.shape[0] or mask.patch_count != grid.patch_count:
        raise ValueError("mask does not match the image batch")
    out = np.zeros_like(patches)
    rows = np.arange(patches.shape[0])[:, None]
    out[rows, mask.visible] = patches[rows, mask.visible]
    return MaskedImage(unpatchify(out, grid), mask)


# --------------------------------------------------------- augmentation & noise


@dataclass(frozen=True)
class AugmentConfig:
    min_area: float = 0.8
    flip_p: float = 0.5
    brightness: float = 0.2
    noise: float = 0.02


def _crop_resize(images: np.ndarray, min_area: float, rng: Rng) -> np.ndarray:
    n, c, h, w = images.shape
    area = min_area + (1.0 - min_area) * rng.uniform01(n)
    side = np.sqrt(area)
    ch, cw = side * h, side * w
    u = rng.uniform01((2, n))
    oy, ox = u[0] * (h - ch), u[1] * (w - cw)
    sy = oy[:, None] + (np.arange(h)[None] + 0.5) * (ch / h)[:, None] - 0.5
    sx = ox[:, None] + (np.arange(w)[None] + 0.5) * (cw / w)[:, None] - 0.5
    sy, sx = np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy, wx = (sy - y0)[:, None, :, None], (sx - x0)[:, None, None, :]
    idx_n = np.arange(n)[:, None, None, None]
    idx_c = np.arange(c)[None, :, None, None]

    def at(yi, xi):
        return images[idx_n, idx_c, yi[:, None, :, None], xi[:, None, None, :]]

    top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx
    bot = at(y1, x0) * (1 - wx) + at(y1, x1) * wx
    return top * (1 - wy) + bot * wy


def augment(images: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    n, c = images.shape[:2]
    x = _crop_resize(images.astype(np.float64), cfg.min_area, rng)
    flip = rng.uniform01(n) < cfg.flip_p
    x[flip] = x[flip][..., ::-1]
    x = x + cfg.brightness * (2 * rng.uniform01((n, c, 1, 1)) - 1)
    x = x + cfg.noise * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def centroid_radius(embeddings: np.ndarray, quantile: float = 0.99) -> tuple[np.ndarray, float]:
    centroid = embeddings.mean(axis=0)
    dist = np.linalg.norm(embeddings - centroid, axis=1)
    return centroid, float(np.quantile(dist, quantile))


def ood_noise_images(count: int, reference_embeddings: np.ndarray | None, rng: Rng, quantile: float = 0.99,
                     encoder=None, image_shape=(3, 16, 16), max_rounds: int = 8) -> ImageBatch:
    """Uniform-noise images for filling out-of-distribution embedding regions.

    With an ``encoder`` and reference embeddings, draws are resampled (up to
    ``max_rounds`` times) until they land outside the ``quantile`` ball around
    the clean-embedding centroid; whatever remains inside after that is kept.
    """
    if count <= 0:
        return ImageBatch.empty(image_shape, "dede-train")
    pixels = rng.uniform01((count,) + tuple(image_shape)).astype(np.float32)
    if encoder is not None and reference_embeddings is not None and len(reference_embeddings):
        centroid, radius = centroid_radius(reference_embeddings, quantile)
        for _ in range(max_rounds):
            dist = np.linalg.norm(encoder.embed(pixels) - centroid, axis=1)
            inside = dist <= radius
            if not inside.any():
                break
            pixels[inside] = rng.uniform01((int(inside.sum()),) + tuple(image_shape)).astype(np.float32)
    return ImageBatch(pixels, np.full(count, -1, dtype=np.int64), np.zeros(count, dtype=bool), "dede-train")


def with_tag(batch: ImageBatch, tag: str) -> ImageBatch:
    return replace(batch, tag=tag)
