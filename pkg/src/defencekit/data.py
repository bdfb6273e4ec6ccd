"""Procedural desk-scale datasets: fence-like and free-form stroke masks,
textured backgrounds, mean-pixel-filled observations, and manifests.

Every generator is a pure function of (params, size, rng), so rebuilding a
dataset from the same seed reproduces it byte for byte.  Masks use 1 for
occluded pixels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import load_pgm, load_ppm, save_pgm, save_ppm
from .tensor import Rng

__all__ = [
    "FenceParams",
    "StrokeParams",
    "Sample",
    "Manifest",
    "DataConfig",
    "CoverageError",
    "gen_fence_mask",
    "gen_freeform_mask",
    "gen_background",
    "occlude",
    "compute_mean_pixel",
    "build_dataset",
    "BACKGROUND_KINDS",
]

BACKGROUND_KINDS = ("gradient", "checker", "sinusoid", "blob-noise")


class CoverageError(RuntimeError):
    """Mask coverage band could not be met within the retry budget."""


@dataclass
class FenceParams:
    spacing: float = 12.0          # px between band centers
    thickness: float = 2.0         # px band width
    angle_deg: float = 0.0
    shear: float = 0.0
    jitter_deg: float = 0.0        # +- rotation applied to the second family
    coverage: tuple[float, float] = (0.05, 0.30)

    def __post_init__(self):
        lo, hi = self.coverage
        if self.thickness < 1:
            raise ValueError("thickness must be >= 1 px")
        if not (0.0 <= lo < hi <= 0.5):
            raise ValueError("coverage band must satisfy 0 <= lo < hi <= 0.5")


@dataclass
class StrokeParams:
    strokes: int = 4
    width_range: tuple[int, int] = (2, 6)
    vertices: int = 8
    step_range: tuple[float, float] = (4.0, 12.0)

    def __post_init__(self):
        if self.strokes < 1 or self.vertices < 1:
            raise ValueError("stroke and vertex counts must be >= 1")
        if self.width_range[0] < 1:
            raise ValueError("brush width must be >= 1 px")


@dataclass
class Sample:
    split: str
    seed: int
    background: str
    mask: str
    observation: str


@dataclass
class Manifest:
    mean_pixel: tuple[float, float, float]
    samples: list[Sample] = field(default_factory=list)

    def split(self, tag: str) -> list[Sample]:
        return [s for s in self.samples if s.split == tag]

    def save(self, path) -> None:
        lines = ["#meanpixel {:.17g} {:.17g} {:.17g}".format(*self.mean_pixel)]
        for s in self.samples:
            lines.append(f"{s.split}\t{s.seed}\t{s.background}\t{s.mask}\t{s.observation}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
        if not lines or not lines[0].startswith("#meanpixel"):
            raise ValueError(f"manifest {path} missing #meanpixel header")
        mean = tuple(float(v) for v in lines[0].split()[1:4])
        samples = []
        for line in lines[1:]:
            split, seed, bg, mask, obs = line.split("\t")
            samples.append(Sample(split, int(seed), bg, mask, obs))
        return cls(mean, samples)


def _band_coordinates(size, angle_deg, shear):
    h, w = size
    i, j = np.mgrid[0:h, 0:w].astype(np.float64)
    th = np.deg2rad(angle_deg)
    u = np.cos(th) * j + np.sin(th) * i
    v = -np.sin(th) * j + np.cos(th) * i
    return u + shear * v


def gen_fence_mask(params: FenceParams, size: tuple[int, int], rng: Rng) -> np.ndarray:
    """Union of two families of parallel bands roughly 90 degrees apart.

    Retries with perturbed spacing until coverage lands in the configured
    band (at most 32 attempts; the first attempt uses the params verbatim).
    """
    if size[0] < 16 or size[1] < 16:
        raise ValueError("mask size must be at least 16x16")
    lo, hi = params.coverage
    spacing = params.spacing
    for attempt in range(32):
        # jitter rotates both band families independently; zero keeps the
        # configured angle exact (and the generator fully deterministic
        # in its first attempt)
        j0 = params.jitter_deg * float(rng.uniform((), -1.0, 1.0)) \
            if params.jitter_deg else 0.0
        j1 = params.jitter_deg * float(rng.uniform((), -1.0, 1.0)) \
            if params.jitter_deg else 0.0
        u = _band_coordinates(size, params.angle_deg + j0, params.shear)
        v = _band_coordinates(size, params.angle_deg + 90.0 + j1, params.shear)
        mask = ((np.mod(u, spacing) < params.thickness)
                | (np.mod(v, spacing) < params.thickness)).astype(np.float64)
        cov = mask.mean()
        if lo <= cov <= hi:
            return mask
        # too dense -> widen the spacing, too sparse -> tighten it
        factor = 1.25 if cov > hi else 0.8
        spacing = max(params.thickness + 1.0, spacing * factor * float(rng.uniform((), 0.95, 1.05)))
    raise CoverageError(
        f"fence coverage did not reach [{lo}, {hi}] after 32 attempts")


def _stamp_disc(canvas: np.ndarray, cy: float, cx: float, radius: float) -> None:
    h, w = canvas.shape
    y0 = max(0, int(np.floor(cy - radius)))
    y1 = min(h, int(np.ceil(cy + radius)) + 1)
    x0 = max(0, int(np.floor(cx - radius)))
    x1 = min(w, int(np.ceil(cx + radius)) + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1][(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = 1.0


def gen_freeform_mask(params: StrokeParams, size: tuple[int, int], rng: Rng) -> np.ndarray:
    """Random-walk polylines stamped with disc brushes of varying width."""
    if size[0] < 16 or size[1] < 16:
        raise ValueError("mask size must be at least 16x16")
    h, w = size
    canvas = np.zeros((h, w))
    for s in range(params.strokes):
        sr = rng.stream(f"stroke{s}")
        width = int(sr.integers(params.width_range[0], params.width_range[1] + 1))
        y = float(sr.uniform((), 0.15 * h, 0.85 * h))
        x = float(sr.uniform((), 0.15 * w, 0.85 * w))
        heading = float(sr.uniform((), 0.0, 2.0 * np.pi))
        points = [(y, x)]
        for _ in range(params.vertices):
            heading += float(sr.uniform((), -np.pi / 4, np.pi / 4))
            step = float(sr.uniform((), params.step_range[0], params.step_range[1]))
            y = float(np.clip(y + step * np.sin(heading), 0, h - 1))
            x = float(np.clip(x + step * np.cos(heading), 0, w - 1))
            points.append((y, x))
        if width == 1:
            # staircase walk keeps a width-1 spine 4-connected
            py, px = int(round(points[0][0])), int(round(points[0][1]))
            canvas[py, px] = 1.0
            for _, (y1, x1) in zip(points, points[1:]):
                ty, tx = int(round(y1)), int(round(x1))
                while (py, px) != (ty, tx):
                    if abs(ty - py) >= abs(tx - px):
                        py += 1 if ty > py else -1
                    else:
                        px += 1 if tx > px else -1
                    canvas[py, px] = 1.0
        else:
            radius = width / 2.0
            for (y0, x0), (y1, x1) in zip(points, points[1:]):
                steps = max(2, int(np.hypot(y1 - y0, x1 - x0) * 2) + 1)
                for t in np.linspace(0.0, 1.0, steps):
                    _stamp_disc(canvas, y0 + t * (y1 - y0), x0 + t * (x1 - x0), radius)
    return canvas


def gen_background(kind: str, size: tuple[int, int], rng: Rng) -> np.ndarray:
    """A (3, H, W) texture in [0, 1]; four families for variety."""
    h, w = size
    i = np.arange(h)[:, None] / max(h - 1, 1)
    j = np.arange(w)[None, :] / max(w - 1, 1)
    if kind == "gradient":
        chans = []
        for c in range(3):
            base = float(rng.uniform((), 0.3, 0.7))
            si = float(rng.uniform((), -0.3, 0.3))
            sj = float(rng.uniform((), -0.3, 0.3))
            chans.append(base + si * (i - 0.5) + sj * (j - 0.5))
        return np.stack(chans)
    if kind == "checker":
        period = int(rng.integers(4, 17))
        lo = rng.uniform((3,), 0.0, 0.4)
        hi = lo + rng.uniform((3,), 0.2, 0.6)
        cells = ((np.arange(h)[:, None] // period + np.arange(w)[None, :] // period) % 2)
        return np.clip(np.where(cells[None], hi[:, None, None], lo[:, None, None]), 0, 1)
    if kind == "sinusoid":
        chans = []
        for c in range(3):
            fi = float(rng.uniform((), 1.0, 4.0))
            fj = float(rng.uniform((), 1.0, 4.0))
            ph = float(rng.uniform((), 0.0, 2.0 * np.pi))
            chans.append(0.5 + 0.25 * np.sin(2 * np.pi * fi * i + ph)
                         + 0.25 * np.sin(2 * np.pi * fj * j))
        return np.stack(chans)
    if kind == "blob-noise":
        img = np.zeros((3, h, w))
        yy, xx = np.mgrid[0:h, 0:w]
        for b in range(8):
            br = rng.stream(f"blob{b}")
            cy = float(br.uniform((), 0, h))
            cx = float(br.uniform((), 0, w))
            s2 = float(br.uniform((), (min(h, w) / 10.0) ** 2, (min(h, w) / 3.0) ** 2))
            amp = br.uniform((3,), -1.0, 1.0)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s2))
            img += amp[:, None, None] * bump
        span = img.max() - img.min()
        if span > 0:
            img = (img - img.min()) / span
        else:
            img = np.full_like(img, 0.5)
        return img
    raise ValueError(f"unknown background kind {kind!r}")


def occlude(image: np.ndarray, mask: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Replace masked pixels with the constant fill color.

    observation = (1 - mask) * image + mask * fill; visible pixels are
    bit-identical to the input, and the operation is idempotent.
    """
    fill = np.asarray(fill, dtype=np.float64).reshape(3, 1, 1)
    m = np.asarray(mask, dtype=np.float64)[None]
    return np.where(m != 0.0, fill, image)


def compute_mean_pixel(manifest: Manifest, root=".") -> np.ndarray:
    """Per-channel mean over every background pixel of the train split."""
    train = manifest.split("train")
    if not train:
        raise ValueError("manifest has no train samples")
    total = np.zeros(3)
    count = 0
    for s in train:
        img = load_ppm(os.path.join(root, s.background))
        total += img.sum(axis=(1, 2))
        count += img.shape[1] * img.shape[2]
    return total / count


@dataclass
class DataConfig:
    n_samples: int = 16
    size: tuple[int, int] = (64, 64)
    mask_kind: str = "fence"            # fence | freeform | mixed
    train_fraction: float = 0.75
    fence: FenceParams = field(default_factory=FenceParams)
    strokes: StrokeParams = field(default_factory=StrokeParams)

    def __post_init__(self):
        if self.mask_kind not in ("fence", "freeform", "mixed"):
            raise ValueError(f"unknown mask kind {self.mask_kind!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


def build_dataset(config: DataConfig, rng: Rng, out_dir) -> Manifest:
    """Generate backgrounds, masks and mean-filled observations on disk.

    Backgrounds and masks come first; the train-split mean pixel is computed
    from the quantized files so everything downstream reproduces from disk
    alone; observations are written last.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = config.n_samples
    n_train = int(round(n * config.train_fraction))
    records = []
    for idx in range(n):
        sr = rng.stream(f"sample{idx}")
        kind = BACKGROUND_KINDS[idx % len(BACKGROUND_KINDS)]
        background = gen_background(kind, config.size, sr.stream("background"))
        mask_kind = config.mask_kind
        if mask_kind == "mixed":
            mask_kind = "fence" if idx % 2 == 0 else "freeform"
        if mask_kind == "fence":
            mask = gen_fence_mask(config.fence, config.size, sr.stream("mask"))
        else:
            mask = gen_freeform_mask(config.strokes, config.size, sr.stream("mask"))
        bg_path = out / f"bg_{idx:04d}.ppm"
        mask_path = out / f"mask_{idx:04d}.pgm"
        save_ppm(bg_path, background)
        save_pgm(mask_path, mask)
        split = "train" if idx < n_train else "eval"
        records.append((idx, split, bg_path, mask_path))

    # mean over the quantized train backgrounds, as stored on disk
    total = np.zeros(3)
    count = 0
    for idx, split, bg_path, _ in records:
        if split == "train":
            img = load_ppm(bg_path)
            total += img.sum(axis=(1, 2))
            count += img.shape[1] * img.shape[2]
    mean_pixel = total / count

    samples = []
    for idx, split, bg_path, mask_path in records:
        obs_path = out / f"obs_{idx:04d}.ppm"
        observation = occlude(load_ppm(bg_path), load_pgm(mask_path), mean_pixel)
        save_ppm(obs_path, observation)
        samples.append(Sample(split, idx, str(bg_path), str(mask_path), str(obs_path)))

    manifest = Manifest(tuple(float(v) for v in mean_pixel), samples)
    manifest.save(out / "manifest.tsv")
    return manifest
