"""Synthetic nodule-like data, PGM image I/O, manifests and preprocessing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .serialize import FormatError
from .tensor import Tensor

N_HARMONICS = 4  # radial Fourier terms k = 2..5


@dataclass
class SamplePair:
    image: np.ndarray   # 1 x H x W in [0, 1]
    mask: np.ndarray    # 1 x H x W in {0, 1}
    id: str
    source: str         # "synthetic:seed=S,index=I" or "file:<path>"
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError(f"{self.id}: mask is not binary")


@dataclass
class SynthConfig:
    size: int = 128
    n_samples: int = 16
    seed: int = 0
    blob_count: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (4.0, 20.0)
    aspect: tuple[float, float] = (0.7, 1.0)
    contrast: tuple[float, float] = (0.45, 0.9)
    background: float = 0.2
    noise_sigma: float = 0.05
    irregularity: tuple[float, float] = (0.0, 0.3)

    def __post_init__(self):
        for name in ("blob_count", "radius", "aspect", "contrast", "irregularity"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        problems = []

        def check_range(name, lo_bound, hi_bound):
            lo, hi = getattr(self, name)
            if not (lo_bound <= lo <= hi <= hi_bound):
                problems.append(f"{name} range {getattr(self, name)} outside [{lo_bound}, {hi_bound}] or reversed")

        if self.size < 8:
            problems.append(f"size must be >= 8, got {self.size}")
        if self.n_samples < 0:
            problems.append(f"n_samples must be >= 0, got {self.n_samples}")
        check_range("blob_count", 1, 64)
        check_range("radius", 1.0, np.inf)
        check_range("aspect", 0.05, 1.0)
        check_range("contrast", 0.0, 1.0)
        check_range("irregularity", 0.0, 0.49)
        if not 0.0 <= self.background <= 1.0:
            problems.append(f"background must be in [0, 1], got {self.background}")
        if self.noise_sigma < 0:
            problems.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not problems:
            reach = self.radius[1] * (1 + 2 * self.irregularity[1])
            if 2 * reach > self.size - 1:
                problems.append(
                    f"blobs of radius {self.radius[1]} with irregularity {self.irregularity[1]} "
                    f"reach {reach:.1f} px and do not fit a {self.size} px patch"
                )
        if problems:
            raise ValueError("invalid SynthConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def blob_area(b: dict) -> float:
    """Exact area of a rendered blob's continuous outline: pi R^2 e (1 + sum a_k^2 / 2)."""
    a = np.asarray(b["harmonics"])
    return float(np.pi * b["radius"] ** 2 * b["aspect"] * (1.0 + 0.5 * np.sum(a * a)))


def _draw_blob(rng, cfg: SynthConfig, placed: list) -> dict:
    radius = rng.uniform(*cfg.radius)
    aspect = rng.uniform(*cfg.aspect)
    irr = rng.uniform(*cfg.irregularity)
    harmonics = irr * (2.0 / N_HARMONICS) * rng.uniform(-1, 1, N_HARMONICS)
    phases = rng.uniform(0, 2 * np.pi, N_HARMONICS)
    rotation = rng.uniform(0, np.pi)
    reach = radius * (1 + np.abs(harmonics).sum())
    lo, hi = reach, cfg.size - 1 - reach
    # Prefer positions whose bounding circles miss earlier blobs; give up after a few tries.
    for _ in range(32):
        cy, cx = rng.uniform(lo, hi, 2)
        if all(np.hypot(cy - p["cy"], cx - p["cx"]) > reach + p["reach"] for p in placed):
            break
    return {
        "cy": float(cy), "cx": float(cx), "radius": float(radius), "aspect": float(aspect),
        "rotation": float(rotation), "harmonics": harmonics.tolist(), "phases": phases.tolist(),
        "reach": float(reach), "intensity": float(rng.uniform(*cfg.contrast)),
    }


def render_blob(b: dict, size: int) -> np.ndarray:
    """Boolean mask of a star-convex blob: a rotated ellipse with a radial Fourier outline."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - b["cy"], xx - b["cx"]
    c, s = np.cos(b["rotation"]), np.sin(b["rotation"])
    u = (c * dx + s * dy) / b["radius"]
    v = (-s * dx + c * dy) / (b["radius"] * b["aspect"])
    rho, phi = np.hypot(u, v), np.arctan2(v, u)
    outline = np.ones_like(phi)
    for k, (a, ph) in enumerate(zip(b["harmonics"], b["phases"]), start=2):
        outline += a * np.cos(k * phi + ph)
    return rho <= outline


def _background(rng, size: int, amplitude: float) -> np.ndarray:
    if amplitude == 0:
        return np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = rng.uniform(0.5, 2.0, 4) * np.pi
    ph = rng.uniform(0, 2 * np.pi, 2)
    wave = np.sin(f[0] * yy + f[1] * xx + ph[0]) + np.sin(f[2] * yy - f[3] * xx + ph[1])
    return amplitude * (0.5 + 0.25 * wave)


def synthesize_sample(cfg: SynthConfig, index: int) -> SamplePair:
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    blobs: list[dict] = []
    for _ in range(int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))):
        blobs.append(_draw_blob(rng, cfg, blobs))
    mask = np.zeros((size, size), dtype=bool)
    fill = np.zeros((size, size))
    for b in blobs:
        region = render_blob(b, size)
        mask |= region
        fill = np.where(region, np.maximum(fill, b["intensity"]), fill)
    image = _background(rng, size, cfg.background) + fill
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SamplePair(
        image=image[None], mask=mask[None].astype(np.float64),
        id=f"synth-{cfg.seed}-{index:05d}",
        source=f"synthetic:seed={cfg.seed},index={index}",
        meta={"blobs": blobs},
    )


def generate_synthetic(cfg: SynthConfig) -> list[SamplePair]:
    """Deterministic dataset; sample i depends only on (cfg, seed, i)."""
    cfg.validate()
    return [synthesize_sample(cfg, i) for i in range(cfg.n_samples)]


# ---------------------------------------------------------------- PGM

def load_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) as an H x W array of v / 255."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P5":
            raise FormatError(f"{path}: not a binary PGM (magic {magic!r}, expected b'P5')")
        fh.seek(0)
        try:
            with Image.open(fh) as im:
                if im.mode != "L":
                    raise FormatError(f"{path}: PGM must be 8-bit with maxval 255, got mode {im.mode}")
                pixels = np.asarray(im, dtype=np.uint8)
        except FormatError:
            raise
        except (UnidentifiedImageError, ValueError, OSError, SyntaxError) as exc:
            raise FormatError(f"{path}: malformed PGM ({exc})") from None
    return pixels.astype(np.float64) / 255.0


def to_bytes(values) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_pgm(values, path) -> None:
    """Write an H x W (or 1 x H x W) array in [0, 1] as P5, rounding half up."""
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"save_pgm expects H x W or 1 x H x W, got {arr.shape}")
    Image.fromarray(to_bytes(arr), mode="L").save(path, format="PPM")


# ---------------------------------------------------------------- preprocessing

def _fit_axis(arr, axis, target):
    n = arr.shape[axis]
    if n > target:
        start = (n - target) // 2
        return np.take(arr, np.arange(start, start + target), axis=axis)
    if n < target:
        before = (target - n) // 2
        widths = [(0, 0)] * arr.ndim
        widths[axis] = (before, target - n - before)
        return np.pad(arr, widths)
    return arr


def preprocess(image, target) -> np.ndarray:
    """Center-crop or symmetrically zero-pad a single-channel image to ``target``."""
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise ValueError(f"preprocess expects a single-channel image, got {arr.shape}")
    arr = _fit_axis(_fit_axis(arr, 1, target[0]), 2, target[1])
    return arr[0] if squeeze else arr


# ---------------------------------------------------------------- datasets on disk

def write_dataset(samples, out_dir) -> Path:
    """Save samples as PGM pairs plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img, msk = f"images/{s.id}.pgm", f"masks/{s.id}.pgm"
        save_pgm(s.image, out / img)
        save_pgm(s.mask, out / msk)
        entries.append({"id": s.id, "image_path": img, "mask_path": msk})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2))
    return manifest


def load_manifest(path) -> list[SamplePair]:
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise FormatError(f"{path}: manifest must be a JSON list of {{id, image_path, mask_path}}")
    samples = []
    for e in entries:
        missing = {"id", "image_path", "mask_path"} - set(e)
        if missing:
            raise FormatError(f"{path}: manifest entry {e} lacks {sorted(missing)}")
        img_path = path.parent / e["image_path"]
        image = load_pgm(img_path)[None]
        mask = (load_pgm(path.parent / e["mask_path"]) >= 0.5).astype(np.float64)[None]
        samples.append(SamplePair(image, mask, str(e["id"]), f"file:{img_path}"))
    return samples


def load_dataset(path) -> list[SamplePair]:
    """A manifest (JSON list) or a SynthConfig (JSON object)."""
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        return generate_synthetic(SynthConfig.from_dict(doc))
    return load_manifest(path)


def fit_samples(samples, target) -> list[SamplePair]:
    """Preprocess images and masks to ``target`` where their size differs."""
    out = []
    for s in samples:
        if s.image.shape[1:] == tuple(target):
            out.append(s)
        else:
            out.append(SamplePair(preprocess(s.image, target), preprocess(s.mask, target),
                                  s.id, s.source, s.meta))
    return out
