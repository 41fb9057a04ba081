"""Dataset ingestion, splitting, and a procedural stand-in dataset.

Expected layout: `root/images/*.png|jpg` and `root/masks/*.png` matched by
basename, masks single-channel with pixel value = class index. An optional
`root/features/<encoder>/*.npy` tree holds precomputed feature maps for the
encoder-substitution path.
"""

import colorsys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class DatasetError(Exception):
    """Raised when a dataset directory violates the expected layout."""


@dataclass(frozen=True)
class DatasetSample:
    name: str
    image_path: Path
    mask_path: Path


@dataclass(frozen=True)
class DatasetSpec:
    root: Path
    k: int
    samples: tuple
    split: str = "train"
    feature_dirs: tuple = ()

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class SplitConfig:
    val_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"validation fraction must lie in (0, 1), got {self.val_fraction}")


def _read_mask(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DatasetError(f"mask {path} is not single-channel (shape {arr.shape})")
    return arr


def load_dataset(root, k: int, split: str = "train") -> DatasetSpec:
    """Scan and validate an image/mask directory pair."""
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise DatasetError(f"expected {images_dir} and {masks_dir} directories")
    images = {
        p.stem: p
        for p in sorted(images_dir.iterdir())
        if p.suffix.lower() in IMAGE_EXTENSIONS
    }
    masks = {p.stem: p for p in sorted(masks_dir.iterdir()) if p.suffix.lower() == ".png"}
    if not images and not masks:
        raise DatasetError(f"no samples found under {root}")
    for name in sorted(set(images) - set(masks)):
        raise DatasetError(f"image {images[name]} has no matching mask")
    for name in sorted(set(masks) - set(images)):
        raise DatasetError(f"mask {masks[name]} has no matching image")
    samples = []
    for name in sorted(images):
        mask = _read_mask(masks[name])
        top = int(mask.max())
        if top >= k:
            raise DatasetError(f"mask {masks[name]} contains label {top} but k={k}")
        with Image.open(images[name]) as img:
            if img.size != (mask.shape[1], mask.shape[0]):
                raise DatasetError(
                    f"image {images[name]} is {img.size[1]}x{img.size[0]} but its mask is "
                    f"{mask.shape[0]}x{mask.shape[1]}"
                )
        samples.append(DatasetSample(name, images[name], masks[name]))
    features_root = root / "features"
    feature_dirs = ()
    if features_root.is_dir():
        feature_dirs = tuple(sorted(p.name for p in features_root.iterdir() if p.is_dir()))
    return DatasetSpec(root=root, k=k, samples=tuple(samples), split=split, feature_dirs=feature_dirs)


def split_train_val(spec: DatasetSpec, cfg: SplitConfig = SplitConfig()):
    """Deterministic disjoint train/val split; val size = round(fraction * N)."""
    n = len(spec.samples)
    if n < 5:
        raise DatasetError(f"need at least 5 samples to split, got {n}")
    n_val = int(round(cfg.val_fraction * n))
    n_val = min(max(n_val, 1), n - 1)
    ordered = sorted(spec.samples, key=lambda s: s.name)
    perm = np.random.default_rng(cfg.seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = tuple(s for i, s in enumerate(ordered) if i not in val_idx)
    val = tuple(s for i, s in enumerate(ordered) if i in val_idx)
    return (
        replace(spec, samples=train, split="train"),
        replace(spec, samples=val, split="val"),
    )


def _class_color(c: int) -> np.ndarray:
    # golden-ratio hue stepping keeps class colors well separated
    hue = (0.72 + 0.381966 * (c - 1)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.45, 0.70))


def _smooth_field(rng: np.random.Generator, size: int, n_waves: int, fmax: float, amp: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-fmax, fmax, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return amp * field / max(n_waves, 1)


def _draw_blob(rng: np.random.Generator, size: int, area_share: float) -> np.ndarray:
    radius = size * np.sqrt(area_share / np.pi)
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    amps = rng.uniform(-0.12, 0.12, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    yy, xx = np.mgrid[0:size, 0:size]
    theta = np.arctan2(yy - cy, xx - cx)
    rho = np.hypot(yy - cy, xx - cx)
    wobble = sum(a * np.cos(m * theta + p) for m, a, p in zip((2, 3, 4), amps, phases))
    return rho <= radius * (1.0 + wobble)


def _synth_sample(rng: np.random.Generator, k: int, size: int, coverage):
    lo, hi = coverage
    for _ in range(64):
        mask = np.zeros((size, size), dtype=np.uint8)
        for c in range(1, k):
            share = rng.uniform(0.15, 0.40) / (k - 1)
            n_blobs = int(rng.integers(1, 3))
            for _ in range(n_blobs):
                mask[_draw_blob(rng, size, share / n_blobs)] = c
        fg = float((mask > 0).mean())
        counts = np.bincount(mask.reshape(-1), minlength=k)
        if lo <= fg <= hi and all(counts[c] >= 0.01 * size * size for c in range(1, k)):
            break
    else:
        raise RuntimeError("could not draw a sample inside the coverage band")

    image = np.empty((size, size, 3))
    image[:] = np.array([0.93, 0.85, 0.90])
    image += _smooth_field(rng, size, n_waves=3, fmax=3.0, amp=0.05)[..., None]
    yy, xx = np.mgrid[0:size, 0:size] / size
    for c in range(1, k):
        angle = rng.uniform(0, np.pi)
        freq = 6.0 + 3.0 * c
        phase = rng.uniform(0, 2 * np.pi)
        stripes = 0.05 * np.cos(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        region = mask == c
        image[region] = _class_color(c) + stripes[region, None]
    image += rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return np.round(image * 255).astype(np.uint8), mask


def synth_generate(
    seed: int,
    n_samples: int,
    k: int,
    size: int,
    out_dir,
    coverage=(0.10, 0.60),
) -> DatasetSpec:
    """Materialize a reproducible blob dataset with exact ground-truth masks."""
    if k < 2:
        raise ValueError(f"need a background plus at least one class, got k={k}")
    if size % 16 != 0:
        raise ValueError(f"image size must be divisible by 16, got {size}")
    if n_samples < 1:
        raise ValueError(f"need at least one sample, got {n_samples}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_samples):
        image, mask = _synth_sample(rng, k, size, coverage)
        Image.fromarray(image, mode="RGB").save(out_dir / "images" / f"sample_{i:03d}.png")
        Image.fromarray(mask, mode="L").save(out_dir / "masks" / f"sample_{i:03d}.png")
    return load_dataset(out_dir, k)


def load_sample_arrays(spec: DatasetSpec):
    """Load every sample into memory: images [N, 3, H, W] in [0, 1], labels [N, H, W]."""
    images = []
    labels = []
    sizes = set()
    for sample in spec.samples:
        img = np.asarray(Image.open(sample.image_path).convert("RGB"), dtype=np.float32) / 255.0
        mask = _read_mask(sample.mask_path)
        sizes.add(img.shape[:2])
        images.append(torch.from_numpy(img.transpose(2, 0, 1)))
        labels.append(torch.from_numpy(mask.astype(np.int64)))
    if len(sizes) > 1:
        raise DatasetError(f"all samples must share one resolution, found {sorted(sizes)}")
    return torch.stack(images), torch.stack(labels)


def feature_path(spec: DatasetSpec, encoder: str, name: str) -> Path:
    return spec.root / "features" / encoder / f"{name}.npy"


def load_feature_map(spec: DatasetSpec, encoder: str, name: str) -> torch.Tensor:
    """Read one precomputed [C, h, w] feature map from the dataset's feature tree."""
    path = feature_path(spec, encoder, name)
    if not path.is_file():
        raise DatasetError(f"no stored features for sample {name!r} at {path}")
    arr = np.load(path)
    if arr.ndim != 3:
        raise DatasetError(f"feature file {path} must hold a [C, h, w] array, got shape {arr.shape}")
    return torch.from_numpy(arr.astype(np.float32))


def save_feature_map(spec: DatasetSpec, encoder: str, name: str, fmap: torch.Tensor) -> Path:
    """Store a [C, h, w] feature map so it can replace the encoder later."""
    path = feature_path(spec, encoder, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, fmap.detach().cpu().numpy().astype(np.float32))
    return path
