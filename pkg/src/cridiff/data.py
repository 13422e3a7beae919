"""Synthetic phantom generation, dataset directory ingestion, and splits.

Phantoms are single-ellipse grayscale images with a smooth intensity falloff
at the rim (deliberately ambiguous edges) plus Gaussian noise; masks are the
clean ellipse supports. Interchange format is 8-bit grayscale PNG under
root/images and root/masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class PhantomSpec:
    size: Tuple[int, int] = (64, 64)  # (H, W), divisible by 32
    axes_frac: Tuple[float, float] = (0.12, 0.35)  # semi-axis range, frac of min dim
    center_jitter: float = 0.18  # max offset from image center, frac of dim
    fg_intensity: Tuple[float, float] = (0.65, 0.9)
    bg_intensity: Tuple[float, float] = (0.1, 0.3)
    noise_sigma: float = 0.03
    falloff: float = 0.15  # rim softness in implicit-ellipse units; 0 = hard step
    texture: bool = False  # low-frequency background texture
    area_frac: Tuple[float, float] = (0.02, 0.45)

    def __post_init__(self):
        h, w = self.size
        if h % 32 or w % 32:
            raise ValueError(f"phantom size {self.size} must be divisible by 32")
        if not 0 < self.area_frac[0] < self.area_frac[1] <= 1:
            raise ValueError(f"bad area bounds {self.area_frac}")


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator):
    """Return (image in [0,1] float64, binary mask uint8), both H x W."""
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    lo, hi = spec.area_frac
    for _ in range(200):
        cy = h / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter) * h
        cx = w / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter) * w
        a = rng.uniform(*spec.axes_frac) * min(h, w)
        b = rng.uniform(*spec.axes_frac) * min(h, w)
        theta = rng.uniform(0, np.pi)
        dx, dy = xx - cx, yy - cy
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        e = u * u + v * v
        mask = (e <= 1.0).astype(np.uint8)
        frac = mask.mean()
        if lo <= frac <= hi and mask.any():
            break
    else:
        raise ValueError(f"could not satisfy area bounds {spec.area_frac}")

    fg = rng.uniform(*spec.fg_intensity)
    bg = rng.uniform(*spec.bg_intensity)
    if spec.falloff > 0:
        # Smooth transition of width ~falloff around the implicit contour e=1.
        blend = 1.0 / (1.0 + np.exp((e - 1.0) / spec.falloff))
    else:
        blend = (e <= 1.0).astype(np.float64)
    img = bg + (fg - bg) * blend
    if spec.texture:
        ty = rng.uniform(1.0, 4.0)
        tx = rng.uniform(1.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        img = img + 0.05 * np.sin(2 * np.pi * ty * yy / h + phase[0]) * np.cos(
            2 * np.pi * tx * xx / w + phase[1]
        )
    if spec.noise_sigma > 0:
        img = img + rng.normal(0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask


@dataclass
class DatasetManifest:
    pairs: List[Tuple[Path, Path]]
    seed: Optional[int] = None
    fractions: Optional[Tuple[float, float, float]] = None
    splits: Dict[str, List[int]] = field(default_factory=dict)

    def subset(self, split: str) -> List[Tuple[Path, Path]]:
        return [self.pairs[i] for i in self.splits.get(split, [])]


def write_dataset(root, n: int, spec: PhantomSpec, seed: int) -> DatasetManifest:
    """Generate n phantoms under root/images + root/masks, one RNG substream each."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    streams = np.random.SeedSequence(seed).spawn(n)
    pairs = []
    for i, ss in enumerate(streams):
        img, mask = generate_phantom(spec, np.random.default_rng(ss))
        ip = root / "images" / f"phantom_{i:04d}.png"
        mp = root / "masks" / f"phantom_{i:04d}.png"
        save_png(ip, img)
        save_png(mp, mask.astype(np.float64))
        pairs.append((ip, mp))
    return DatasetManifest(pairs=pairs, seed=seed)


def save_png(path, arr01: np.ndarray) -> None:
    """Save a [0,1] float array as 8-bit grayscale PNG."""
    Image.fromarray((np.clip(arr01, 0, 1) * 255).round().astype(np.uint8), "L").save(path)


def save_png16(path, arr01: np.ndarray) -> None:
    """Save a [0,1] float array as 16-bit grayscale PNG (soft labels)."""
    Image.fromarray((np.clip(arr01, 0, 1) * 65535).round().astype(np.uint16)).save(path)


def load_image01(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    """Load a mask PNG, binarizing at 127."""
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def load_dataset(root) -> DatasetManifest:
    """Pair root/images/*.png with root/masks/*.png by stem, sorted."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and masks/")
    images = {p.stem: p for p in sorted(img_dir.glob("*.png"))}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))}
    if not images and not masks:
        raise ValueError(f"no pairs found under {root}")
    unpaired = sorted(set(images) ^ set(masks))
    if unpaired:
        raise ValueError(f"unpaired stems: {unpaired[:5]}")
    pairs = []
    for stem in sorted(images):
        ip, mp = images[stem], masks[stem]
        ish = Image.open(ip).size
        msh = Image.open(mp).size
        if ish != msh:
            raise ValueError(f"size mismatch for {stem}: image {ish} vs mask {msh}")
        pairs.append((ip, mp))
    return DatasetManifest(pairs=pairs)


def split_counts(n: int, fractions) -> List[int]:
    """Floor each target count, then hand leftovers to the largest remainders."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    base = [int(np.floor(n * f)) for f in fractions]
    rema = [n * f - b for f, b in zip(fractions, base)]
    leftover = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-rema[i], i))
    for i in order[:leftover]:
        base[i] += 1
    return base


SPLIT_NAMES = ("train", "val", "test")


def split_manifest(manifest: DatasetManifest, fractions, seed: int) -> DatasetManifest:
    """Deterministic shuffled split into train/val/test."""
    n = len(manifest.pairs)
    counts = split_counts(n, fractions)
    nonzero = sum(1 for c in fractions if c > 0)
    if n < nonzero:
        raise ValueError(f"{n} items cannot fill {nonzero} nonempty splits")
    perm = np.random.default_rng(seed).permutation(n)
    splits, start = {}, 0
    for name, c in zip(SPLIT_NAMES, counts):
        splits[name] = sorted(int(i) for i in perm[start : start + c])
        start += c
    manifest.splits = splits
    manifest.seed = seed
    manifest.fractions = tuple(fractions)
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# seed={manifest.seed} fractions={manifest.fractions}\n")
        for name in SPLIT_NAMES:
            for i in manifest.splits.get(name, []):
                ip, mp = manifest.pairs[i]
                fh.write(f"{name}\t{ip}\t{mp}\n")
