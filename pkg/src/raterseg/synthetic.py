"""Synthetic multi-annotator segmentation data.

Each image is a blurred union of random ellipses plus noise. The blurred blob
(before noise) is a soft field; every simulated rater thresholds it at a
jittered level and then optionally grows or shrinks the result by one pixel,
so raters disagree only in the ambiguous band around the boundary.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import vstn

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}
_CROSS = ndimage.generate_binary_structure(2, 1)


class ConfigError(ValueError):
    pass


@dataclass
class AnnotatedSample:
    image: np.ndarray      # [1,H,W] float32 in [0,1]
    masks: np.ndarray      # [K,1,H,W] uint8 in {0,1}
    sample_id: str

    def __post_init__(self):
        if self.masks.ndim != 4 or self.masks.shape[1:] != self.image.shape:
            raise ValueError(f"{self.sample_id}: masks {self.masks.shape} vs image {self.image.shape}")
        if self.masks.shape[0] < 1:
            raise ValueError(f"{self.sample_id}: needs at least one mask")
        if not np.isin(self.masks, (0, 1)).all():
            raise ValueError(f"{self.sample_id}: masks must be binary")

    @property
    def num_raters(self) -> int:
        return self.masks.shape[0]

    def rater_mean(self) -> np.ndarray:
        return self.masks.astype(np.float32).mean(axis=0)


@dataclass
class DatasetManifest:
    n_train: int = 34
    n_val: int = 5
    n_test: int = 10
    num_raters: int = 7
    height: int = 64
    width: int = 64
    seed: int = 0
    blur_sigma: float = 2.0
    noise_level: float = 0.05
    threshold_spread: float = 0.15
    max_radius: int = 1

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split counts must be positive")
        if self.num_raters < 1:
            raise ConfigError("num_raters must be >= 1")

    def count(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep or key not in kinds:
                raise ConfigError(f"manifest line {lineno}: unknown or malformed entry {line!r}")
            values[key] = int(raw) if kinds[key] == "int" else float(raw)
        return cls(**values)


def _check_dims(H, W):
    if H < 16 or W < 16:
        raise ConfigError(f"image must be at least 16x16, got {H}x{W}")


def random_blob(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Union of 1-3 random ellipses covering 5%-50% of the frame."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    size = min(H, W)
    while True:
        blob = np.zeros((H, W), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.25, 0.75) * H, rng.uniform(0.25, 0.75) * W
            ay, ax = rng.uniform(0.1, 0.3, size=2) * size
            theta = rng.uniform(0, np.pi)
            c, s = np.cos(theta), np.sin(theta)
            u = (xx - cx) * c + (yy - cy) * s
            v = -(xx - cx) * s + (yy - cy) * c
            blob |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        if 0.05 <= blob.mean() <= 0.5:
            return blob


def generate_shape_image(seed, H: int = 64, W: int = 64, blur_sigma: float = 2.0,
                         noise_level: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Returns (image, soft_boundary_field), both [H,W] float32 in [0,1]."""
    _check_dims(H, W)
    if blur_sigma < 0 or not 0 <= noise_level < 1:
        raise ConfigError(f"bad blur_sigma={blur_sigma} or noise_level={noise_level}")
    rng = np.random.default_rng(seed)
    blob = random_blob(rng, H, W).astype(np.float64)
    soft = ndimage.gaussian_filter(blob, blur_sigma, mode="constant") if blur_sigma > 0 else blob
    soft = np.clip(soft, 0.0, 1.0)
    image = soft + noise_level * rng.standard_normal(soft.shape) if noise_level > 0 else soft
    return np.clip(image, 0, 1).astype(np.float32), soft.astype(np.float32)


def simulate_raters(soft_field: np.ndarray, K: int, threshold_spread: float, seed,
                    max_radius: int = 1) -> np.ndarray:
    """K binary masks [K,H,W] uint8 from jittered thresholds and 0/1-pixel morphology."""
    if K < 1 or threshold_spread < 0:
        raise ConfigError(f"bad K={K} or threshold_spread={threshold_spread}")
    rng = np.random.default_rng(seed)
    deltas = rng.uniform(-threshold_spread, threshold_spread, size=K)
    radii = rng.integers(0, max_radius + 1, size=K)
    grow = rng.random(K) < 0.5
    masks = np.empty((K,) + soft_field.shape, dtype=np.uint8)
    for k in range(K):
        m = soft_field > 0.5 + deltas[k]
        if radii[k] > 0:
            morph = ndimage.binary_dilation if grow[k] else ndimage.binary_erosion
            m = morph(m, structure=_CROSS, iterations=int(radii[k]))
        masks[k] = m
    return masks


def _sample_seed(base: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, _SPLIT_CODE[split], index])


def make_sample(manifest: DatasetManifest, split: str, index: int) -> AnnotatedSample:
    img_seed, rater_seed = _sample_seed(manifest.seed, split, index).spawn(2)
    image, soft = generate_shape_image(img_seed, manifest.height, manifest.width,
                                       manifest.blur_sigma, manifest.noise_level)
    masks = simulate_raters(soft, manifest.num_raters, manifest.threshold_spread, rater_seed,
                            manifest.max_radius)
    return AnnotatedSample(image[None], masks[:, None], f"{split}{index:03d}")


def generate_dataset(manifest: DatasetManifest) -> dict[str, list[AnnotatedSample]]:
    return {split: [make_sample(manifest, split, i) for i in range(manifest.count(split))]
            for split in SPLITS}


def write_dataset(manifest: DatasetManifest, samples: dict[str, list[AnnotatedSample]],
                  dir_path) -> None:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.txt").write_text(manifest.to_text(), encoding="utf-8")
    for split, items in samples.items():
        (root / split).mkdir(exist_ok=True)
        for s in items:
            vstn.save(root / split / f"{s.sample_id}_image.vstn", s.image.astype(np.float32))
            for k, m in enumerate(s.masks):
                vstn.save(root / split / f"{s.sample_id}_mask{k}.vstn", m.astype(np.uint8))


def read_dataset(dir_path) -> tuple[DatasetManifest, dict[str, list[AnnotatedSample]]]:
    root = Path(dir_path)
    manifest_path = root / "manifest.txt"
    try:
        manifest = DatasetManifest.from_text(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read {manifest_path}: {exc.strerror}") from exc
    samples = {}
    for split in SPLITS:
        items = []
        for img_path in sorted((root / split).glob("*_image.vstn")):
            sid = img_path.name[: -len("_image.vstn")]
            image = vstn.load(img_path)
            masks = np.stack([vstn.load(root / split / f"{sid}_mask{k}.vstn")
                              for k in range(manifest.num_raters)])
            items.append(AnnotatedSample(image, masks, sid))
        if len(items) != manifest.count(split):
            raise vstn.FormatError(f"{root / split}: found {len(items)} samples, "
                                   f"manifest says {manifest.count(split)}")
        samples[split] = items
    return manifest, samples
