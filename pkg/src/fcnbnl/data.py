"""Images, datasets, synthetic scenes and test-time perturbations.

Images are ``float64`` arrays of shape ``(H, W, C)`` with ``C`` in {1, 3} and
values in [0, 1]. On disk they are binary portable pixmaps (P6) or graymaps
(P5) with maxval 255.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Malformed or unsupported pixmap file."""


# ---------------------------------------------------------------------------
# Pixmap I/O
# ---------------------------------------------------------------------------

_WS = b" \t\r\n"


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c in (b" ", b"\t", b"\r", b"\n"):
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WS:
        pos += 1
    if start == pos:
        raise ImageFormatError(f"truncated header at byte offset {start}")
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic {buf[:2]!r} at byte offset 0 (expected P5 or P6)")
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        offset = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"invalid {what} {tok!r} at byte offset {offset}")
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ImageFormatError(f"image dims must be positive, got {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 8-bit, maxval 255, is supported)")
    if pos >= len(buf) or buf[pos] not in _WS:
        raise ImageFormatError(f"missing whitespace after header at byte offset {pos}")
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise ImageFormatError(
            f"truncated payload at byte offset {len(buf)}: expected {need} bytes from offset {pos}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return raw.reshape(height, width, channels).astype(np.float64) / 255.0


def encode_pnm(image: np.ndarray) -> bytes:
    img = check_image(image)
    h, w, c = img.shape
    magic = b"P6" if c == 3 else b"P5"
    payload = np.rint(img * 255.0).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + payload.tobytes()


def load_image(path: str | os.PathLike) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def save_image(image: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_pnm(image))


def check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be (H, W, 1|3), got dims {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("image pixels must lie in [0, 1]")
    return img


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelSet:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"class names must be unique: {self.names}")
        if len(self.names) < 2:
            raise ValueError("a label set needs at least 2 classes")

    @property
    def k(self) -> int:
        return len(self.names)


@dataclass
class Dataset:
    """Labeled images held in memory. ``paths`` is filled when loaded from disk."""

    images: list[np.ndarray]
    labels: list[int]
    label_set: LabelSet
    provenance: str = ""
    paths: list[str] | None = None

    def __post_init__(self):
        if not self.images:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        bad = [y for y in self.labels if not 0 <= y < self.label_set.k]
        if bad:
            raise ValueError(f"label index {bad[0]} out of range for k={self.label_set.k}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> Dataset:
        indices = list(indices)
        return Dataset(
            [self.images[i] for i in indices],
            [self.labels[i] for i in indices],
            self.label_set,
            self.provenance,
            None if self.paths is None else [self.paths[i] for i in indices],
        )


def load_dataset_dir(root: str | os.PathLike) -> Dataset:
    """Read ``root/<class_name>/*.ppm|*.pgm``; classes ordered lexicographically."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels, paths = [], [], []
    for y, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() in (".ppm", ".pgm"):
                images.append(load_image(f))
                labels.append(y)
                paths.append(f"{name}/{f.name}")
    return Dataset(images, labels, LabelSet(tuple(classes)), provenance=str(root), paths=paths)


def read_splits(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``splits.txt`` lines ``<relative-path> train|test``."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(maxsplit=1)
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: expected '<relative-path> train|test'")
        out[parts[0]] = parts[1]
    return out


def write_splits(path: str | os.PathLike, train: Dataset, test: Dataset) -> None:
    lines = [f"{p} train" for p in train.paths or []] + [f"{p} test" for p in test.paths or []]
    Path(path).write_text("\n".join(sorted(lines)) + "\n")


def apply_splits(dataset: Dataset, splits: dict[str, str]) -> tuple[Dataset, Dataset]:
    if dataset.paths is None:
        raise ValueError("dataset has no file paths to match against splits")
    train = [i for i, p in enumerate(dataset.paths) if splits.get(p) == "train"]
    test = [i for i, p in enumerate(dataset.paths) if splits.get(p) == "test"]
    return dataset.subset(train), dataset.subset(test)


def split_dataset(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified random split; at least one image per class on each side."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    labels = np.asarray(dataset.labels)
    train_idx, test_idx = [], []
    for y in range(dataset.label_set.k):
        idx = np.flatnonzero(labels == y)
        if len(idx) < 2:
            raise ValueError(f"class {dataset.label_set.names[y]!r} has {len(idx)} items; need >= 2 to split")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    k: int = 4
    images_per_class: int = 75
    image_size: int = 48
    motif_size: int = 12
    noise_level: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.images_per_class < 1:
            raise ValueError(f"images_per_class must be >= 1, got {self.images_per_class}")
        if not 1 <= self.motif_size < self.image_size:
            raise ValueError(
                f"motif_size must satisfy 1 <= motif_size < image_size, got {self.motif_size} vs {self.image_size}"
            )
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")

    def to_dict(self) -> dict:
        return asdict(self)


def class_motifs(cfg: SynthConfig) -> list[np.ndarray]:
    """One ``(motif, motif, 3)`` oriented grating per class.

    Classes differ in orientation and spatial frequency; all motifs share the
    same two-tone palette so that color alone does not identify the class.
    """
    cfg.validate()
    s = cfg.motif_size
    v, u = np.mgrid[0:s, 0:s].astype(np.float64)
    u -= (s - 1) / 2
    v -= (s - 1) / 2
    dark = np.array([0.15, 0.1, 0.35])
    light = np.array([0.95, 0.85, 0.3])
    motifs = []
    for c in range(cfg.k):
        theta = math.pi * c / cfg.k
        cycles = 2.0 + (c % 2)
        phase = 2 * math.pi * cycles * (u * math.cos(theta) + v * math.sin(theta)) / s
        t = 0.5 + 0.5 * np.cos(phase)
        motifs.append(dark + t[:, :, None] * (light - dark))
    return motifs


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.2, 0.6, 3)
    slope = rng.uniform(-0.2, 0.2, (2, 3))
    img = base + yy[:, :, None] * slope[0] + xx[:, :, None] * slope[1]
    # clutter: random flat rectangles and soft blobs
    for _ in range(rng.integers(4, 8)):
        h, w = rng.integers(3, size // 3, 2)
        y0, x0 = rng.integers(0, size - h), rng.integers(0, size - w)
        img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0, 1, 3)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(2, size / 5)
        mask = np.exp(-((yy * size - cy) ** 2 + (xx * size - cx) ** 2) / (2 * r * r))
        img = img * (1 - mask[:, :, None]) + mask[:, :, None] * rng.uniform(0, 1, 3)
    return img


def generate_synthetic_dataset(cfg: SynthConfig) -> Dataset:
    """Cluttered scenes whose class is given by a locally stamped motif.

    Every image gets 2-4 opaque copies of its class motif at random positions
    over a random background drawn from the same distribution for all
    classes, then additive Gaussian noise. Pixels are quantized to 8 bits so
    the result survives a pixmap round trip unchanged.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    motifs = class_motifs(cfg)
    n, s = cfg.image_size, cfg.motif_size
    images, labels, paths = [], [], []
    for y in range(cfg.k):
        for i in range(cfg.images_per_class):
            img = _background(rng, n)
            for _ in range(rng.integers(2, 5)):
                r0, c0 = rng.integers(0, n - s + 1, 2)
                img[r0 : r0 + s, c0 : c0 + s] = motifs[y]
            if cfg.noise_level > 0:
                img = img + rng.normal(0, cfg.noise_level, img.shape)
            img = np.rint(np.clip(img, 0, 1) * 255) / 255
            images.append(img)
            labels.append(y)
            paths.append(f"class{y}/{i:04d}.ppm")
    names = tuple(f"class{y}" for y in range(cfg.k))
    return Dataset(images, labels, LabelSet(names), provenance=f"synth seed={cfg.seed}", paths=paths)


def write_dataset_dir(dataset: Dataset, root: str | os.PathLike) -> None:
    root = Path(root)
    paths = dataset.paths or [
        f"{dataset.label_set.names[y]}/{i:04d}.ppm" for i, y in enumerate(dataset.labels)
    ]
    for img, rel in zip(dataset.images, paths):
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(img, target)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear weights, half-pixel centers, edge clamped."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def rescale_image(
    image: np.ndarray, longest: int | None = None, size: tuple[int, int] | None = None
) -> np.ndarray:
    """Bilinear resize to an explicit ``(H, W)`` or to a longest-side length."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if size is None:
        if longest is None or longest < 1:
            raise ValueError("give either size=(H, W) or longest >= 1")
        scale = longest / max(h, w)
        size = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    th, tw = size
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be >= 1, got {size}")
    if (th, tw) == (h, w):
        return img.copy()
    rows, cols = _interp_matrix(h, th), _interp_matrix(w, tw)
    tmp = np.tensordot(rows, img, axes=(1, 0))  # (th, w, c)
    out = np.tensordot(tmp, cols, axes=(1, 1)).transpose(0, 2, 1)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


class PerturbationKind(str, enum.Enum):
    ORIGINAL = "original"
    OUTSIDE_BORDER = "outside_border"
    OCCLUDER_RIGHT = "occluder_right"
    OCCLUDER_CENTRAL = "occluder_central"
    TEXTURED_OCCLUDER_CENTRAL = "textured_occluder_central"
    CUT_RIGHT_HALF = "cut_right_half"
    CUT_TOP_HALF = "cut_top_half"
    UPSIDE_DOWN = "upside_down"


def _checker(h: int, w: int, c: int, cell: int = 2) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    return np.repeat(board[:, :, None], c, axis=2)


def apply_perturbation(image: np.ndarray, kind: PerturbationKind | str) -> np.ndarray:
    kind = PerturbationKind(kind)
    img = np.array(image, dtype=np.float64, copy=True)
    h, w, c = img.shape
    if kind is PerturbationKind.ORIGINAL:
        return img
    if kind is PerturbationKind.UPSIDE_DOWN:
        return img[::-1, ::-1].copy()
    if kind is PerturbationKind.CUT_RIGHT_HALF:
        return img[:, : max(1, w // 2)].copy()
    if kind is PerturbationKind.CUT_TOP_HALF:
        return img[h - max(1, h // 2) :].copy()
    if kind is PerturbationKind.OCCLUDER_RIGHT:
        img[:, w - w // 4 :] = 0
        return img
    if kind in (PerturbationKind.OCCLUDER_CENTRAL, PerturbationKind.TEXTURED_OCCLUDER_CENTRAL):
        oh, ow = h // 2, w // 2
        r0, c0 = (h - oh) // 2, (w - ow) // 2
        if kind is PerturbationKind.OCCLUDER_CENTRAL:
            img[r0 : r0 + oh, c0 : c0 + ow] = 0
        else:
            img[r0 : r0 + oh, c0 : c0 + ow] = _checker(oh, ow, c)
        return img
    if kind is PerturbationKind.OUTSIDE_BORDER:
        sh, sw = max(1, h // 2), max(1, w // 2)
        small = rescale_image(img, size=(sh, sw))
        out = np.zeros_like(img)
        r0, c0 = (h - sh) // 2, (w - sw) // 2
        out[r0 : r0 + sh, c0 : c0 + sw] = small
        return out
    raise AssertionError(kind)


def jitter_rgb(image: np.ndarray, rng: np.random.Generator, sigma: float = 0.02) -> np.ndarray:
    """Per-channel additive color shift, clipped back to [0, 1]."""
    shift = rng.normal(0.0, sigma, image.shape[2])
    return np.clip(image + shift, 0.0, 1.0)


__all__ = [
    "Dataset",
    "ImageFormatError",
    "LabelSet",
    "PerturbationKind",
    "SynthConfig",
    "apply_perturbation",
    "apply_splits",
    "check_image",
    "class_motifs",
    "decode_pnm",
    "encode_pnm",
    "generate_synthetic_dataset",
    "jitter_rgb",
    "load_dataset_dir",
    "load_image",
    "read_splits",
    "rescale_image",
    "save_image",
    "split_dataset",
    "write_dataset_dir",
    "write_splits",
]
