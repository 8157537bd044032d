"""Patch-by-patch versus fully-convolutional descriptor extraction timing."""

from __future__ import annotations

import csv
import os
import statistics
import time
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .data import rescale_image
from .fcn import FcnModel, closest_pyramid, fcn_forward, receptive_field, resolution_for_grid, to_chw


@dataclass(frozen=True)
class PatchExtractor:
    """Random square patches, ``count`` in total, spread evenly over ``patch_sizes``."""

    patch_sizes: tuple[int, ...] = (32, 64, 128)
    count: int = 100
    include_full_image: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"patch count must be >= 1, got {self.count}")
        if not self.patch_sizes or min(self.patch_sizes) < 1:
            raise ValueError(f"invalid patch sizes {self.patch_sizes}")

    def counts_per_size(self) -> list[int]:
        base, extra = divmod(self.count, len(self.patch_sizes))
        return [base + (i < extra) for i in range(len(self.patch_sizes))]

    def sample(self, height: int, width: int) -> list[list[tuple[int, int, int]]]:
        """Per patch size, a list of ``(row, col, size)`` windows."""
        rng = np.random.default_rng(self.seed)
        out = []
        for size, n in zip(self.patch_sizes, self.counts_per_size()):
            if size > height or size > width:
                raise ValueError(f"patch size {size} exceeds image {height}x{width}")
            rows = rng.integers(0, height - size + 1, n)
            cols = rng.integers(0, width - size + 1, n)
            out.append([(int(r), int(c), size) for r, c in zip(rows, cols)])
        return out


def _single_descriptor(model: FcnModel, patch: np.ndarray) -> np.ndarray:
    rf, _ = receptive_field(model.topology)
    resized = rescale_image(patch, size=(rf, rf))
    desc, _ = fcn_forward(model, to_chw(resized).astype(model.dtype))
    return desc.reshape(-1)


def extract_patch_mode(
    image: np.ndarray, extractor: PatchExtractor, model: FcnModel, windows=None
) -> list[np.ndarray]:
    """One descriptor per sampled patch, each forwarded on its own.

    Patches are resized to the receptive-field resolution so the extractor
    yields a single grid cell. Returns one ``(n_s, D)`` array per patch size,
    plus a trailing ``(1, D)`` array for the whole image if requested.
    """
    h, w = image.shape[:2]
    windows = extractor.sample(h, w) if windows is None else windows
    scales = []
    for group in windows:
        descs = [_single_descriptor(model, image[r : r + s, c : c + s]) for r, c, s in group]
        scales.append(np.stack(descs) if descs else np.zeros((0, model.topology.descriptor_dim)))
    if extractor.include_full_image:
        scales.append(_single_descriptor(model, image)[None])
    return [s for s in scales if len(s)]


def fc_resolutions(model: FcnModel, count: int) -> list[int]:
    """Square input resolutions whose grids together give a total closest to ``count``."""
    return [resolution_for_grid(model.topology, side) for side in closest_pyramid(model.topology, count)]


def extract_fc_mode(image: np.ndarray, model: FcnModel, resolutions: Sequence[int]) -> list[np.ndarray]:
    """One fully-convolutional pass per resolution; ``(eta_s, D)`` per scale."""
    out = []
    for r in resolutions:
        desc, _ = fcn_forward(model, to_chw(rescale_image(image, size=(r, r))).astype(model.dtype))
        out.append(desc.reshape(-1, desc.shape[-1]))
    return out


@dataclass
class TimingRow:
    count: int
    fc_count: int
    patch_median: float
    patch_std: float
    fc_median: float
    fc_std: float
    repetitions: int

    @property
    def patch_per_descriptor(self) -> float:
        return self.patch_median / self.count

    @property
    def fc_per_descriptor(self) -> float:
        return self.fc_median / self.fc_count


def _time(fn, repetitions: int) -> list[float]:
    fn()  # warm-up, not recorded
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def run_timing_sweep(
    images: Sequence[np.ndarray],
    counts: Sequence[int],
    model: FcnModel,
    repetitions: int = 5,
    patch_sizes: Sequence[int] = (32, 64, 128),
    seed: int = 0,
) -> list[TimingRow]:
    """Median wall time of both extraction modes over ``images`` for each descriptor count.

    Measured single-threaded. The fully-convolutional mode reaches a count
    through the pyramid whose total is closest; that total is recorded.
    """
    if repetitions < 5:
        raise ValueError(f"need at least 5 repetitions, got {repetitions}")
    rows = []
    with threadpool_limits(limits=1):
        for count in counts:
            sizes = tuple(s for s in patch_sizes if s <= min(min(img.shape[:2]) for img in images))
            extractor = PatchExtractor(sizes, count, seed=seed)
            windows = [extractor.sample(*img.shape[:2]) for img in images]
            res = fc_resolutions(model, count)
            fc_count = sum(
                d.shape[0]
                for d in extract_fc_mode(
                    np.zeros((max(res), max(res), model.topology.in_channels)), model, res
                )
            )

            def patch_mode(windows=windows, extractor=extractor):
                for img, win in zip(images, windows):
                    extract_patch_mode(img, extractor, model, win)

            def fc_mode(res=res):
                for img in images:
                    extract_fc_mode(img, model, res)

            pt = _time(patch_mode, repetitions)
            ft = _time(fc_mode, repetitions)
            rows.append(
                TimingRow(
                    count,
                    fc_count,
                    statistics.median(pt),
                    float(np.std(pt)),
                    statistics.median(ft),
                    float(np.std(ft)),
                    repetitions,
                )
            )
    return rows


def write_timing_csv(rows: Sequence[TimingRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["count", "mode", "median_seconds", "std_seconds", "reps"])
        for r in rows:
            w.writerow([r.count, "patch", repr(r.patch_median), repr(r.patch_std), r.repetitions])
        for r in rows:
            w.writerow([r.fc_count, "fc", repr(r.fc_median), repr(r.fc_std), r.repetitions])
