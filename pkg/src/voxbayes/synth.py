"""Synthetic lesion-detection volumes.

Negatives are lung-like noise. Positives add one Gaussian-intensity
ellipsoid with a random centre, radii and contrast. Values are HU rounded
to int16 so an in-memory dataset matches what ``synth`` writes to disk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nifti import WINDOWS, HuWindow, Volume, apply_hu_window
from .rng import Rng

BACKGROUND_HU = -800.0
NOISE_HU = 60.0


@dataclass(frozen=True)
class BlobParams:
    amplitude: tuple[float, float] = (300.0, 600.0)
    radius_frac: tuple[float, float] = (0.12, 0.25)
    background: float = BACKGROUND_HU
    noise: float = NOISE_HU


def blob_volume(shape, label: int, rng: Rng, params: BlobParams = BlobParams()) -> np.ndarray:
    shape = tuple(int(n) for n in shape)
    vol = params.background + params.noise * rng.child(0).normal(shape)
    if label:
        r = rng.child(1)
        ext = np.array(shape, dtype=np.float64)
        radii = ext * r.uniform(*params.radius_frac, 3)
        centre = r.uniform(radii, ext - 1 - radii)
        amp = float(r.uniform(*params.amplitude))
        grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
        d2 = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, centre, radii))
        vol = vol + amp * np.exp(-0.5 * d2 * 4.0)
    return np.clip(np.rint(vol), -32768, 32767).astype(np.int16)


def blob_labels(n: int, seed: int) -> np.ndarray:
    """Balanced labels (extra sample negative when n is odd) in shuffled order."""
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    return labels[Rng(seed, (1,)).permutation(n)]


def source_class_for(label: int, index: int) -> str:
    if not label:
        return "CT-0"
    return "CT-2" if index % 2 == 0 else "CT-3"


def blob_dataset_hu(n: int, shape=(32, 32, 16), seed: int = 7,
                    params: BlobParams = BlobParams()):
    """(volumes int16 (n, X, Y, Z), labels, source classes)."""
    labels = blob_labels(n, seed)
    base = Rng(seed, (2,))
    vols = np.stack([blob_volume(shape, int(y), base.child(i), params) for i, y in enumerate(labels)])
    classes = [source_class_for(int(y), i) for i, y in enumerate(labels)]
    return vols, labels, classes


def blob_dataset(n: int, shape=(32, 32, 16), seed: int = 7,
                 window: HuWindow = WINDOWS["W4"], params: BlobParams = BlobParams()):
    """Windowed float volumes in [0, 1] and their labels."""
    vols, labels, _ = blob_dataset_hu(n, shape, seed, params)
    x = np.stack([apply_hu_window(Volume(v.astype(np.float64)), window).voxels for v in vols])
    return x, labels.astype(np.float64)
