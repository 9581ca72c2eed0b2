"""Patch-level Shapley attribution for volume classifiers.

Players are contiguous voxel blocks. A coalition keeps its patches from
the input volume and takes every other voxel from a baseline (zeros by
default, i.e. the windowed air value). Class-1 attributions explain ``p``,
class-0 attributions explain ``1 - p``.
"""

from __future__ import annotations

import base64
import io
import json
import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError, TooManyPatches
from .rng import Rng

MAX_EXACT_PATCHES = 12
DEFAULT_GRID = (8, 8, 4)


def _split(n: int, g: int) -> list[int]:
    base, rem = divmod(n, g)
    return [base] * (g - rem) + [base + 1] * rem


@dataclass(frozen=True)
class PatchPartition:
    shape: tuple[int, int, int]
    grid: tuple[int, int, int]
    labels: np.ndarray  # patch id per voxel

    @property
    def n_patches(self) -> int:
        return int(np.prod(self.grid))

    @property
    def masks(self) -> list[np.ndarray]:
        return [self.labels == i for i in range(self.n_patches)]

    def sizes(self, axis: int) -> list[int]:
        return _split(self.shape[axis], self.grid[axis])


def partition_volume(shape, grid=DEFAULT_GRID) -> PatchPartition:
    """Near-equal contiguous blocks; the larger blocks come last on each axis."""
    shape, grid = tuple(int(s) for s in shape), tuple(int(g) for g in grid)
    if len(shape) != 3 or len(grid) != 3:
        raise ConfigError(f"shape and grid need three extents, got {shape} and {grid}")
    if any(g < 1 or g > s for g, s in zip(grid, shape)):
        raise ConfigError(f"grid {grid} must lie between 1 and the volume extents {shape}")
    ids = [np.repeat(np.arange(g), _split(s, g)) for s, g in zip(shape, grid)]
    labels = (ids[0][:, None, None] * grid[1] + ids[1][None, :, None]) * grid[2] + ids[2][None, None, :]
    return PatchPartition(shape, grid, labels)


@dataclass
class AttributionMap:
    values: dict[int, np.ndarray]  # class -> phi per patch
    base_value: dict[int, float]
    target_value: dict[int, float]
    grid: tuple[int, int, int]
    method: str
    n_permutations: int = 0
    seed: int | None = None

    def to_json(self, **extra) -> str:
        doc = {
            "grid": list(self.grid),
            "method": self.method,
            "baseline": "zeros",
            "classes": {str(k): {"base_value": self.base_value[k], "target_value": self.target_value[k],
                                 "values": [float(v) for v in self.values[k]]} for k in sorted(self.values)},
            # class-1 summary in the flat layout
            "base_value": self.base_value[1],
            "target_value": self.target_value[1],
            "values": [float(v) for v in self.values[1]],
        }
        if self.method == "sampled":
            doc.update(n_permutations=self.n_permutations, seed=self.seed)
        doc.update(extra)
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def voxel_map(self, partition: PatchPartition, class_id: int = 1) -> np.ndarray:
        """Each voxel carries its patch's attribution divided by the patch size."""
        phi = self.values[class_id]
        counts = np.bincount(partition.labels.ravel(), minlength=partition.n_patches)
        return (phi / counts)[partition.labels]


class _Game:
    """Coalition values with memoization; coalitions are bitmasks over patches."""

    def __init__(self, model_fn, volume, partition: PatchPartition, baseline, batch: int = 16):
        self.fn, self.part, self.batch = model_fn, partition, batch
        self.x = np.asarray(volume, dtype=np.float64)
        if self.x.shape != partition.shape:
            raise ConfigError(f"volume shape {self.x.shape} does not match partition {partition.shape}")
        self.base = np.zeros_like(self.x) if baseline is None else np.broadcast_to(
            np.asarray(baseline, dtype=np.float64), self.x.shape)
        self.cache: dict[int, float] = {}

    def compose(self, coalition: int) -> np.ndarray:
        n = self.part.n_patches
        keep = np.array([(coalition >> i) & 1 for i in range(n)], dtype=bool)
        return np.where(keep[self.part.labels], self.x, self.base)

    def values(self, coalitions) -> np.ndarray:
        todo = [c for c in dict.fromkeys(coalitions) if c not in self.cache]
        for i in range(0, len(todo), self.batch):
            chunk = todo[i:i + self.batch]
            out = np.asarray(self.fn(np.stack([self.compose(c) for c in chunk])), dtype=np.float64)
            out = out.reshape(len(chunk))
            self.cache.update(zip(chunk, out.tolist()))
        return np.array([self.cache[c] for c in coalitions])


def _finish(phi, game, full, method, **kw) -> AttributionMap:
    base = float(game.values([0])[0])
    target = float(game.values([full])[0])
    return AttributionMap({1: phi, 0: -phi}, {1: base, 0: 1.0 - base}, {1: target, 0: 1.0 - target},
                          game.part.grid, method, **kw)


def exact_shapley(model_fn, volume, partition: PatchPartition, baseline=None) -> AttributionMap:
    """Shapley values by enumerating all 2^n coalitions.

    ``model_fn`` maps a batch ``(k, X, Y, Z)`` to ``k`` class-1 probabilities.
    """
    n = partition.n_patches
    if n > MAX_EXACT_PATCHES:
        raise TooManyPatches(f"{n} patches; exact enumeration is limited to {MAX_EXACT_PATCHES}")
    game = _Game(model_fn, volume, partition, baseline)
    full = (1 << n) - 1
    v = game.values(list(range(full + 1)))
    size = np.array([bin(c).count("1") for c in range(full + 1)])
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                       if s < n else 0.0 for s in range(n + 1)])
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        without = np.array([c for c in range(full + 1) if not c & bit])
        phi[i] = float(np.sum(weight[size[without]] * (v[without | bit] - v[without])))
    return _finish(phi, game, full, "exact")


def sampled_shapley(model_fn, volume, partition: PatchPartition, baseline=None,
                    n_permutations: int = 200, seed: int = 0) -> AttributionMap:
    """Average marginal contributions along random patch orderings."""
    if n_permutations < 1:
        raise ConfigError(f"n_permutations must be >= 1, got {n_permutations}")
    n = partition.n_patches
    game = _Game(model_fn, volume, partition, baseline)
    rng = Rng(seed, (0x5A,))
    total = np.zeros(n)
    for k in range(n_permutations):
        order = rng.child(k).permutation(n)
        chain = [0]
        for i in order:
            chain.append(chain[-1] | (1 << int(i)))
        v = game.values(chain)
        total[order] += np.diff(v)
    return _finish(total / n_permutations, game, (1 << n) - 1, "sampled",
                   n_permutations=n_permutations, seed=seed)


# ---------------------------------------------------------------- rendering

NEUTRAL = (255, 255, 255)


def diverging_rgb(values: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Red for positive, blue for negative, white at zero; scale symmetric about 0."""
    v = np.asarray(values, dtype=np.float64)
    if scale is None:
        scale = float(np.max(np.abs(v))) if v.size else 0.0
    a = np.zeros_like(v) if scale == 0 else np.clip(v / scale, -1.0, 1.0)
    fade = 255.0 * (1.0 - np.abs(a))
    r = np.where(a < 0, fade, 255.0)
    b = np.where(a > 0, fade, 255.0)
    return np.rint(np.stack([r, fade, b], axis=-1)).astype(np.uint8)


def _montage(volume, vmap, scale, cols, zoom):
    from PIL import Image

    X, Y, Z = volume.shape
    rows = math.ceil(Z / cols)
    gray = np.clip(volume, 0, 1)[..., None] * 255.0
    over = diverging_rgb(vmap, scale).astype(np.float64)
    alpha = 0.0 if scale == 0 else 0.65
    mix = np.rint((1 - alpha) * gray + alpha * over).astype(np.uint8)
    canvas = np.full((rows * X, cols * Y, 3), 255, dtype=np.uint8)
    for z in range(Z):
        r, c = divmod(z, cols)
        canvas[r * X:(r + 1) * X, c * Y:(c + 1) * Y] = mix[:, :, z]
    img = Image.fromarray(canvas, "RGB").resize((cols * Y * zoom, rows * X * zoom), Image.NEAREST)
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return buf.getvalue(), img.size


def render_attribution_overlay(volume, attributions: AttributionMap, partition: PatchPartition,
                               class_ids=(0, 1), cols: int = 4, zoom: int = 3):
    """Axial-slice montages, one panel per class, in an SVG with the probabilities in the caption.

    Returns ``(svg_text, {class: png_bytes})``.
    """
    volume = np.asarray(volume, dtype=np.float64)
    maps = {k: attributions.voxel_map(partition, k) for k in class_ids}
    scale = max(float(np.max(np.abs(m))) for m in maps.values())
    pngs, panels = {}, []
    x_off, height = 10, 0
    for k in class_ids:
        png, (w, h) = _montage(volume, maps[k], scale, cols, zoom)
        pngs[k] = png
        data = base64.b64encode(png).decode("ascii")
        panels.append(f'<text x="{x_off}" y="22">class {k}</text>')
        panels.append(f'<image x="{x_off}" y="30" width="{w}" height="{h}" '
                      f'href="data:image/png;base64,{data}"/>')
        x_off += w + 20
        height = max(height, h)
    probs = attributions.target_value
    caption = ", ".join(f"p(class {k}) = {probs[k]:.4f}" for k in class_ids)
    W, H = x_off - 10, height + 70
    svg = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
           f'font-family="sans-serif" font-size="13">',
           f'<rect width="{W}" height="{H}" fill="white"/>', *panels,
           f'<text class="caption" x="10" y="{height + 55}">{escape(caption)} '
           f'(red raises, blue lowers; scale {scale:.3g})</text>', "</svg>"]
    return "\n".join(svg) + "\n", pngs


def model_fn_for(model, seed: int = 0, chunk: int = 4):
    """Batch probability function over a :class:`~voxbayes.model.Model` for attribution."""
    from .train import predict_batch

    def fn(batch):
        return predict_batch(model, batch, seed=seed, chunk=chunk)

    return fn
