"""Prepared dataset files: ``NAME_x.npy``, ``NAME_y.npy`` and ``NAME.json``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError


def save_split(directory, name: str, x: np.ndarray, y: np.ndarray, ids, classes) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / f"{name}_x.npy", np.ascontiguousarray(x, dtype=np.float64), allow_pickle=False)
    np.save(d / f"{name}_y.npy", np.asarray(y, dtype=np.float64), allow_pickle=False)
    meta = {"name": name, "n": int(len(y)), "shape": list(np.shape(x)[1:]),
            "ids": [str(i) for i in ids], "source_classes": list(classes)}
    (d / f"{name}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_split(directory, name: str):
    """(x, y, meta) for one named split."""
    d = Path(directory)
    files = [d / f"{name}_x.npy", d / f"{name}_y.npy", d / f"{name}.json"]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise ConfigError(f"prepared split {name!r} not found: missing {', '.join(missing)}")
    x = np.load(files[0], allow_pickle=False)
    y = np.load(files[1], allow_pickle=False)
    meta = json.loads(files[2].read_text(encoding="utf-8"))
    if x.ndim != 4 or x.shape[0] != y.shape[0] or meta.get("n") != len(y):
        raise FormatError(f"split {name!r} in {d} is inconsistent: x {x.shape}, y {y.shape}")
    return x, y, meta
