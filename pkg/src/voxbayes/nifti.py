"""NIfTI-1 reading and writing, HU windowing, augmentation and dataset splits.

Only single-file ``.nii`` volumes with int16 or float32 voxels are
accepted. Parsed volumes are rotated 90 degrees counter-clockwise in the
axial (X, Y) plane so scans share one orientation; :func:`serialize`
undoes the rotation, which makes parse/serialize a byte-exact round trip.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (ConfigError, FormatError, TruncatedFile, UnsupportedDatatype,
                     UnsupportedRank)

HEADER_SIZE = 348
MIN_FILE_SIZE = 352

DATATYPES = {4: np.dtype("i2"), 16: np.dtype("f4")}

# (name, struct code) in on-disk order; 348 bytes in total
_FIELDS = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "c"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "c"), ("xyzt_units", "c"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"), ("qoffset_x", "f"),
    ("qoffset_y", "f"), ("qoffset_z", "f"), ("srow_x", "4f"), ("srow_y", "4f"),
    ("srow_z", "4f"), ("intent_name", "16s"), ("magic", "4s"),
]
_LAYOUT = "".join(code for _, code in _FIELDS)
assert struct.calcsize("<" + _LAYOUT) == HEADER_SIZE


@dataclass
class NiftiHeader:
    """Decoded header fields. ``raw`` keeps the full header and any extension bytes."""

    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    scl_slope: float
    scl_inter: float
    vox_offset: float
    magic: bytes
    endianness: str  # "<" or ">"
    pixdim: tuple[float, ...] = (0.0,) * 8
    raw: bytes = b""

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.dim[1:4])

    @property
    def slope(self) -> float:
        return 1.0 if self.scl_slope == 0 or not math.isfinite(self.scl_slope) else self.scl_slope

    @property
    def inter(self) -> float:
        return self.scl_inter if math.isfinite(self.scl_inter) else 0.0


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source: str = ""
    transforms: list[str] = field(default_factory=list)

    @property
    def shape(self):
        return self.voxels.shape

    def derive(self, voxels: np.ndarray, step: str) -> "Volume":
        return replace(self, voxels=voxels, transforms=self.transforms + [step])


@dataclass(frozen=True)
class HuWindow:
    id: str
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ConfigError(f"window {self.id}: lower {self.lower} must be below upper {self.upper}")


WINDOWS = {
    "W1": HuWindow("W1", -1000.0, 400.0),
    "W2": HuWindow("W2", -1100.0, 500.0),
    "W3": HuWindow("W3", -950.0, 550.0),
    "W4": HuWindow("W4", -1000.0, 0.0),
}

SOURCE_CLASSES = ("CT-0", "CT-1", "CT-2", "CT-3", "CT-4")
_LABELS = {"CT-0": 0, "CT-1": 1, "CT-2": 1, "CT-3": 1, "CT-4": 1}
DEVELOPMENT_CLASSES = ("CT-0", "CT-2", "CT-3")


def label_for(source_class: str) -> int:
    try:
        return _LABELS[source_class]
    except KeyError:
        raise ConfigError(f"unknown source class {source_class!r}") from None


@dataclass
class LabeledSample:
    volume: Volume
    label: int
    source_class: str

    @classmethod
    def from_class(cls, volume: Volume, source_class: str) -> "LabeledSample":
        return cls(volume, label_for(source_class), source_class)


# ---------------------------------------------------------------- header codec


def _detect_endianness(raw: bytes) -> str:
    for end in ("<", ">"):
        (d0,) = struct.unpack_from(end + "h", raw, 40)
        if 1 <= d0 <= 7:
            return end
    raise FormatError("cannot determine byte order: dim[0] outside [1, 7] either way")


def _unpack_header(raw: bytes, end: str) -> dict:
    values = struct.unpack(end + _LAYOUT, raw[:HEADER_SIZE])
    out, i = {}, 0
    for name, code in _FIELDS:
        n = int(code[:-1]) if code[:-1].isdigit() and code[-1] != "s" else 1
        out[name] = values[i] if n == 1 else tuple(values[i:i + n])
        i += n
    return out


def _pack_header(fields: dict, end: str) -> bytes:
    flat = []
    for name, code in _FIELDS:
        v = fields[name]
        flat.extend(v if isinstance(v, tuple) else [v])
    return struct.pack(end + _LAYOUT, *flat)


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < MIN_FILE_SIZE:
        raise TruncatedFile(f"file has {len(raw)} bytes, a NIfTI-1 file needs at least {MIN_FILE_SIZE}")
    end = _detect_endianness(raw)
    f = _unpack_header(raw, end)
    if f["sizeof_hdr"] != HEADER_SIZE:
        raise FormatError(f"sizeof_hdr is {f['sizeof_hdr']}, expected {HEADER_SIZE}")
    if f["magic"] == b"ni1\x00":
        raise FormatError("header-only NIfTI pairs (.hdr/.img) are not supported")
    if f["magic"] != b"n+1\x00":
        raise FormatError(f"bad magic {f['magic']!r}")
    offset = int(f["vox_offset"])
    if offset < HEADER_SIZE or offset > len(raw):
        raise TruncatedFile(f"vox_offset {f['vox_offset']} lies outside the file")
    return NiftiHeader(f["sizeof_hdr"], f["dim"], f["datatype"], f["bitpix"], f["scl_slope"],
                       f["scl_inter"], f["vox_offset"], f["magic"], end, f["pixdim"],
                       raw[:offset])


def parse_nifti(data: bytes, source: str = "") -> tuple[NiftiHeader, Volume]:
    """Decode a single-file NIfTI-1 volume into HU values.

    Scaling (``scl_slope``/``scl_inter``, slope 0 meaning 1) is applied and
    the result is rotated 90 degrees counter-clockwise in the (X, Y) plane,
    so the returned array has shape ``(dim[2], dim[1], dim[3])``.
    """
    hdr = parse_header(data)
    if hdr.dim[0] != 3:
        raise UnsupportedRank(f"only 3D volumes are supported, dim[0] = {hdr.dim[0]}")
    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype} is not int16 (4) or float32 (16)")
    shape = hdr.shape
    if min(shape) < 1:
        raise FormatError(f"non-positive extent in dim {hdr.dim}")
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.endianness)
    n = int(np.prod(shape))
    start = int(hdr.vox_offset)
    if len(data) < start + n * dtype.itemsize:
        raise TruncatedFile(f"data section holds {len(data) - start} bytes, "
                            f"expected {n * dtype.itemsize}")
    raw = np.frombuffer(data, dtype, n, start).reshape(shape, order="F")
    hu = raw.astype(np.float64) * hdr.slope + hdr.inter
    voxels = np.ascontiguousarray(np.rot90(hu, k=1, axes=(0, 1)))
    spacing = tuple(float(s) for s in hdr.pixdim[1:4])
    return hdr, Volume(voxels, spacing, source, ["rot90_ccw"])


def serialize(header: NiftiHeader, volume: Volume) -> bytes:
    """Inverse of :func:`parse_nifti` for volumes still in HU."""
    hu = np.rot90(np.asarray(volume.voxels, dtype=np.float64), k=-1, axes=(0, 1))
    if hu.shape != header.shape:
        raise FormatError(f"volume shape {hu.shape} does not match header {header.shape}")
    stored = (hu - header.inter) / header.slope
    dtype = DATATYPES[header.datatype].newbyteorder(header.endianness)
    if dtype.kind == "i":
        stored = np.rint(stored)
    body = stored.astype(dtype).tobytes(order="F")
    return header.raw + body


def _zero(code: str):
    if code.endswith("s"):
        return b""
    if code == "c":
        return b"\x00"
    return tuple([0] * int(code[:-1])) if len(code) > 1 else 0


def build_header(shape, datatype: int = 4, endianness: str = "<", scl_slope: float = 1.0,
                 scl_inter: float = 0.0, spacing=(1.0, 1.0, 1.0)) -> NiftiHeader:
    """Minimal valid single-file header for a 3D volume."""
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype}")
    fields = {name: _zero(code) for name, code in _FIELDS}
    fields.update(sizeof_hdr=HEADER_SIZE, regular=b"r", dim=(3, *shape, 1, 1, 1, 1),
                  datatype=datatype, bitpix=DATATYPES[datatype].itemsize * 8,
                  pixdim=(1.0, *[float(s) for s in spacing], 0.0, 0.0, 0.0, 0.0),
                  vox_offset=352.0, scl_slope=float(scl_slope), scl_inter=float(scl_inter),
                  magic=b"n+1\x00")
    raw = _pack_header(fields, endianness) + b"\x00" * 4
    return parse_header(raw + b"\x00" * (DATATYPES[datatype].itemsize * int(np.prod(shape))))


def write_nifti(path, volume: Volume, header: NiftiHeader | None = None, **kw) -> Path:
    """Write HU voxels in the parser's orientation; a fresh header when none given."""
    if header is None:
        unrot = np.rot90(volume.voxels, k=-1, axes=(0, 1))
        header = build_header(unrot.shape, spacing=volume.spacing, **kw)
    path = Path(path)
    path.write_bytes(serialize(header, volume))
    return path


def load_nifti(path) -> Volume:
    path = Path(path)
    return parse_nifti(path.read_bytes(), str(path))[1]


# ---------------------------------------------------------------- preprocessing


def apply_hu_window(volume: Volume, window: HuWindow) -> Volume:
    """Clip to the window, then map it affinely onto [0, 1]."""
    v = np.clip(volume.voxels, window.lower, window.upper)
    out = (v - window.lower) / (window.upper - window.lower)
    return volume.derive(out, f"window:{window.id}")


@dataclass(frozen=True)
class AugmentPolicy:
    rotate: bool = True
    max_angle: float = 20.0
    flip: bool = True
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.max_angle < 0:
            raise ConfigError(f"max angle must be >= 0, got {self.max_angle}")


IDENTITY_POLICY = AugmentPolicy(rotate=False, flip=False, noise_sigma=0.0)


def rotate_z(voxels: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate every axial slice about the volume centre; linear interpolation, zero fill."""
    if degrees == 0:
        return np.array(voxels, dtype=np.float64)
    return ndimage.rotate(voxels, degrees, axes=(0, 1), reshape=False, order=1,
                          mode="constant", cval=0.0)


def augment(volume: Volume, rng, policy: AugmentPolicy = AugmentPolicy()) -> Volume:
    """Random rotation about Z, independent axis flips and Gaussian noise, clipped to [0, 1].

    Draws come from fixed children of ``rng`` so switching one step off
    leaves the others unchanged.
    """
    v = np.asarray(volume.voxels, dtype=np.float64)
    steps = []
    if policy.rotate and policy.max_angle > 0:
        angle = float(rng.child(0).uniform(-policy.max_angle, policy.max_angle))
        v = rotate_z(v, angle)
        steps.append(f"rotate:{angle:.6f}")
    if policy.flip:
        flips = rng.child(1).bernoulli(0.5, 3)
        for axis in range(3):
            if flips[axis]:
                v = np.flip(v, axis)
                steps.append(f"flip:{axis}")
    if policy.noise_sigma > 0:
        v = v + policy.noise_sigma * rng.child(2).normal(v.shape)
        steps.append(f"noise:{policy.noise_sigma}")
    v = np.clip(np.ascontiguousarray(v), 0.0, 1.0)
    return replace(volume, voxels=v, transforms=volume.transforms + ["augment"] + steps)


# ---------------------------------------------------------------- splits and manifests


def split_sizes(n: int, ratios=(0.7, 0.2, 0.1)) -> tuple[int, int, int]:
    if n == 0:
        raise ConfigError("cannot split an empty dataset")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if n < 3:
        raise ConfigError(f"need at least 3 samples to split, got {n}")
    sizes = [math.floor(n * r + 1e-9) for r in ratios]
    sizes[0] += n - sum(sizes)
    # every split must be usable: borrow from the largest one
    for i in (1, 2):
        if sizes[i] == 0:
            sizes[i] = 1
            sizes[int(np.argmax(sizes))] -= 1
    return tuple(sizes)


def split_dataset(samples, ratios=(0.7, 0.2, 0.1), rng=None):
    """Shuffle and partition into (train, test, validation)."""
    samples = list(samples)
    n_train, n_test, _ = split_sizes(len(samples), ratios)
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    picked = [samples[i] for i in order]
    return picked[:n_train], picked[n_train:n_train + n_test], picked[n_train + n_test:]


def read_manifest(path) -> list[tuple[Path, str]]:
    """Rows of a ``path,source_class`` CSV; relative paths resolve against its folder."""
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "source_class"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: manifest needs a header row with path,source_class")
        for line, row in enumerate(reader, start=2):
            cls = row["source_class"].strip()
            if cls not in SOURCE_CLASSES:
                raise FormatError(f"{path}:{line}: unknown source class {cls!r}")
            p = Path(row["path"].strip())
            rows.append((p if p.is_absolute() else path.parent / p, cls))
    return rows


def write_manifest(path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "source_class"])
    for p, cls in rows:
        w.writerow([str(p), cls])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
