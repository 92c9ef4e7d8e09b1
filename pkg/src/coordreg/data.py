"""Fields, resampling, and file formats (images, volumes, displacement fields)."""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DISP_MAGIC = b"CRDF"
DISP_VERSION = 1


class DataFormatError(ValueError):
    """A file could not be parsed or its contents are inconsistent."""


@dataclass
class ScalarField:
    values: np.ndarray
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.spacing is None:
            self.spacing = (1.0,) * self.values.ndim
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.values.ndim:
            raise ValueError("spacing length must match the field dimension")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @property
    def extents(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dim(self) -> int:
        return self.values.ndim


@dataclass
class LabelField:
    values: np.ndarray
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype.kind == "f":
            if not np.all(v == np.round(v)):
                raise ValueError("label values must be integers")
        if v.size and v.min() < 0:
            raise ValueError("label values must be non-negative")
        self.values = v.astype(np.int64)
        if self.spacing is None:
            self.spacing = (1.0,) * self.values.ndim
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.values.ndim:
            raise ValueError("spacing length must match the field dimension")

    @property
    def extents(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dim(self) -> int:
        return self.values.ndim


@dataclass
class DisplacementField:
    """Per-voxel displacement in voxel units, array shape ``(*extents, d)``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim < 2 or self.values.shape[-1] != self.values.ndim - 1:
            raise ValueError(f"displacement array must be (*extents, d), got {self.values.shape}")

    @property
    def extents(self) -> tuple[int, ...]:
        return self.values.shape[:-1]

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


# --- resampling -----------------------------------------------------------

def sample_linear(values: np.ndarray, points: np.ndarray, background: float = 0.0) -> np.ndarray:
    """d-linear interpolation of ``values`` at voxel positions ``points (n, d)``.

    Positions outside ``[0, extent-1]`` on any axis return ``background``.
    """
    values = np.asarray(values)
    points = np.asarray(points, dtype=np.float64)
    dim = values.ndim
    ext = np.array(values.shape)
    inside = np.all((points >= 0.0) & (points <= ext - 1), axis=1)
    p = np.clip(points, 0.0, ext - 1)
    base = np.minimum(np.floor(p).astype(np.int64), np.maximum(ext - 2, 0))
    frac = p - base
    out = np.zeros(len(points))
    for corner in itertools.product((0, 1), repeat=dim):
        c = np.array(corner)
        idx = np.minimum(base + c, ext - 1)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        out += w * values[tuple(idx.T)]
    return np.where(inside, out, background)


def sample_nearest(values: np.ndarray, points: np.ndarray, background=0) -> np.ndarray:
    values = np.asarray(values)
    points = np.asarray(points, dtype=np.float64)
    idx = np.floor(points + 0.5).astype(np.int64)
    ext = np.array(values.shape)
    inside = np.all((idx >= 0) & (idx < ext), axis=1)
    idx = np.clip(idx, 0, ext - 1)
    out = values[tuple(idx.T)]
    return np.where(inside, out, background)


def warp_with_displacement(field, disp, interpolation: str = "linear"):
    """``output(x) = field(x + disp(x))`` with background 0 outside the field."""
    disp_values = disp.values if isinstance(disp, DisplacementField) else np.asarray(disp, dtype=np.float64)
    if disp_values.shape[:-1] != field.values.shape:
        raise ValueError(f"displacement extents {disp_values.shape[:-1]} != field extents {field.values.shape}")
    if interpolation not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if isinstance(field, LabelField) and interpolation == "linear":
        raise ValueError("label fields must be warped with nearest-neighbour interpolation")
    from .model import voxel_coords

    pts = voxel_coords(field.values.shape) + disp_values.reshape(-1, field.dim)
    if interpolation == "linear":
        out = sample_linear(field.values, pts)
    else:
        out = sample_nearest(field.values, pts)
    out = out.reshape(field.values.shape)
    return type(field)(out, field.spacing)


# --- intensity ------------------------------------------------------------

def normalize_intensity(field: ScalarField, low: float = 0.5, high: float = 99.5) -> ScalarField:
    """Clip to the [low, high] percentiles, then rescale to [0, 1].

    A constant field maps to 0.5 everywhere.
    """
    v = field.values
    lo, hi = np.percentile(v, [low, high])
    if hi <= lo:
        return ScalarField(np.full(v.shape, 0.5), field.spacing)
    out = (np.clip(v, lo, hi) - lo) / (hi - lo)
    return ScalarField(out, field.spacing)


# --- 2-D images -----------------------------------------------------------

_LUMA = (0.299, 0.587, 0.114)


def load_image_2d(path, channel: str = "gray") -> ScalarField:
    """Read a PNG/PGM (8 or 16 bit) and return one channel scaled to [0, 1].

    ``channel`` is one of gray, r, g, b, luma. Gray on a colour image means luma.
    """
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read image {path}: {exc}") from exc
    mode = img.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
        bands = None
    elif mode in ("L", "P", "1"):
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        bands = None
    elif mode in ("RGB", "RGBA", "LA"):
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        arr = None
        bands = rgb
    else:
        raise DataFormatError(f"unsupported image mode {mode!r} in {path}")

    if channel not in ("gray", "r", "g", "b", "luma"):
        raise ValueError(f"unknown channel selector {channel!r}")
    if bands is None:
        if channel not in ("gray", "luma"):
            raise DataFormatError(f"{path} is single-channel; cannot select {channel!r}")
        return ScalarField(arr)
    if channel in ("gray", "luma"):
        return ScalarField(bands @ np.array(_LUMA))
    return ScalarField(bands[..., "rgb".index(channel)])


def save_image_2d(path, field, bits: int = 16) -> None:
    """Write values in [0, 1] as a grayscale PNG/PGM (quantized to ``bits``)."""
    v = field.values if hasattr(field, "values") else np.asarray(field)
    if v.ndim != 2:
        raise ValueError("save_image_2d expects a 2-D field")
    v = np.clip(v, 0.0, 1.0)
    if bits == 16:
        img = Image.fromarray(np.round(v * 65535.0).astype(np.uint16))
    elif bits == 8:
        img = Image.fromarray(np.round(v * 255.0).astype(np.uint8))
    else:
        raise ValueError("bits must be 8 or 16")
    img.save(Path(path))


def save_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8), mode="RGB").save(Path(path))


# --- volumes --------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64,
    256: np.int8, 512: np.uint16, 768: np.uint32,
}


def _sidecar_for(path: Path) -> Path:
    if path.suffix == ".json":
        return path
    return path.with_name(path.name + ".json")


def save_volume(path, field, dtype=None) -> None:
    """Raw little-endian C-order array plus ``<path>.json`` sidecar."""
    path = Path(path)
    kind = "label" if isinstance(field, LabelField) else "scalar"
    if dtype is None:
        dtype = "int32" if kind == "label" else "float64"
    arr = np.asarray(field.values).astype(np.dtype(dtype).newbyteorder("<"))
    path.write_bytes(arr.tobytes(order="C"))
    meta = {
        "extents": list(field.values.shape),
        "spacing": list(field.spacing),
        "dtype": np.dtype(dtype).name,
        "kind": kind,
    }
    _sidecar_for(path).write_text(json.dumps(meta, indent=2))


def load_volume(path, kind: str | None = None):
    """Load a raw+sidecar volume or an uncompressed single-file NIfTI-1.

    For NIfTI, integer data becomes a :class:`LabelField` unless ``kind`` says
    otherwise. Orientation is ignored: axis 0 is the file's first dimension.
    """
    path = Path(path)
    if path.name.endswith(".nii"):
        return _load_nifti(path, kind)
    if path.suffix == ".json":
        sidecar = path
        raw = path.with_name(path.name[: -len(".json")])
    else:
        raw, sidecar = path, _sidecar_for(path)
    try:
        meta = json.loads(sidecar.read_text())
        payload = raw.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read volume {raw}: {exc}") from exc
    try:
        extents = tuple(int(e) for e in meta["extents"])
        dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed sidecar {sidecar}: {exc}") from exc
    spacing = tuple(meta.get("spacing", [1.0] * len(extents)))
    expected = int(np.prod(extents)) * dtype.itemsize
    if expected != len(payload):
        raise DataFormatError(
            f"sidecar {sidecar} implies {expected} bytes but payload {raw} has {len(payload)} bytes"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(extents)
    kind = kind or meta.get("kind", "scalar")
    if kind == "label":
        return LabelField(arr.astype(np.int64), spacing)
    return ScalarField(arr.astype(np.float64), spacing)


def _load_nifti(path: Path, kind: str | None):
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if len(data) < 352:
        raise DataFormatError(f"{path}: too short for a NIfTI-1 header")
    endian = "<"
    if struct.unpack("<i", data[:4])[0] != 348:
        if struct.unpack(">i", data[:4])[0] != 348:
            raise DataFormatError(f"{path}: bad sizeof_hdr")
        endian = ">"
    if data[344:347] != b"n+1":
        raise DataFormatError(f"{path}: not a single-file NIfTI-1 (magic {data[344:348]!r})")
    dims = struct.unpack(endian + "8h", data[40:56])
    ndim = dims[0]
    if not 2 <= ndim <= 3:
        raise DataFormatError(f"{path}: only 2-D/3-D volumes are supported, got {ndim}")
    extents = tuple(int(d) for d in dims[1:1 + ndim])
    datatype = struct.unpack(endian + "h", data[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise DataFormatError(f"{path}: unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack(endian + "8f", data[76:108])
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:1 + ndim])
    vox_offset = int(struct.unpack(endian + "f", data[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", data[112:120])
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    n = int(np.prod(extents))
    payload = data[vox_offset:]
    if len(payload) < n * dtype.itemsize:
        raise DataFormatError(
            f"{path}: header implies {n * dtype.itemsize} bytes but payload has {len(payload)} bytes"
        )
    arr = np.frombuffer(payload[: n * dtype.itemsize], dtype=dtype).reshape(extents, order="F")
    is_int = dtype.kind in "iu"
    if kind is None:
        kind = "label" if is_int else "scalar"
    if kind == "label":
        return LabelField(np.ascontiguousarray(arr).astype(np.int64), spacing)
    arr = arr.astype(np.float64)
    if slope not in (0.0,) and np.isfinite(slope):
        arr = arr * slope + inter
    return ScalarField(np.ascontiguousarray(arr), spacing)


def load_field(path, kind: str | None = None, channel: str = "gray"):
    """Dispatch on extension: images for .png/.pgm, volumes otherwise."""
    path = Path(path)
    if path.suffix.lower() in (".png", ".pgm", ".ppm"):
        if kind == "label":
            try:
                with Image.open(path) as im:
                    raw = np.asarray(im)
            except OSError as exc:
                raise DataFormatError(f"cannot read image {path}: {exc}") from exc
            if raw.ndim != 2:
                raise DataFormatError(f"{path}: label images must be single-channel")
            return LabelField(raw.astype(np.int64))
        return load_image_2d(path, channel)
    return load_volume(path, kind)


# --- displacement fields --------------------------------------------------

def displacement_header_size(dim: int) -> int:
    return len(DISP_MAGIC) + 4 + 4 + 4 * dim


def save_displacement_field(path, field) -> None:
    """Binary layout: magic, u32 version, u32 d, d x u32 extents, f32 components."""
    disp = field if isinstance(field, DisplacementField) else DisplacementField(field)
    header = DISP_MAGIC + struct.pack("<II", DISP_VERSION, disp.dim) + struct.pack(f"<{disp.dim}I", *disp.extents)
    body = disp.values.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + body)


def load_displacement_field(path) -> DisplacementField:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read displacement field {path}: {exc}") from exc
    if data[:4] != DISP_MAGIC:
        raise DataFormatError(f"{path}: bad magic {data[:4]!r}")
    version, dim = struct.unpack("<II", data[4:12])
    if version != DISP_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if dim not in (2, 3):
        raise DataFormatError(f"{path}: bad dimension {dim}")
    extents = struct.unpack(f"<{dim}I", data[12:12 + 4 * dim])
    body = data[displacement_header_size(dim):]
    expected = 4 * dim * int(np.prod(extents))
    if len(body) != expected:
        raise DataFormatError(f"{path}: header implies {expected} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").reshape(*extents, dim)
    return DisplacementField(arr.astype(np.float64))
