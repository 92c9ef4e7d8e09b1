"""Binary checkpoint of a :class:`RegistrationModel` (little-endian).

Layout::

    b"CRCK"  u32 version  u32 d  u32 channels  f64 displacement_scale
    motion grid   image grid is identical
        u32 levels, features, table_size, n_min, n_max
        per level: u32 resolution, table_size*features f32
    motion mlp    image mlp is identical
        u8 activation (0 relu, 1 gelu)  u8 final_layer_zero_init
        u32 layer count, per layer u32 fan_in, u32 fan_out
        per layer: fan_in*fan_out f32 weights (row-major), fan_out f32 biases
    (image grid, image mlp)
    schedule: u32 epoch, u32 target_epoch, u8 enabled, u8 motion, u8 image

Parameters are stored as 32-bit floats; loading widens them back to float64.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .grid import HashGridConfig, resolution_at_level
from .mlp import MlpConfig, MlpParams
from .model import RegistrationModel, ScheduleState

MAGIC = b"CRCK"
VERSION = 1
_ACTIVATIONS = ("relu", "gelu")


class CheckpointError(ValueError):
    pass


def _grid_bytes(out, cfg: HashGridConfig, tables: np.ndarray) -> None:
    out.write(struct.pack("<5I", cfg.levels, cfg.features, cfg.table_size, cfg.n_min, cfg.n_max))
    for i in range(cfg.levels):
        out.write(struct.pack("<I", resolution_at_level(cfg, i)))
        out.write(tables[i].astype("<f4").tobytes(order="C"))


def _mlp_bytes(out, cfg: MlpConfig, params: MlpParams) -> None:
    out.write(struct.pack("<BB", _ACTIVATIONS.index(cfg.activation), int(cfg.final_layer_zero_init)))
    dims = cfg.layer_dims
    out.write(struct.pack("<I", len(dims)))
    for fan_in, fan_out in dims:
        out.write(struct.pack("<II", fan_in, fan_out))
    for w, b in zip(params.weights, params.biases):
        out.write(w.astype("<f4").tobytes(order="C"))
        out.write(b.astype("<f4").tobytes(order="C"))


def dumps(model: RegistrationModel) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IIId", VERSION, model.dim, model.channels, model.displacement_scale))
    _grid_bytes(out, model.motion_grid, model.motion_tables)
    _mlp_bytes(out, model.motion_mlp, model.motion_params)
    _grid_bytes(out, model.image_grid, model.image_tables)
    _mlp_bytes(out, model.image_mlp, model.image_params)
    s = model.schedule
    out.write(struct.pack("<IIBBB", s.epoch, s.target_epoch, int(s.enabled), int(s.motion), int(s.image)))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def floats(self, count: int, shape) -> np.ndarray:
        size = 4 * count
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.pos)
        self.pos += size
        return arr.astype(np.float64).reshape(shape)


def _read_grid(r: _Reader, dim: int):
    levels, features, table_size, n_min, n_max = r.unpack("<5I")
    cfg = HashGridConfig(dim, levels, features, table_size, n_min, n_max)
    tables = np.empty(cfg.params_shape())
    for i in range(levels):
        (res,) = r.unpack("<I")
        if res != resolution_at_level(cfg, i):
            raise CheckpointError(f"level {i} resolution {res} disagrees with the grid config")
        tables[i] = r.floats(table_size * features, (table_size, features))
    return cfg, tables


def _read_mlp(r: _Reader):
    act, zero = r.unpack("<BB")
    if act >= len(_ACTIVATIONS):
        raise CheckpointError(f"unknown activation code {act}")
    (n_layers,) = r.unpack("<I")
    dims = [r.unpack("<II") for _ in range(n_layers)]
    if n_layers < 2:
        raise CheckpointError("an mlp needs at least one hidden layer")
    cfg = MlpConfig(dims[0][0], tuple(d[1] for d in dims[:-1]), dims[-1][1], _ACTIVATIONS[act], bool(zero))
    weights, biases = [], []
    for fan_in, fan_out in dims:
        weights.append(r.floats(fan_in * fan_out, (fan_in, fan_out)))
        biases.append(r.floats(fan_out, (fan_out,)))
    return cfg, MlpParams(weights, biases)


def loads(data: bytes) -> RegistrationModel:
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    r = _Reader(data)
    r.pos = 4
    version, dim, channels, scale = r.unpack("<IIId")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    mg, mt = _read_grid(r, dim)
    mc, mp = _read_mlp(r)
    ig, it = _read_grid(r, dim)
    ic, ip = _read_mlp(r)
    epoch, target, enabled, motion, image = r.unpack("<IIBBB")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes in checkpoint")
    return RegistrationModel(
        mg, mt, mc, mp, ig, it, ic, ip, channels, scale,
        ScheduleState(epoch, target, bool(enabled), bool(motion), bool(image)),
    )


def save(path, model: RegistrationModel) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> RegistrationModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
