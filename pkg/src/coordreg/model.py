"""Paired motion/image coordinate networks and their joint L2 objective.

The image network ``f_im`` stores the fixed image; the motion network
``f_mo`` predicts a displacement ``u(x)`` such that the transformed image is
``f_im(x + u(x))``. Displacements are in normalized units (the unit box), and
map transformed-frame coordinates into the fixed frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import grid, mlp
from .grid import HashGridConfig
from .mlp import MlpConfig, MlpParams


class NumericalAbort(RuntimeError):
    """Raised when the loss becomes non-finite."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class CoarseToFineSchedule:
    target_epoch: int
    levels: int
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and self.target_epoch < 1:
            raise ValueError("target_epoch must be >= 1 when the schedule is enabled")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


def level_weights(epoch: float, schedule: CoarseToFineSchedule) -> np.ndarray:
    """``w_i = clip(N * min(1, e / e_g) - i, 0, 1)``; all ones when disabled."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    n = schedule.levels
    if not schedule.enabled:
        return np.ones(n)
    alpha = min(1.0, epoch / schedule.target_epoch)
    return np.clip(n * alpha - np.arange(n), 0.0, 1.0)


@dataclass
class ScheduleState:
    """Where the coarse-to-fine schedule stands; stored in checkpoints."""

    epoch: int = 0
    target_epoch: int = 1
    enabled: bool = False
    motion: bool = True
    image: bool = True

    def weights(self, model: "RegistrationModel", epoch: float | None = None):
        e = self.epoch if epoch is None else epoch
        on = self.enabled

        def for_grid(cfg: HashGridConfig, use: bool):
            return level_weights(e, CoarseToFineSchedule(max(self.target_epoch, 1), cfg.levels, on and use))

        return for_grid(model.motion_grid, self.motion), for_grid(model.image_grid, self.image)


@dataclass
class RegistrationModel:
    motion_grid: HashGridConfig
    motion_tables: np.ndarray
    motion_mlp: MlpConfig
    motion_params: MlpParams
    image_grid: HashGridConfig
    image_tables: np.ndarray
    image_mlp: MlpConfig
    image_params: MlpParams
    channels: int = 1
    displacement_scale: float = 1.0
    schedule: ScheduleState | None = None

    def __post_init__(self):
        d = self.motion_grid.dim
        if self.image_grid.dim != d:
            raise ValueError("motion and image grids differ in dimension")
        if self.channels not in (1, 2):
            raise ValueError("channels must be 1 or 2")
        if self.motion_mlp.output_dim != d:
            raise ValueError("motion network must output one value per axis")
        if self.image_mlp.output_dim != self.channels:
            raise ValueError("image network output_dim must equal channels")
        if self.motion_mlp.input_dim != self.motion_grid.output_dim:
            raise ValueError("motion network input_dim must match its grid encoding")
        if self.image_mlp.input_dim != self.image_grid.output_dim:
            raise ValueError("image network input_dim must match its grid encoding")
        if self.motion_tables.shape != self.motion_grid.params_shape():
            raise ValueError("motion table shape does not match its grid config")
        if self.image_tables.shape != self.image_grid.params_shape():
            raise ValueError("image table shape does not match its grid config")
        if self.schedule is None:
            self.schedule = ScheduleState()

    @property
    def dim(self) -> int:
        return self.motion_grid.dim

    def param_blocks(self) -> list[np.ndarray]:
        """Motion arrays first, then image arrays; order matches :class:`ModelGrads`."""
        return [self.motion_tables, *self.motion_params.arrays(), self.image_tables, *self.image_params.arrays()]

    def motion_arrays(self) -> list[np.ndarray]:
        return [self.motion_tables, *self.motion_params.arrays()]

    def image_arrays(self) -> list[np.ndarray]:
        return [self.image_tables, *self.image_params.arrays()]

    def copy(self) -> "RegistrationModel":
        return replace(
            self,
            motion_tables=self.motion_tables.copy(),
            motion_params=self.motion_params.copy(),
            image_tables=self.image_tables.copy(),
            image_params=self.image_params.copy(),
            schedule=replace(self.schedule),
        )


def build_model(
    dim: int,
    channels: int,
    motion_grid: HashGridConfig,
    image_grid: HashGridConfig,
    hidden_widths=(64, 64),
    activation: str = "relu",
    displacement_scale: float = 1.0,
    seed=0,
) -> RegistrationModel:
    """Randomly initialize both networks. The motion output layer starts at zero
    so the initial warp is exactly the identity."""
    if motion_grid.dim != dim or image_grid.dim != dim:
        raise ValueError("grid dimension mismatch")
    seeds = np.random.SeedSequence(seed).spawn(4)
    mo_cfg = MlpConfig(motion_grid.output_dim, tuple(hidden_widths), dim, activation, final_layer_zero_init=True)
    im_cfg = MlpConfig(image_grid.output_dim, tuple(hidden_widths), channels, activation)
    return RegistrationModel(
        motion_grid=motion_grid,
        motion_tables=grid.init_tables(motion_grid, np.random.default_rng(seeds[0])),
        motion_mlp=mo_cfg,
        motion_params=mlp.init_mlp(mo_cfg, np.random.default_rng(seeds[1])),
        image_grid=image_grid,
        image_tables=grid.init_tables(image_grid, np.random.default_rng(seeds[2])),
        image_mlp=im_cfg,
        image_params=mlp.init_mlp(im_cfg, np.random.default_rng(seeds[3])),
        channels=channels,
        displacement_scale=displacement_scale,
    )


def _resolve_weights(model, weights):
    if weights is None:
        return model.schedule.weights(model)
    return weights


def displacement(model: RegistrationModel, coords, weights=None) -> np.ndarray:
    """Displacement ``(B, d)`` in normalized units at coords in ``[0, 1]^d``."""
    mw, _ = _resolve_weights(model, weights)
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    h = grid.encode(coords, model.motion_tables, model.motion_grid, mw)
    return model.displacement_scale * mlp.forward(model.motion_mlp, model.motion_params, h)


def _image(model, coords, iw):
    h = grid.encode(coords, model.image_tables, model.image_grid, iw)
    return mlp.forward(model.image_mlp, model.image_params, h)


def predict_fixed(model: RegistrationModel, coords, weights=None) -> np.ndarray:
    """Image network at the unwarped coordinate, channel 0."""
    _, iw = _resolve_weights(model, weights)
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    return _image(model, coords, iw)[:, 0]


def predict_transformed(model: RegistrationModel, coords, weights=None) -> np.ndarray:
    """Image network at ``x + u(x)``, on the last channel (1 for multi-modal)."""
    w = _resolve_weights(model, weights)
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    warped = coords + displacement(model, coords, w)
    return _image(model, warped, w[1])[:, model.channels - 1]


@dataclass
class ModelGrads:
    motion_tables: np.ndarray
    motion_params: MlpParams
    image_tables: np.ndarray
    image_params: MlpParams

    def motion_arrays(self):
        return [self.motion_tables, *self.motion_params.arrays()]

    def image_arrays(self):
        return [self.image_tables, *self.image_params.arrays()]

    def arrays(self):
        return self.motion_arrays() + self.image_arrays()


@dataclass
class LossTerms:
    total: float
    fixed: float
    transformed: float


@dataclass
class FixedLookups:
    """Grid lookups at the unwarped coordinates; constant while a batch repeats."""

    motion: grid.Lookup
    image: grid.Lookup

    @classmethod
    def build(cls, model: RegistrationModel, coords) -> "FixedLookups":
        return cls(
            grid.lookup(coords, model.motion_grid, with_derivative=False),
            grid.lookup(coords, model.image_grid, with_derivative=False),
        )


def loss_and_grads(
    model: RegistrationModel,
    coords: np.ndarray,
    ref: np.ndarray,
    trans: np.ndarray,
    weights=None,
    term_weights=(1.0, 1.0),
    lookups: FixedLookups | None = None,
) -> tuple[LossTerms, ModelGrads]:
    """Joint objective ``mean |f_im(x) - I_ref|^2 + |f_im(x + u(x)) - I_trans|^2``.

    ``ref`` and ``trans`` are the target intensities at ``coords``. The second
    term reaches the motion network only through the coordinate derivative of
    the image encoding.
    """
    mw, iw = _resolve_weights(model, weights)
    coords = np.asarray(coords, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64).ravel()
    trans = np.asarray(trans, dtype=np.float64).ravel()
    n = coords.shape[0]
    if ref.shape[0] != n or trans.shape[0] != n:
        raise ValueError("target count does not match coordinate count")
    if lookups is None:
        lookups = FixedLookups.build(model, coords)
    c_last = model.channels - 1
    s = model.displacement_scale
    a_fix, a_tr = term_weights
    if a_tr == 0:
        return _fixed_term_only(model, lookups.image, ref, iw, a_fix)

    h_mo = grid.encode_lookup(lookups.motion, model.motion_tables, model.motion_grid, mw)
    mo_out, mo_cache = mlp.forward(model.motion_mlp, model.motion_params, h_mo, keep_cache=True)
    warped = coords + s * mo_out

    # both image-network queries share one batched pass: rows [:n] unwarped, [n:] warped
    h_x = grid.encode_lookup(lookups.image, model.image_tables, model.image_grid, iw)
    lk_y = grid.lookup(warped, model.image_grid)
    h_y = grid.encode_lookup(lk_y, model.image_tables, model.image_grid, iw)
    out, cache = mlp.forward(model.image_mlp, model.image_params, np.concatenate([h_x, h_y]), keep_cache=True)
    out_x, out_y = out[:n], out[n:]

    r_fix = out_x[:, 0] - ref
    r_tr = out_y[:, c_last] - trans
    loss_fix = float(np.mean(r_fix * r_fix))
    loss_tr = float(np.mean(r_tr * r_tr))
    total = a_fix * loss_fix + a_tr * loss_tr
    if not np.isfinite(total):
        raise NumericalAbort(f"non-finite loss {total}")

    g_out = np.zeros_like(out)
    g_out[:n, 0] = (2.0 * a_fix / n) * r_fix
    g_out[n:, c_last] = (2.0 * a_tr / n) * r_tr
    image_params_grad, g_h = mlp.backward(model.image_mlp, model.image_params, cache, g_out)
    g_hx, g_hy = g_h[:n], g_h[n:]
    gt_x, _ = grid.backward_lookup(lookups.image, g_hx, model.image_tables, model.image_grid, iw, need_coord_grad=False)
    gt_y, g_warped = grid.backward_lookup(lk_y, g_hy, model.image_tables, model.image_grid, iw)

    g_mo_out = s * g_warped
    motion_params_grad, g_hmo = mlp.backward(model.motion_mlp, model.motion_params, mo_cache, g_mo_out)
    gt_mo, _ = grid.backward_lookup(lookups.motion, g_hmo, model.motion_tables, model.motion_grid, mw, need_coord_grad=False)

    grads = ModelGrads(gt_mo, motion_params_grad, gt_x + gt_y, image_params_grad)
    return LossTerms(total, loss_fix, loss_tr), grads


def _fixed_term_only(model, lk, ref, iw, a_fix):
    # motion gradients are exactly zero without the second term
    n = len(ref)
    h_x = grid.encode_lookup(lk, model.image_tables, model.image_grid, iw)
    out, cache = mlp.forward(model.image_mlp, model.image_params, h_x, keep_cache=True)
    r = out[:, 0] - ref
    loss = float(np.mean(r * r))
    if not np.isfinite(loss):
        raise NumericalAbort(f"non-finite loss {loss}")
    g_out = np.zeros_like(out)
    g_out[:, 0] = (2.0 * a_fix / n) * r
    params_grad, g_h = mlp.backward(model.image_mlp, model.image_params, cache, g_out, need_input_grad=True)
    gt, _ = grid.backward_lookup(lk, g_h, model.image_tables, model.image_grid, iw, need_coord_grad=False)
    grads = ModelGrads(np.zeros_like(model.motion_tables), model.motion_params.zeros_like(), gt, params_grad)
    return LossTerms(a_fix * loss, loss, 0.0), grads


def loss_value(model,coords, ref, trans, weights=None, term_weights=(1.0, 1.0)) -> float:
    """Forward-only objective; used by finite-difference checks."""
    w = _resolve_weights(model, weights)
    coords = np.asarray(coords, dtype=np.float64)
    fix = predict_fixed(model, coords, w)
    tr = predict_transformed(model, coords, w)
    a, b = term_weights
    return float(a * np.mean((fix - np.ravel(ref)) ** 2) + b * np.mean((tr - np.ravel(trans)) ** 2))


def voxel_coords(extents) -> np.ndarray:
    """Integer voxel indices of a full grid in row-major order, ``(prod, d)``."""
    axes = [np.arange(n) for n in extents]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def normalize_coords(voxels, extents) -> np.ndarray:
    denom = np.maximum(np.asarray(extents, dtype=np.float64) - 1.0, 1.0)
    return np.asarray(voxels, dtype=np.float64) / denom


def export_displacement_field(model: RegistrationModel, shape, weights=None, chunk: int = 1 << 16) -> np.ndarray:
    """Dense displacement ``(*shape, d)`` in voxel units at every voxel center."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != model.dim:
        raise ValueError(f"shape {shape} does not match model dimension {model.dim}")
    w = _resolve_weights(model, weights)
    coords = normalize_coords(voxel_coords(shape), shape)
    out = np.empty_like(coords)
    for start in range(0, len(coords), chunk):
        out[start:start + chunk] = displacement(model, coords[start:start + chunk], w)
    scale = np.maximum(np.asarray(shape, dtype=np.float64) - 1.0, 1.0)
    return (out * scale).reshape(*shape, model.dim)


def warp_field(field, model: RegistrationModel, interpolation: str = "linear", weights=None):
    """Resample ``field`` at ``x + u(x)``: brings fixed-frame data into the transformed frame."""
    from .data import warp_with_displacement

    disp = export_displacement_field(model, field.values.shape, weights)
    return warp_with_displacement(field, disp, interpolation)
