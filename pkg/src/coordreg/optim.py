"""Per-pair optimization: sampling, epoch loop, schedule advancement, early stop."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as rm
from .data import ScalarField
from .grid import HashGridConfig
from .mlp import Adam

log = logging.getLogger(__name__)

FULL_GRID = "full-grid"
FULL_GRID_LIMIT = 256 * 256


@dataclass
class RunConfig:
    """Everything needed to register one pair. ``None`` means "derive from the data".

    Grid resolutions default to the image size: the image grid goes up to one
    cell per voxel, the deformable motion grid to one cell per
    ``motion_cell_size`` voxels. Rigid mode pins the motion grid to a single
    level at ``rigid_resolution``.
    """

    epochs: int | None = None
    target_epoch: int | None = None
    batch_size: int | None = None
    steps_per_epoch: int | str | None = None
    seed: int = 0
    deterministic: bool = True
    early_stop_window: int | None = None
    early_stop_tol: float = 1e-4
    granularity: str = "deformable"
    modality: str = "single"
    coarse_to_fine: bool = True
    schedule_motion: bool = True
    schedule_image: bool = True
    features: int = 2
    table_size: int = 2**14
    image_levels: int = 8
    image_n_min: int = 4
    image_n_max: int | None = None
    motion_levels: int = 4
    motion_n_min: int = 2
    motion_n_max: int | None = None
    motion_cell_size: int = 8
    rigid_resolution: int = 2
    hidden_widths: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    motion_lr: float = 2e-3
    motion_lr_ramp: float = 2.0
    image_lr: float = 1e-2
    displacement_scale: float = 1.0

    def __post_init__(self):
        self.hidden_widths = tuple(int(h) for h in self.hidden_widths)
        if self.granularity not in ("rigid", "deformable"):
            raise ValueError(f"granularity must be rigid or deformable, got {self.granularity!r}")
        if self.modality not in ("single", "multi"):
            raise ValueError(f"modality must be single or multi, got {self.modality!r}")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.epochs is not None and self.target_epoch is not None and self.target_epoch > self.epochs:
            raise ValueError("target_epoch must not exceed epochs")
        if self.target_epoch is not None and self.target_epoch < 1:
            raise ValueError("target_epoch must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        spe = self.steps_per_epoch
        if spe is not None and spe != FULL_GRID and not (isinstance(spe, int) and spe >= 1):
            raise ValueError(f"steps_per_epoch must be a positive int or {FULL_GRID!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    def resolved(self, extents) -> "RunConfig":
        """Fill every data-dependent default for the given geometry."""
        extents = tuple(int(e) for e in extents)
        dim = len(extents)
        n_vox = int(np.prod(extents))
        epochs = self.epochs or (500 if dim == 2 else 300)
        target = self.target_epoch or max(1, int(round(0.4 * epochs)))
        target = min(target, epochs)
        spe = self.steps_per_epoch
        if spe is None:
            spe = FULL_GRID if (dim == 2 and n_vox <= FULL_GRID_LIMIT) else 1
        batch = self.batch_size
        if batch is None:
            batch = n_vox if spe == FULL_GRID else min(n_vox, 2**16)
        res = max(extents)
        image_n_max = self.image_n_max or res
        motion_n_max = self.motion_n_max or max(self.motion_n_min, res // self.motion_cell_size)
        return dataclasses.replace(
            self,
            epochs=epochs,
            target_epoch=target,
            steps_per_epoch=spe,
            batch_size=batch,
            image_n_max=image_n_max,
            motion_n_max=motion_n_max,
        )

    def grids(self, dim: int, extents) -> tuple[HashGridConfig, HashGridConfig]:
        cfg = self.resolved(extents)
        if cfg.granularity == "rigid":
            r = cfg.rigid_resolution
            motion = HashGridConfig(dim, 1, cfg.features, cfg.table_size, r, r)
        else:
            lo = min(cfg.motion_n_min, cfg.motion_n_max)
            levels = cfg.motion_levels if cfg.motion_n_max > lo else 1
            motion = HashGridConfig(dim, levels, cfg.features, cfg.table_size, lo, cfg.motion_n_max)
        lo = min(cfg.image_n_min, cfg.image_n_max)
        levels = cfg.image_levels if cfg.image_n_max > lo else 1
        image = HashGridConfig(dim, levels, cfg.features, cfg.table_size, lo, cfg.image_n_max)
        return motion, image


def capacity_restricted_preset(config: RunConfig, resolution: int) -> RunConfig:
    """Limit the image grid's finest resolution to 1/15 of the image resolution.

    The coarsest resolution shrinks by the same factor as the finest one would
    (relative to the default ``n_max = resolution``), so the grid keeps several
    distinct levels instead of collapsing into a single coarse one.
    """
    resolution = int(resolution)
    n_max = max(2, resolution // 15)
    n_min = max(1, min(config.image_n_min, (config.image_n_min * n_max) // resolution))
    return dataclasses.replace(config, image_n_max=n_max, image_n_min=n_min)


def full_grid_voxels(extents) -> np.ndarray:
    return rm.voxel_coords(extents)


def sample_coords(extents, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """``batch_size`` voxel indices drawn uniformly with replacement."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = int(np.prod(extents))
    flat = rng.integers(0, n, size=batch_size)
    return np.stack(np.unravel_index(flat, tuple(extents)), axis=-1)


@dataclass
class RegistrationResult:
    model: rm.RegistrationModel
    displacement: np.ndarray
    loss_history: np.ndarray  # (epochs_run, 3): fixed term, transformed term, total
    wall_time: float
    epochs_run: int
    config: RunConfig
    extents: tuple[int, ...] = field(default=())

    def checkpoint_bytes(self) -> bytes:
        from .checkpoint import dumps

        return dumps(self.model)


def build_for(config: RunConfig, extents) -> rm.RegistrationModel:
    cfg = config.resolved(extents)
    dim = len(extents)
    motion, image = cfg.grids(dim, extents)
    channels = 2 if cfg.modality == "multi" else 1
    model = rm.build_model(
        dim, channels, motion, image, cfg.hidden_widths, cfg.activation, cfg.displacement_scale, cfg.seed
    )
    model.schedule = rm.ScheduleState(
        epoch=0,
        target_epoch=cfg.target_epoch,
        enabled=cfg.coarse_to_fine,
        motion=cfg.schedule_motion,
        image=cfg.schedule_image,
    )
    return model


def _batches(cfg: RunConfig, extents, rng):
    if cfg.steps_per_epoch == FULL_GRID:
        vox = full_grid_voxels(extents)
        for start in range(0, len(vox), cfg.batch_size):
            yield vox[start:start + cfg.batch_size]
    else:
        for _ in range(cfg.steps_per_epoch):
            yield sample_coords(extents, cfg.batch_size, rng)


def register_pair(fixed: ScalarField, transformed: ScalarField, config: RunConfig | None = None, progress=None) -> RegistrationResult:
    """Fit both networks to one image pair and return the recovered warp.

    Raises ``ValueError`` before doing any work if the geometries differ, and
    :class:`~coordreg.model.NumericalAbort` (carrying epoch and step) if the
    loss becomes non-finite.
    """
    config = config or RunConfig()
    if fixed.values.shape != transformed.values.shape:
        raise ValueError(f"geometry mismatch: {fixed.values.shape} vs {transformed.values.shape}")
    if fixed.dim not in (2, 3):
        raise ValueError("only 2-D and 3-D fields are supported")
    for name, f in (("fixed", fixed), ("transformed", transformed)):
        if f.values.min() < -1e-9 or f.values.max() > 1 + 1e-9:
            raise ValueError(f"{name} intensities must be normalized to [0, 1]")
    extents = fixed.values.shape
    cfg = config.resolved(extents)
    model = build_for(cfg, extents)
    opt_motion = Adam(lr=cfg.motion_lr)
    opt_image = Adam(lr=cfg.image_lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    ref_img = fixed.values
    trans_img = transformed.values

    # full-grid batches repeat every epoch, so their fixed-coordinate lookups are cached
    cache: dict[int, tuple] = {}
    history = []
    t0 = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.schedule.epoch = epoch
        weights = model.schedule.weights(model)
        opt_motion.lr = cfg.motion_lr * _motion_lr_factor(cfg, epoch)
        sums = np.zeros(3)
        count = 0
        for b, vox in enumerate(_batches(cfg, extents, rng)):
            if cfg.steps_per_epoch == FULL_GRID and b in cache:
                coords, ref, trans, lookups = cache[b]
            else:
                coords = rm.normalize_coords(vox, extents)
                idx = tuple(vox.T)
                ref, trans = ref_img[idx], trans_img[idx]
                lookups = rm.FixedLookups.build(model, coords)
                if cfg.steps_per_epoch == FULL_GRID:
                    cache[b] = (coords, ref, trans, lookups)
            try:
                terms, grads = rm.loss_and_grads(model, coords, ref, trans, weights, lookups=lookups)
            except rm.NumericalAbort as exc:
                raise rm.NumericalAbort(f"non-finite loss at epoch {epoch}, step {step}", epoch, step) from exc
            opt_motion.step(model.motion_arrays(), grads.motion_arrays())
            opt_image.step(model.image_arrays(), grads.image_arrays())
            n = len(coords)
            sums += n * np.array([terms.fixed, terms.transformed, terms.total])
            count += n
            step += 1
        history.append(sums / count)
        if progress is not None:
            progress(epoch, history[-1], model)
        if _should_stop(history, cfg, epoch):
            log.info("early stop at epoch %d", epoch)
            break

    wall = time.perf_counter() - t0
    disp = rm.export_displacement_field(model, extents)
    return RegistrationResult(model, disp, np.array(history), wall, len(history), cfg, tuple(extents))


def fit_image(image: ScalarField, config: RunConfig | None = None) -> RegistrationResult:
    """Fit only the image network to one image (the motion network stays at identity).

    Uses the same grids, schedule, sampling and image learning rate as
    :func:`register_pair`; the loss history's fixed-term column is the fit error.
    """
    config = config or RunConfig()
    extents = image.values.shape
    cfg = config.resolved(extents)
    model = build_for(cfg, extents)
    opt = Adam(lr=cfg.image_lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    values = image.values
    cache: dict[int, tuple] = {}
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        model.schedule.epoch = epoch
        weights = model.schedule.weights(model)
        sums = np.zeros(3)
        count = 0
        for b, vox in enumerate(_batches(cfg, extents, rng)):
            if b in cache:
                coords, ref, lookups = cache[b]
            else:
                coords = rm.normalize_coords(vox, extents)
                ref = values[tuple(vox.T)]
                lookups = rm.FixedLookups.build(model, coords)
                if cfg.steps_per_epoch == FULL_GRID:
                    cache[b] = (coords, ref, lookups)
            terms, grads = rm.loss_and_grads(model, coords, ref, ref, weights, (1.0, 0.0), lookups)
            opt.step(model.image_arrays(), grads.image_arrays())
            n = len(coords)
            sums += n * np.array([terms.fixed, 0.0, terms.total])
            count += n
        history.append(sums / count)
    disp = rm.export_displacement_field(model, extents)
    return RegistrationResult(model, disp, np.array(history), time.perf_counter() - t0, len(history), cfg, tuple(extents))


def _motion_lr_factor(cfg: RunConfig, epoch: int) -> float:
    """Motion step size grows with the schedule progress ``min(1, e/e_g) ** ramp``.

    While only coarse levels are active the alignment signal is weak, and Adam
    would turn it into full-size steps anyway.
    """
    if not (cfg.coarse_to_fine and cfg.schedule_motion) or cfg.motion_lr_ramp == 0:
        return 1.0
    return min(1.0, epoch / cfg.target_epoch) ** cfg.motion_lr_ramp


def _should_stop(history, cfg: RunConfig, epoch: int) -> bool:
    w = cfg.early_stop_window
    if not w:
        return False
    # never stop while finer levels are still being unmasked
    if cfg.coarse_to_fine and epoch < cfg.target_epoch:
        return False
    if len(history) <= w:
        return False
    old, new = history[-1 - w][2], history[-1][2]
    if old <= 0:
        return True
    return (old - new) / old < cfg.early_stop_tol
