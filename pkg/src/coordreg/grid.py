"""Multi-resolution hash-grid encoding with an analytic backward pass.

Coordinates live in the unit box ``[0, 1]^d``. Every level ``i`` splits the box
into ``n_i`` cells per axis; the ``2^d`` vertices of the cell containing a
coordinate are mapped to rows of a learnable table (densely when the whole
lattice fits, otherwise through a spatial hash) and d-linearly interpolated.
Levels are concatenated coarse to fine, each scaled by a level weight.

The forward pass is split in two: :func:`lookup` resolves table rows and
interpolation weights for a coordinate batch (reusable while the coordinates
stay fixed), :func:`encode_lookup` gathers features for given tables.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

# Axis 0 uses 1 so that the hash degenerates gracefully on 1-D lattices.
PRIMES = (1, 2654435761, 805459861)

TABLE_INIT_RANGE = 1e-4


@dataclass(frozen=True)
class HashGridConfig:
    dim: int = 2
    levels: int = 8
    features: int = 2
    table_size: int = 2**14
    n_min: int = 4
    n_max: int = 64

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.features < 1:
            raise ValueError("features must be >= 1")
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ValueError(f"table_size must be a power of two, got {t}")
        if self.n_min < 1 or self.n_max < self.n_min:
            raise ValueError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if self.levels == 1 and self.n_max != self.n_min:
            raise ValueError("a single-level grid needs n_max == n_min")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(resolution_at_level(self, i) for i in range(self.levels))

    def params_shape(self) -> tuple[int, int, int]:
        return (self.levels, self.table_size, self.features)


def resolution_at_level(config: HashGridConfig, i: int) -> int:
    """Cells per axis at level ``i``: geometric progression from n_min to n_max."""
    if not 0 <= i < config.levels:
        raise IndexError(f"level {i} out of range for {config.levels} levels")
    if config.levels == 1 or config.n_max == config.n_min:
        return config.n_min
    growth = math.exp((math.log(config.n_max) - math.log(config.n_min)) / (config.levels - 1))
    # the epsilon keeps exact powers (e.g. 16 * 2**4) from flooring one below
    res = math.floor(config.n_min * growth**i + 1e-9)
    return min(max(res, config.n_min), config.n_max)


def is_dense(res: int, dim: int, table_size: int) -> bool:
    return (res + 1) ** dim <= table_size


def vertex_index(vertices: np.ndarray, res: int, table_size: int) -> np.ndarray:
    """Table rows for integer lattice points ``vertices[..., d]``."""
    vertices = np.asarray(vertices, dtype=np.int64)
    dim = vertices.shape[-1]
    if is_dense(res, dim, table_size):
        idx = np.zeros(vertices.shape[:-1], dtype=np.int64)
        for k in range(dim):
            idx = idx * (res + 1) + vertices[..., k]
        return idx
    v = vertices.astype(np.uint64)
    h = np.zeros(vertices.shape[:-1], dtype=np.uint64)
    for k in range(dim):
        # uint64 wraparound is fine: only the low log2(T) bits survive
        h ^= v[..., k] * np.uint64(PRIMES[k])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def cell_index(vertex, res: int, table_size: int) -> int:
    """Scalar form of :func:`vertex_index`."""
    return int(vertex_index(np.asarray(vertex)[None, :], res, table_size)[0])


def init_tables(config: HashGridConfig, rng: np.random.Generator | int | None = None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    return rng.uniform(-TABLE_INIT_RANGE, TABLE_INIT_RANGE, size=config.params_shape())


def _corner_offsets(dim: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=dim)), dtype=np.int64)


@dataclass
class Lookup:
    """Per-batch interpolation plan shared by forward and backward.

    ``rows`` index into the flattened ``(N*T, F)`` table, shape ``(N, B, 2^d)``.
    ``dweights`` holds d(weight)/d(coord) including the ``n_i`` factor and the
    zero slope of the clamp outside ``[0, 1]``.
    """

    rows: np.ndarray
    weights: np.ndarray
    dweights: np.ndarray | None


def lookup(coords: np.ndarray, config: HashGridConfig, with_derivative: bool = True) -> Lookup:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != config.dim:
        raise ValueError(f"coords must have shape (B, {config.dim}), got {coords.shape}")
    n_pts = coords.shape[0]
    clamped = np.clip(coords, 0.0, 1.0)
    inside = (coords >= 0.0) & (coords <= 1.0)
    offsets = _corner_offsets(config.dim)
    slopes = np.where(offsets == 1, 1.0, -1.0)
    n_corners = len(offsets)

    rows = np.empty((config.levels, n_pts, n_corners), dtype=np.int64)
    weights = np.empty((config.levels, n_pts, n_corners))
    dweights = np.empty((config.levels, n_pts, n_corners, config.dim)) if with_derivative else None

    for level in range(config.levels):
        res = resolution_at_level(config, level)
        pos = clamped * res
        cell = np.minimum(np.floor(pos).astype(np.int64), res - 1)
        frac = pos - cell
        verts = cell[:, None, :] + offsets[None, :, :]
        rows[level] = vertex_index(verts, res, config.table_size) + level * config.table_size
        # per-axis linear factors: frac for the upper corner, 1 - frac for the lower
        factors = np.where(offsets[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
        weights[level] = factors.prod(axis=-1)
        if with_derivative:
            for k in range(config.dim):
                others = np.ones(factors.shape[:2])
                for j in range(config.dim):
                    if j != k:
                        others = others * factors[:, :, j]
                dweights[level, :, :, k] = slopes[None, :, k] * others * (res * inside[:, None, k])
    return Lookup(rows, weights, dweights)


def _level_weights(config: HashGridConfig, level_weights) -> np.ndarray:
    if level_weights is None:
        return np.ones(config.levels)
    w = np.asarray(level_weights, dtype=np.float64)
    if w.shape != (config.levels,):
        raise ValueError(f"expected {config.levels} level weights, got shape {w.shape}")
    return w


def encode_lookup(lk: Lookup, tables: np.ndarray, config: HashGridConfig, level_weights=None) -> np.ndarray:
    """Features ``(B, N*F)`` for a precomputed lookup."""
    w = _level_weights(config, level_weights)
    flat = tables.reshape(-1, config.features)
    corners = flat[lk.rows]  # (N, B, C, F)
    feats = np.einsum("lbc,lbcf->lbf", lk.weights, corners) * w[:, None, None]
    n_pts = feats.shape[1]
    return feats.transpose(1, 0, 2).reshape(n_pts, config.output_dim)


def backward_lookup(
    lk: Lookup,
    grad_features: np.ndarray,
    tables: np.ndarray,
    config: HashGridConfig,
    level_weights=None,
    need_coord_grad: bool = True,
):
    """Return ``(table_grad, coord_grad)`` for upstream gradient ``(B, N*F)``.

    Table gradients are scattered with ``bincount`` which sums in index order,
    so the result does not depend on thread scheduling.
    """
    w = _level_weights(config, level_weights)
    n_pts = grad_features.shape[0]
    g = grad_features.reshape(n_pts, config.levels, config.features).transpose(1, 0, 2)
    g = g * w[:, None, None]  # (N, B, F)

    n_rows = config.levels * config.table_size
    contrib = lk.weights[..., None] * g[:, :, None, :]  # (N, B, C, F)
    flat_rows = lk.rows.ravel()
    table_grad = np.empty((n_rows, config.features))
    for f in range(config.features):
        table_grad[:, f] = np.bincount(flat_rows, weights=contrib[..., f].ravel(), minlength=n_rows)
    table_grad = table_grad.reshape(config.params_shape())

    coord_grad = None
    if need_coord_grad:
        if lk.dweights is None:
            raise ValueError("lookup was built without derivatives")
        corners = tables.reshape(-1, config.features)[lk.rows]
        s = np.einsum("lbcf,lbf->lbc", corners, g)
        coord_grad = np.einsum("lbc,lbck->bk", s, lk.dweights)
    return table_grad, coord_grad


def encode(coords, tables, config: HashGridConfig, level_weights=None) -> np.ndarray:
    """Encode coordinates in ``[0, 1]^d`` (clamped) into ``(B, N*F)`` features."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    return encode_lookup(lookup(coords, config, with_derivative=False), tables, config, level_weights)


def encode_backward(coords, grad_features, tables, config: HashGridConfig, level_weights=None):
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    grad_features = np.atleast_2d(np.asarray(grad_features, dtype=np.float64))
    return backward_lookup(lookup(coords, config), grad_features, tables, config, level_weights)
