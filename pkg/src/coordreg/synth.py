"""Synthetic image pairs with known warps.

Ground-truth warps follow the registration convention: ``T(x)`` maps a point
of the transformed image to where it came from in the fixed image, so
``transformed(x) = fixed(T(x))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabelField, ScalarField, sample_linear
from .model import voxel_coords

# (translation as a fraction of image width, rotation in degrees) per level
RIGID_LEVELS = {
    1: (0.02, 0.0),
    2: (0.05, 2.0),
    3: (0.10, 5.0),
    4: (0.18, 10.0),
}


@dataclass
class RbfBump:
    center: tuple[float, ...]
    amplitude: tuple[float, ...]
    bandwidth: float

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.amplitude = tuple(float(a) for a in self.amplitude)
        self.bandwidth = float(self.bandwidth)
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if len(self.center) != len(self.amplitude):
            raise ValueError("center and amplitude differ in dimension")


@dataclass
class GroundTruthWarp:
    """Analytic transform, either rigid (similarity about the centre) or a sum of
    Gaussian displacement bumps ``a * exp(-|x - c|^2 / (2 sigma^2))``.

    Rotation acts in the plane of axes 0 and 1. Units are voxels.
    """

    kind: str
    extents: tuple[int, ...]
    spacing: tuple[float, ...] | None = None
    translation: tuple[float, ...] | None = None
    rotation_deg: float = 0.0
    scale: float = 1.0
    bumps: list[RbfBump] = field(default_factory=list)

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        d = len(self.extents)
        if d not in (2, 3):
            raise ValueError("warps are 2-D or 3-D")
        if self.spacing is None:
            self.spacing = (1.0,) * d
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.kind == "rigid":
            if self.translation is None:
                self.translation = (0.0,) * d
            self.translation = tuple(float(t) for t in self.translation)
            if len(self.translation) != d:
                raise ValueError("translation length must match dimension")
            if self.scale <= 0:
                raise ValueError("scale must be > 0")
        elif self.kind == "rbf":
            self.bumps = [b if isinstance(b, RbfBump) else RbfBump(**b) for b in self.bumps]
            for b in self.bumps:
                if len(b.center) != d:
                    raise ValueError("bump dimension must match extents")
        else:
            raise ValueError(f"unknown warp kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.extents, dtype=np.float64) - 1.0) / 2.0

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.kind == "rigid":
            c = self.center
            rel = pts - c
            th = math.radians(self.rotation_deg)
            rot = np.eye(self.dim)
            rot[0, 0], rot[0, 1] = math.cos(th), -math.sin(th)
            rot[1, 0], rot[1, 1] = math.sin(th), math.cos(th)
            return c + self.scale * rel @ rot.T + np.asarray(self.translation)
        out = pts.copy()
        for b in self.bumps:
            r2 = np.sum((pts - np.asarray(b.center)) ** 2, axis=1)
            out += np.exp(-r2 / (2.0 * b.bandwidth**2))[:, None] * np.asarray(b.amplitude)
        return out

    def displacement(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.apply(pts) - pts

    def dense_displacement(self) -> np.ndarray:
        pts = voxel_coords(self.extents).astype(np.float64)
        return self.displacement(pts).reshape(*self.extents, self.dim)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "extents": list(self.extents), "spacing": list(self.spacing)}
        if self.kind == "rigid":
            d.update(translation=list(self.translation), rotation_deg=self.rotation_deg, scale=self.scale)
        else:
            d["bumps"] = [
                {"center": list(b.center), "amplitude": list(b.amplitude), "bandwidth": b.bandwidth}
                for b in self.bumps
            ]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthWarp":
        allowed = {"kind", "extents", "spacing", "translation", "rotation_deg", "scale", "bumps"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown warp keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruthWarp":
        return cls.from_dict(json.loads(text))

    @classmethod
    def identity(cls, extents) -> "GroundTruthWarp":
        return cls("rigid", tuple(extents))


def rigid_level_warp(level: int, extents, seed=None) -> GroundTruthWarp:
    """Preset motion level 1-4: fixed magnitudes, seed-chosen direction and sign."""
    if level not in RIGID_LEVELS:
        raise ValueError(f"level must be 1-4, got {level}")
    frac, rot = RIGID_LEVELS[level]
    rng = np.random.default_rng(seed)
    extents = tuple(int(e) for e in extents)
    width = extents[1]
    mag = frac * width
    direction = rng.normal(size=len(extents))
    direction /= np.linalg.norm(direction)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return GroundTruthWarp("rigid", extents, translation=tuple(mag * direction), rotation_deg=sign * rot)


def blob_texture(extents, seed=None, margin: int = 0, density: float = 0.6, sigma_range=(0.03, 0.25)) -> np.ndarray:
    """Band-limited random texture on a canvas padded by ``margin``.

    A sum of Gaussian blobs over octaves of width between ``sigma_range``
    (fractions of the smallest extent). Each octave gets ``density * volume /
    sigma^d`` blobs of unit-scale amplitude, so every octave carries similar
    power, much like natural images. The central crop (the unpadded image) is
    rescaled to exactly [0, 1]; the padding shares the same map and is clipped.
    """
    rng = np.random.default_rng(seed)
    extents = np.asarray(extents, dtype=np.int64)
    dim = len(extents)
    canvas = extents + 2 * margin
    size = float(extents.min())
    sig_lo, sig_hi = sigma_range[0] * size, sigma_range[1] * size
    n_octaves = max(1, int(math.ceil(math.log2(sig_hi / sig_lo))))

    tex = np.zeros(tuple(canvas))
    for k in range(n_octaves):
        s_lo = sig_lo * 2.0**k
        s_hi = min(sig_hi, 2.0 * s_lo)
        n_blobs = max(2, int(density * np.prod(canvas) / s_lo**dim))
        centers = rng.uniform(-2 * s_hi, canvas - 1 + 2 * s_hi, size=(n_blobs, dim))
        sigmas = rng.uniform(s_lo, s_hi, size=n_blobs)
        amps = rng.uniform(0.5, 1.0, size=n_blobs) * rng.choice([-1.0, 1.0], size=n_blobs)
        for c, s, a in zip(centers, sigmas, amps):
            lo = np.maximum(np.floor(c - 4 * s), 0).astype(np.int64)
            hi = np.minimum(np.ceil(c + 4 * s), canvas - 1).astype(np.int64)
            if np.any(hi < lo):
                continue
            box = tuple(slice(a_, b_ + 1) for a_, b_ in zip(lo, hi))
            axes = np.meshgrid(*[np.arange(a_, b_ + 1) - ci for a_, b_, ci in zip(lo, hi, c)], indexing="ij")
            r2 = sum(ax * ax for ax in axes)
            tex[box] += a * np.exp(-r2 / (2 * s * s))
    crop = tuple(slice(margin, margin + int(e)) for e in extents)
    inner = tex[crop]
    lo, hi = inner.min(), inner.max()
    return np.clip((tex - lo) / (hi - lo), 0.0, 1.0)


def remap_modality(values: np.ndarray) -> np.ndarray:
    """Pseudo second modality: monotone, nonlinear, inverted (``1 - sqrt(x)``)."""
    return 1.0 - np.sqrt(np.clip(values, 0.0, 1.0))


def _required_margin(warp: GroundTruthWarp) -> int:
    pts = voxel_coords(warp.extents).astype(np.float64)
    mapped = warp.apply(pts)
    ext = np.asarray(warp.extents) - 1
    over = max(float(np.max(-mapped)), float(np.max(mapped - ext)), 0.0)
    return int(math.ceil(over)) + 2


@dataclass
class SyntheticPair:
    fixed: ScalarField
    transformed: ScalarField
    warp: GroundTruthWarp
    fixed_labels: LabelField | None = None
    transformed_labels: LabelField | None = None


def generate_pair(
    warp: GroundTruthWarp,
    seed=0,
    modality: str = "same",
    noise: float = 0.0,
    labels: int = 0,
    texture_kw: dict | None = None,
) -> SyntheticPair:
    """Render a textured fixed image and its warped copy.

    ``transformed(x) = fixed(T(x)) + noise`` using linear interpolation on a
    padded texture canvas, so no border fill is needed. ``modality="remap"``
    applies :func:`remap_modality` to the transformed image. ``labels > 0``
    adds that many ellipsoid label regions in both frames.
    """
    if modality not in ("same", "remap"):
        raise ValueError(f"modality must be 'same' or 'remap', got {modality!r}")
    ss = np.random.SeedSequence(seed)
    tex_seed, noise_seed, label_seed = ss.spawn(3)
    margin = _required_margin(warp)
    canvas = blob_texture(warp.extents, np.random.default_rng(tex_seed), margin, **(texture_kw or {}))
    crop = tuple(slice(margin, margin + e) for e in warp.extents)
    fixed = canvas[crop].copy()

    pts = voxel_coords(warp.extents).astype(np.float64)
    src = warp.apply(pts) + margin
    moved = sample_linear(canvas, src).reshape(warp.extents)
    if modality == "remap":
        moved = remap_modality(moved)
    if noise > 0:
        moved = moved + np.random.default_rng(noise_seed).normal(0.0, noise, size=moved.shape)
        moved = np.clip(moved, 0.0, 1.0)

    pair = SyntheticPair(ScalarField(fixed, warp.spacing), ScalarField(moved, warp.spacing), warp)
    if labels > 0:
        ell = random_ellipsoids(warp.extents, labels, np.random.default_rng(label_seed))
        pair.fixed_labels = LabelField(ellipsoid_labels(ell, pts).reshape(warp.extents), warp.spacing)
        pair.transformed_labels = LabelField(ellipsoid_labels(ell, warp.apply(pts)).reshape(warp.extents), warp.spacing)
    return pair


def random_ellipsoids(extents, count: int, rng, radius_range=(0.12, 0.22)):
    """``count`` axis-aligned ellipsoids ``(center, radii)`` inside the interior."""
    extents = np.asarray(extents, dtype=np.float64)
    out = []
    for _ in range(count):
        radii = rng.uniform(*radius_range, size=len(extents)) * extents
        center = rng.uniform(0.3 * extents, 0.7 * extents)
        out.append((center, radii))
    return out


def ellipsoid_labels(ellipsoids, points: np.ndarray) -> np.ndarray:
    """Label of each point; later ellipsoids overwrite earlier ones; 0 = background."""
    lab = np.zeros(len(points), dtype=np.int64)
    for k, (c, r) in enumerate(ellipsoids, start=1):
        inside = np.sum(((points - c) / r) ** 2, axis=1) <= 1.0
        lab[inside] = k
    return lab
