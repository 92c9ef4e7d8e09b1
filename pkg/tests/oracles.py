"""Slow, obviously-correct reference implementations used by the tests."""

import itertools

import numpy as np


def brute_boundary(mask):
    """Voxels of ``mask`` with a face neighbour outside the mask or outside the array."""
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    for idx in zip(*np.nonzero(mask)):
        for axis in range(mask.ndim):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if n[axis] < 0 or n[axis] >= mask.shape[axis] or not mask[tuple(n)]:
                    out[idx] = True
    return out


def brute_hd95(a, b, spacing):
    pa = np.argwhere(brute_boundary(a)) * np.asarray(spacing)
    pb = np.argwhere(brute_boundary(b)) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    pooled.sort()
    # linear-interpolated quantile written out by hand
    pos = 0.95 * (len(pooled) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(pooled) - 1)
    return pooled[lo] + (pos - lo) * (pooled[hi] - pooled[lo])


def brute_dice(a, b):
    a = np.asarray(a, dtype=bool).ravel().tolist()
    b = np.asarray(b, dtype=bool).ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    total = sum(a) + sum(b)
    return 1.0 if total == 0 else 2 * inter / total


def brute_weighted_dice(est, ref):
    labels = sorted(int(v) for v in np.unique(ref) if v != 0)
    num = den = 0.0
    for lab in labels:
        n = int(np.sum(ref == lab))
        num += n * brute_dice(est == lab, ref == lab)
        den += n
    return num / den


def random_mask(rng, shape, p=None):
    p = rng.uniform(0.1, 0.6) if p is None else p
    m = rng.random(shape) < p
    if not m.any():
        m[tuple(rng.integers(0, s) for s in shape)] = True
    return m


def rotation_corner_error(angle_deg, extents):
    """Mean distance moved by the four corner pixels under a rotation about the centre."""
    h, w = extents
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    th = np.radians(angle_deg)
    total = 0.0
    for r, q in itertools.product((0, h - 1), (0, w - 1)):
        y, x = r - c[0], q - c[1]
        ry = np.cos(th) * y - np.sin(th) * x
        rx = np.sin(th) * y + np.cos(th) * x
        total += np.hypot(ry - y, rx - x)
    return total / 4
