"""Run-directory reports: loss curve SVG, checkerboard and red/green overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import model as rm
from .data import save_rgb


def loss_curve_svg(losses, width: int = 640, height: int = 360, label: str = "total loss") -> str:
    """Polyline of the per-epoch loss on a log10 axis; one vertex per epoch."""
    y = np.asarray(losses, dtype=np.float64)
    y = np.log10(np.maximum(y, 1e-300))
    pad = 40
    n = len(y)
    xs = pad + (np.arange(n) / max(n - 1, 1)) * (width - 2 * pad)
    lo, hi = float(y.min()), float(y.max())
    span = hi - lo if hi > lo else 1.0
    ys = height - pad - (y - lo) / span * (height - 2 * pad)
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<text x="{pad}" y="{pad - 10}" font-size="12">{label} (log10, {lo:.2f} .. {hi:.2f})</text>\n'
        f'<text x="{width - pad}" y="{height - 10}" font-size="12" text-anchor="end">epoch 1 .. {n}</text>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>\n'
        "</svg>\n"
    )


def checkerboard(a: np.ndarray, b: np.ndarray, tiles: int = 8) -> np.ndarray:
    """Alternate square tiles of two same-shape 2-D images."""
    if a.shape != b.shape:
        raise ValueError("checkerboard inputs differ in shape")
    h, w = a.shape
    ty = (np.arange(h) * tiles // h)[:, None]
    tx = (np.arange(w) * tiles // w)[None, :]
    return np.where((ty + tx) % 2 == 0, a, b)


def red_green(transformed: np.ndarray, reconstruction: np.ndarray) -> np.ndarray:
    """Transformed image in red, warped fixed-image reconstruction in green."""
    rgb = np.zeros((*transformed.shape, 3))
    rgb[..., 0] = np.clip(transformed, 0.0, 1.0)
    rgb[..., 1] = np.clip(reconstruction, 0.0, 1.0)
    return rgb


def warped_reconstruction(model: rm.RegistrationModel, extents) -> np.ndarray:
    """Image network channel 0 queried at ``x + u(x)``: the fixed image moved into the transformed frame."""
    coords = rm.normalize_coords(rm.voxel_coords(extents), extents)
    w = model.schedule.weights(model)
    warped = coords + rm.displacement(model, coords, w)
    out = rm._image(model, warped, w[1])[:, 0]
    return out.reshape(extents)


def middle_slice(values: np.ndarray) -> np.ndarray:
    if values.ndim == 2:
        return values
    return values[values.shape[0] // 2]


def write_report(run_dir, out_dir, losses, model, transformed: np.ndarray, tiles: int = 8) -> dict:
    """Write ``loss.svg``, ``checkerboard.png`` and ``overlay.png``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recon = warped_reconstruction(model, transformed.shape)
    recon2, trans2 = middle_slice(recon), middle_slice(transformed)
    paths = {
        "loss_svg": out / "loss.svg",
        "checkerboard_png": out / "checkerboard.png",
        "overlay_png": out / "overlay.png",
    }
    paths["loss_svg"].write_text(loss_curve_svg(losses))
    board = checkerboard(np.clip(recon2, 0, 1), np.clip(trans2, 0, 1), tiles)
    save_rgb(paths["checkerboard_png"], np.repeat(board[..., None], 3, axis=-1))
    save_rgb(paths["overlay_png"], red_green(trans2, recon2))
    return {k: str(v) for k, v in paths.items()}
