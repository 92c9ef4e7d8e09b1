"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

Run just this file with ``pytest -v tests/test_acceptance.py``.
"""

import itertools
import time

import numpy as np
import pytest

from coordreg import checkpoint, metrics
from coordreg import model as rm
from coordreg.cli import run_registration
from coordreg.data import warp_with_displacement
from coordreg.optim import RunConfig, capacity_restricted_preset, fit_image, register_pair
from coordreg.synth import GroundTruthWarp, RbfBump, generate_pair, rigid_level_warp
from gradcheck import check_model, tiny_model
from oracles import brute_dice, brute_hd95, brute_weighted_dice, random_mask, rotation_corner_error

RIGID_EPOCHS = 200
SEEDS = range(10)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def corner_delta(result, warp):
    return metrics.corner_relative_distance(metrics.field_transform(result.displacement), warp.apply, warp.extents)


def rigid_runs(level, modality="same", seeds=SEEDS, **cfg):
    restricted = cfg.pop("restricted", False)
    deltas, times = [], []
    for seed in seeds:
        warp = rigid_level_warp(level, (64, 64), seed)
        pair = generate_pair(warp, seed, modality)
        config = RunConfig(
            granularity="rigid", modality="multi" if modality == "remap" else "single",
            epochs=RIGID_EPOCHS, seed=seed, **cfg,
        )
        if restricted:
            config = capacity_restricted_preset(config, 64)
        t0 = time.perf_counter()
        res = register_pair(pair.fixed, pair.transformed, config)
        times.append(time.perf_counter() - t0)
        deltas.append(corner_delta(res, warp))
    return np.array(deltas), np.array(times)


def test_gradient_integrity(report):
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for k in range(100):
        rng = np.random.default_rng(10_000 + k)
        dim = 2 if k % 3 else 3
        m = tiny_model(
            rng, dim=dim, channels=1 + k % 2, levels=int(rng.integers(1, 3)),
            width=int(rng.integers(4, 9)), n_min=int(rng.integers(2, 4)), n_max=int(rng.integers(4, 7)),
        )
        # two steps: a ReLU or cell kink can only sit inside one of the stencils
        worst = max(worst, check_model(m, rng, n_points=int(rng.integers(4, 12)), h=(1e-5, 1e-6)))
        n += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 60
    assert report("gradient integrity", ok, f"{n} configs, worst rel err {worst:.2e}, {elapsed:.1f} s"), (worst, elapsed)


def test_single_modal_rigid_recovery(report):
    d1, t1 = rigid_runs(1)
    d2, t2 = rigid_runs(2)
    s1, s2 = metrics.success_rate(d1), metrics.success_rate(d2)
    slowest = max(t1.max(), t2.max())
    ok = s1 == 1.0 and s2 >= 0.7 and slowest < 120
    detail = f"level 1 {s1:.1f}, level 2 {s2:.1f}, slowest run {slowest:.1f} s, level-2 deltas {np.round(d2, 2).tolist()}"
    assert report("single-modal rigid recovery", ok, detail)


def test_multi_modal_coarse_to_fine_ablation(report):
    on, _ = rigid_runs(1, "remap")
    off, _ = rigid_runs(1, "remap", coarse_to_fine=False)
    s_on, s_off = metrics.success_rate(on), metrics.success_rate(off)
    ok = s_on >= 0.7 and s_on > s_off
    detail = f"schedule on {s_on:.1f}, off {s_off:.1f}; mean delta on {on.mean():.2f}, off {off.mean():.2f}"
    assert report("multi-modal coarse-to-fine ablation", ok, detail)


def test_deformable_recovery(report):
    rows = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        angle = rng.uniform(0, 2 * np.pi)
        amp = 6.0 * np.array([np.cos(angle), np.sin(angle)])
        center = 47.5 + rng.uniform(-8, 8, size=2)
        warp = GroundTruthWarp("rbf", (96, 96), bumps=[RbfBump(center, amp, 12.0)])
        pair = generate_pair(warp, seed, labels=3)
        res = register_pair(pair.fixed, pair.transformed, RunConfig(epochs=300, seed=seed))
        truth = warp.dense_displacement()
        # support: where the true displacement is at least exp(-2) of the peak (within 2 bandwidths)
        support = np.linalg.norm(truth, axis=-1) >= 6.0 * np.exp(-2)
        epe = np.median(np.linalg.norm(res.displacement - truth, axis=-1)[support])
        warped = warp_with_displacement(pair.fixed_labels, res.displacement, "nearest")
        dsc = metrics.label_metrics(warped, pair.transformed_labels)["mean_dice"]
        base = metrics.label_metrics(pair.fixed_labels, pair.transformed_labels)["mean_dice"]
        rows.append((epe, dsc, base))
    rows = np.array(rows)
    ok = bool(np.all(rows[:, 0] < 1.5) and np.all(rows[:, 1] >= 0.90))
    detail = (
        f"median EPE {np.round(rows[:, 0], 3).tolist()} px, DSC {np.round(rows[:, 1], 3).tolist()}, "
        f"identity-warp DSC {np.round(rows[:, 2], 3).tolist()}"
    )
    assert report("deformable recovery", ok, detail)


def test_reduced_capacity_robustness(report):
    cfg = capacity_restricted_preset(RunConfig(), 64)
    assert cfg.image_n_max == 4
    deltas, _ = rigid_runs(1, restricted=True)
    rate = metrics.success_rate(deltas)
    ok = rate >= 0.8
    assert report("reduced-capacity robustness", ok, f"image n_max 4, success {rate:.1f}, deltas {np.round(deltas, 2).tolist()}")


def test_metric_oracles(report):
    rng = np.random.default_rng(7)
    worst_hd, dice_exact, wd_worst = 0.0, True, 0.0
    for k in range(50):
        dim = 3 if k % 2 else 2
        shape = tuple(int(s) for s in rng.integers(2, 13, size=dim))
        spacing = tuple(rng.uniform(0.5, 2.5, size=dim))
        a, b = random_mask(rng, shape), random_mask(rng, shape)
        dice_exact &= metrics.dice(a, b) == brute_dice(a, b)
        worst_hd = max(worst_hd, abs(metrics.hd95(a, b, spacing) - brute_hd95(a, b, spacing)))
        ref = rng.integers(0, 4, size=shape)
        ref.flat[0] = 1
        est = rng.integers(0, 4, size=shape)
        wd = metrics.label_metrics(est, ref)["weighted_dice"]
        wd_worst = max(wd_worst, abs(wd - brute_weighted_dice(est, ref)))

    ident = lambda p: np.asarray(p, dtype=float)
    shift = lambda p: np.asarray(p, dtype=float) + [0.0, 5.0]
    rot = GroundTruthWarp("rigid", (100, 100), rotation_deg=10.0)
    cases = [
        (corner_relative_distance_of(rot.apply, rot.apply, (100, 100)), 0.0),
        (corner_relative_distance_of(shift, ident, (100, 100)), 5.0),
        (corner_relative_distance_of(ident, rot.apply, (100, 100)), rotation_corner_error(10.0, (100, 100))),
        (corner_relative_distance_of(lambda p: ident(p) + [3.0, 4.0], ident, (80, 50)), 100 * 5.0 / 80),
    ]
    corner_worst = max(abs(a - b) for a, b in cases)
    ok = dice_exact and worst_hd < 1e-9 and wd_worst < 1e-12 and corner_worst < 1e-9
    detail = f"dice exact {dice_exact}, hd95 err {worst_hd:.1e}, weighted dice err {wd_worst:.1e}, corner err {corner_worst:.1e}"
    assert report("metric oracles", ok, detail)


def corner_relative_distance_of(t_est, t_gt, extents):
    return metrics.corner_relative_distance(t_est, t_gt, extents)


def test_schedule_exactness(report):
    mismatches, checked = 0, 0
    for n, e_g in itertools.product(range(1, 17), (1, 2, 3, 5, 7, 10, 16, 25, 40, 64, 100, 200)):
        sched = rm.CoarseToFineSchedule(e_g, n)
        for e in range(0, 2 * e_g + 1):
            got = rm.level_weights(e, sched)
            alpha = min(1.0, e / e_g)
            want = [min(1.0, max(0.0, n * alpha - i)) for i in range(n)]
            mismatches += int(not np.array_equal(got, want))
            checked += 1
    # the training loop must hand those same weights to both grids each epoch
    img = generate_pair(GroundTruthWarp.identity((12, 12)), 0).fixed
    seen = []
    cfg = RunConfig(epochs=10, target_epoch=6, image_levels=5, hidden_widths=(8,))
    res = register_pair(img, img, cfg, progress=lambda e, loss, m: seen.append((e, m.schedule.weights(m, e))))
    levels = (res.model.motion_grid.levels, res.model.image_grid.levels)
    for e, (mw, iw) in seen:
        for w, n in zip((mw, iw), levels):
            want = [min(1.0, max(0.0, n * min(1.0, e / 6) - i)) for i in range(n)]
            mismatches += int(not np.array_equal(w, want))
            checked += 1
    ok = mismatches == 0
    assert report("schedule exactness", ok, f"{checked} (N, e, e_g) cases, {mismatches} mismatches")


def test_determinism(report, tmp_path):
    warp = rigid_level_warp(1, (32, 32), 4)
    pair = generate_pair(warp, 4)
    from coordreg.data import save_volume

    save_volume(tmp_path / "f.raw", pair.fixed)
    save_volume(tmp_path / "t.raw", pair.transformed)
    identical = True
    for extra in ({}, {"steps_per_epoch": 3, "batch_size": 200}):
        cfg = RunConfig(epochs=25, seed=11, deterministic=True, **extra)
        for out in ("a", "b"):
            run_registration(tmp_path / "f.raw", tmp_path / "t.raw", tmp_path / f"{out}{len(extra)}", cfg)
        for name in ("checkpoint.bin", "loss.csv"):
            a = (tmp_path / f"a{len(extra)}" / name).read_bytes()
            b = (tmp_path / f"b{len(extra)}" / name).read_bytes()
            identical &= a == b
    model = checkpoint.load(tmp_path / "a0" / "checkpoint.bin")
    identical &= checkpoint.dumps(model) == (tmp_path / "a0" / "checkpoint.bin").read_bytes()
    assert report("determinism", identical, "full-grid and stochastic runs, checkpoint + loss CSV compared bytewise")


def test_identity_sanity(report):
    # 128 px: the finest image level is hashed, so the image fit has a
    # collision-limited floor instead of optimizer jitter
    img = generate_pair(GroundTruthWarp.identity((128, 128)), 0).fixed
    cfg = RunConfig(epochs=200, seed=0)
    reg = register_pair(img, img, cfg)
    fit = fit_image(img, cfg)
    median = float(np.median(np.linalg.norm(reg.displacement, axis=-1)))
    fit_loss = fit.loss_history[-1, 0]
    term_loss = reg.loss_history[-1, :2].max()
    ok = median < 0.5 and term_loss < 1.1 * fit_loss
    detail = f"median |u| {median:.4f} px, per-term loss {term_loss:.3e} vs image fit {fit_loss:.3e}"
    assert report("identity sanity", ok, detail)
