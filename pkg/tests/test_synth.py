import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coordreg.metrics import corner_relative_distance
from coordreg.synth import (
    GroundTruthWarp,
    RbfBump,
    blob_texture,
    generate_pair,
    remap_modality,
    rigid_level_warp,
)


def test_identity_pair_is_exact():
    p = generate_pair(GroundTruthWarp.identity((24, 30)), seed=3)
    assert p.fixed.values.tobytes() == p.transformed.values.tobytes()


def test_same_seed_same_pair():
    w = rigid_level_warp(2, (32, 32), 5)
    a, b = generate_pair(w, 5, "remap", 0.01), generate_pair(w, 5, "remap", 0.01)
    assert a.transformed.values.tobytes() == b.transformed.values.tobytes()
    assert not np.array_equal(a.fixed.values, generate_pair(w, 6).fixed.values)


def test_integer_translation_is_array_shift():
    w = GroundTruthWarp("rigid", (30, 40), translation=(3.0, -2.0))
    p = generate_pair(w, 1)
    # transformed[y, x] = fixed[y + 3, x - 2]
    np.testing.assert_allclose(p.transformed.values[:27, 2:], p.fixed.values[3:, :38], atol=1e-12)


def test_remap_is_monotone_inverted():
    x = np.linspace(0, 1, 11)
    y = remap_modality(x)
    assert np.all(np.diff(y) < 0)
    np.testing.assert_allclose(y, 1 - np.sqrt(x))
    p = generate_pair(GroundTruthWarp.identity((16, 16)), 2, "remap")
    np.testing.assert_allclose(p.transformed.values, remap_modality(p.fixed.values))


def test_texture_range_and_determinism():
    t = blob_texture((40, 40), 7)
    assert t.min() == 0.0 and t.max() == 1.0
    np.testing.assert_array_equal(t, blob_texture((40, 40), 7))
    t3 = blob_texture((12, 12, 12), 7, margin=3)
    assert t3.shape == (18, 18, 18)


def test_rbf_bump_profile():
    w = GroundTruthWarp("rbf", (50, 50), bumps=[RbfBump((25, 25), (6.0, 0.0), 12.0)])
    np.testing.assert_allclose(w.displacement([[25, 25]])[0], [6.0, 0.0])
    r = 12.0
    np.testing.assert_allclose(w.displacement([[25 + r, 25]])[0], [6.0 * np.exp(-0.5), 0.0])
    mags = [np.linalg.norm(w.displacement([[25, 25 + k]])[0]) for k in range(0, 30, 5)]
    assert np.all(np.diff(mags) < 0)


def test_level_presets_ordered():
    means = []
    for level in (1, 2, 3, 4):
        ds = [
            corner_relative_distance(lambda p: np.asarray(p, float), rigid_level_warp(level, (64, 64), s).apply, (64, 64))
            for s in range(5)
        ]
        means.append(np.mean(ds))
    assert np.all(np.diff(means) > 0)
    # level 1 is a pure translation of 2% of the width
    assert means[0] == pytest.approx(2.0 * 64 / 64)


def test_level_validation():
    with pytest.raises(ValueError):
        rigid_level_warp(5, (8, 8))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    st.floats(-30, 30),
    st.floats(0.5, 2.0),
)
def test_rigid_json_round_trip(t, rot, scale):
    w = GroundTruthWarp("rigid", (20, 30), translation=t, rotation_deg=rot, scale=scale)
    back = GroundTruthWarp.from_json(w.to_json())
    assert back == w
    pts = np.random.default_rng(0).random((5, 2)) * 20
    assert back.apply(pts).tobytes() == w.apply(pts).tobytes()


def test_rbf_json_round_trip():
    w = GroundTruthWarp("rbf", (8, 9, 10), bumps=[RbfBump((1, 2, 3), (0.5, -1, 2), 3.0)])
    assert GroundTruthWarp.from_json(w.to_json()) == w


def test_warp_validation():
    with pytest.raises(ValueError):
        GroundTruthWarp("affine", (4, 4))
    with pytest.raises(ValueError):
        GroundTruthWarp("rigid", (4, 4), scale=0)
    with pytest.raises(ValueError):
        RbfBump((1, 1), (1, 1), 0.0)
    with pytest.raises(ValueError):
        GroundTruthWarp.from_dict({"kind": "rigid", "extents": [4, 4], "shear": 1})


def test_labels_follow_warp():
    w = GroundTruthWarp("rigid", (40, 40), translation=(4.0, 0.0))
    p = generate_pair(w, 0, labels=3)
    assert set(np.unique(p.fixed_labels.values)) <= {0, 1, 2, 3}
    np.testing.assert_array_equal(p.transformed_labels.values[:36], p.fixed_labels.values[4:])
