import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coordreg.mlp import Adam, MlpConfig, MlpParams, backward, forward, forward_backward, init_mlp


def test_zero_final_layer_outputs_zero():
    cfg = MlpConfig(5, (16, 16), 3, final_layer_zero_init=True)
    p = init_mlp(cfg, 4)
    x = np.random.default_rng(0).normal(size=(20, 5))
    assert not forward(cfg, p, x).any()
    assert not p.weights[-1].any() and not p.biases[-1].any()


def test_init_seeded():
    cfg = MlpConfig(3, (8,), 2)
    a, b, c = init_mlp(cfg, 1), init_mlp(cfg, 1), init_mlp(cfg, 2)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert any(not np.array_equal(x, y) for x, y in zip(a.arrays(), c.arrays()))
    bound = 1 / np.sqrt(3)
    assert np.abs(a.weights[0]).max() <= bound


def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(3, (), 1)
    with pytest.raises(ValueError):
        MlpConfig(3, (4,), 1, activation="tanh")
    with pytest.raises(ValueError):
        MlpConfig(0, (4,), 1)


def test_identity_like_path():
    # relu passes the positive input through W = I; final layer I again
    cfg = MlpConfig(3, (3,), 3)
    p = MlpParams([np.eye(3), np.eye(3)], [np.zeros(3), np.zeros(3)])
    x = np.array([0.2, 1.5, 3.0])
    np.testing.assert_array_equal(forward(cfg, p, x), x)


def test_forward_matches_matrix_arithmetic():
    rng = np.random.default_rng(7)
    cfg = MlpConfig(2, (4,), 1)
    p = init_mlp(cfg, 7)
    p.biases = [rng.normal(size=4), rng.normal(size=1)]
    x = rng.normal(size=2)
    hidden = []
    for j in range(4):
        z = sum(x[i] * p.weights[0][i, j] for i in range(2)) + p.biases[0][j]
        hidden.append(max(z, 0.0))
    expected = sum(hidden[j] * p.weights[1][j, 0] for j in range(4)) + p.biases[1][0]
    assert abs(forward(cfg, p, x)[0] - expected) < 1e-12


def test_zero_upstream_gives_zero_grads():
    cfg = MlpConfig(4, (8,), 2)
    p = init_mlp(cfg, 0)
    g, gi = forward_backward(cfg, p, np.ones((3, 4)), np.zeros((3, 2)))
    assert all(not a.any() for a in g.arrays()) and not gi.any()


def test_linear_input_gradient():
    # relu on a positive pre-activation acts linearly
    cfg = MlpConfig(3, (2,), 2)
    w0 = np.array([[1.0, 0.5], [0.2, 1.0], [0.3, 0.1]])
    w1 = np.array([[2.0, -1.0], [0.5, 3.0]])
    p = MlpParams([w0, w1], [np.ones(2), np.zeros(2)])
    up = np.array([0.4, -0.7])
    _, gi = forward_backward(cfg, p, np.array([1.0, 1.0, 1.0]), up)
    np.testing.assert_allclose(gi, w0 @ (w1 @ up), atol=1e-14)


def _fd_mlp(cfg, seed, n=3):
    rng = np.random.default_rng(seed)
    p = init_mlp(cfg, seed)
    p.biases = [rng.normal(scale=0.3, size=b.shape) for b in p.biases]
    x = rng.normal(size=(n, cfg.input_dim))
    up = rng.normal(size=(n, cfg.output_dim))
    grads, gi = forward_backward(cfg, p, x, up)
    f = lambda: float(np.sum(up * forward(cfg, p, x)))
    h = 1e-4
    worst = 0.0
    for arr, g in zip(p.arrays(), grads.arrays()):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8))
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - gi[idx]) / max(abs(num), abs(gi[idx]), 1e-8))
    return worst


@pytest.mark.parametrize("activation", ["relu", "gelu"])
def test_4_8_8_2_gradients_match_finite_differences(activation):
    assert _fd_mlp(MlpConfig(4, (8, 8), 2, activation), 3) < 1e-4


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 5),
    st.lists(st.integers(1, 6), min_size=1, max_size=3),
    st.integers(1, 3),
    st.sampled_from(["relu", "gelu"]),
    st.integers(0, 10_000),
)
def test_random_networks_match_finite_differences(n_in, widths, n_out, act, seed):
    assert _fd_mlp(MlpConfig(n_in, tuple(widths), n_out, act), seed, n=2) < 1e-4


def test_forward_has_no_side_effects():
    cfg = MlpConfig(3, (5,), 1)
    p = init_mlp(cfg, 0)
    before = [a.copy() for a in p.arrays()]
    x = np.ones((2, 3))
    a = forward(cfg, p, x)
    b = forward(cfg, p, x)
    assert a.tobytes() == b.tobytes()
    for u, v in zip(before, p.arrays()):
        np.testing.assert_array_equal(u, v)


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    opt = Adam(lr=0.1)
    opt.step(p, [np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert opt.t == 1


def test_adam_first_step():
    # m_hat = 1, v_hat = 1 at t=1 -> step = lr / (1 + eps)
    p = [np.array([0.0])]
    Adam(lr=0.1).step(p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_bitwise_reproducible():
    def run():
        rng = np.random.default_rng(5)
        p = [rng.normal(size=(3, 3)), rng.normal(size=3)]
        opt = Adam(lr=0.01)
        for _ in range(20):
            opt.step(p, [2 * p[0], np.sin(p[1])])
        return b"".join(a.tobytes() for a in p)

    assert run() == run()


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        Adam().step([np.zeros(2)], [np.zeros(3)])
