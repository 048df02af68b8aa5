import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from procdur.neural import (
    AdamState,
    DenseLayer,
    GruCell,
    adam_step,
    backward_sequence,
    bce_loss,
    bce_with_logits,
    check_gradients,
    clip_by_global_norm,
    dense_forward,
    forward_sequence,
    global_norm,
    gru_step,
    init_network,
)


def _sig(a):
    return 1.0 / (1.0 + math.exp(-a))


def _random_cell(rng, hidden, n_in, scale=0.5):
    mats = {f: rng.normal(0, scale, (hidden, n_in)) for f in ("W_z", "W_r", "W_h")}
    mats.update({f: rng.normal(0, scale, (hidden, hidden)) for f in ("U_z", "U_r", "U_h")})
    mats.update({f: rng.normal(0, scale, hidden) for f in ("b_z", "b_r", "b_h")})
    return GruCell(**mats)


def _zero_cell(hidden, n_in):
    mats = {f: np.zeros((hidden, n_in)) for f in ("W_z", "W_r", "W_h")}
    mats.update({f: np.zeros((hidden, hidden)) for f in ("U_z", "U_r", "U_h")})
    mats.update({f: np.zeros(hidden) for f in ("b_z", "b_r", "b_h")})
    return GruCell(**mats)


# -- dense ------------------------------------------------------------------


def test_dense_zero_sigmoid():
    layer = DenseLayer(np.zeros((3, 4)), np.zeros(3), "sigmoid")
    assert np.array_equal(dense_forward(layer, np.array([1.0, -2.0, 3.0, 4.0])), np.full(3, 0.5))


def test_dense_identity():
    x = np.array([0.3, -1.7, 2.2])
    layer = DenseLayer(np.eye(3), np.zeros(3), "identity")
    assert np.array_equal(dense_forward(layer, x), x)


def test_dense_relu_matches_elementwise_oracle(rng):
    W, b, x = rng.normal(size=(5, 7)), rng.normal(size=5), rng.normal(size=7)
    out = dense_forward(DenseLayer(W, b, "relu"), x)
    for j in range(5):
        s = b[j] + math.fsum(W[j, k] * x[k] for k in range(7))
        assert out[j] == pytest.approx(max(s, 0.0), rel=1e-12, abs=1e-12)


def test_dense_dimension_mismatch():
    with pytest.raises(ValueError):
        dense_forward(DenseLayer(np.zeros((2, 3)), np.zeros(2)), np.zeros(4))
    with pytest.raises(ValueError):
        DenseLayer(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        DenseLayer(np.zeros((2, 3)), np.zeros(2), "softmax")


# -- gru --------------------------------------------------------------------


def test_gru_zero_weights_halves_state():
    h = np.array([0.8, -0.4, 0.1])
    out = gru_step(_zero_cell(3, 2), h, np.array([5.0, -5.0]))
    assert np.array_equal(out, 0.5 * h)


def test_gru_zero_state_fixed_point():
    out = gru_step(_zero_cell(4, 3), np.zeros(4), np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(out, np.zeros(4))


def _gru_oracle(cell, h, x):
    H, D = cell.W_z.shape

    def lin(W, U, b, hv, j):
        return b[j] + math.fsum(W[j, k] * x[k] for k in range(D)) + math.fsum(U[j, k] * hv[k] for k in range(H))

    z = [_sig(lin(cell.W_z, cell.U_z, cell.b_z, h, j)) for j in range(H)]
    r = [_sig(lin(cell.W_r, cell.U_r, cell.b_r, h, j)) for j in range(H)]
    rh = [r[k] * h[k] for k in range(H)]
    c = [math.tanh(lin(cell.W_h, cell.U_h, cell.b_h, rh, j)) for j in range(H)]
    return np.array([(1 - z[j]) * h[j] + z[j] * c[j] for j in range(H)])


def test_gru_matches_scalar_oracle(rng):
    cell = _random_cell(rng, 5, 3)
    h = rng.uniform(-1, 1, 5)
    x = rng.normal(size=3)
    np.testing.assert_allclose(gru_step(cell, h, x), _gru_oracle(cell, h, x), rtol=1e-12, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_gru_state_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    cell = _random_cell(rng, 6, 4, scale)
    h = rng.uniform(-1, 1, 6)
    x = rng.normal(0, 3, 4)
    out = gru_step(cell, h, x)
    assert np.all(np.abs(out) <= 1.0)
    # strictly inside whenever the candidate did not saturate in float64
    assert np.all(np.abs(out) < 1.0) or np.any(np.abs(h) == 1.0) or scale > 1.0


def test_gru_dimension_mismatch():
    with pytest.raises(ValueError):
        gru_step(_zero_cell(3, 2), np.zeros(4), np.zeros(2))
    with pytest.raises(ValueError):
        gru_step(_zero_cell(3, 2), np.zeros(3), np.zeros(3))


# -- sequences --------------------------------------------------------------


def _net(rng, hidden=4, extra=5):
    return init_network(rng, [("tools", 12, 3, "tanh"), ("device", 14, 2, "tanh")], extra, hidden)


def _inputs(rng, T, extra=5):
    blocks = [rng.uniform(0, 1, (T, 12)), rng.uniform(0, 1, (T, 14))]
    ex = np.tile(np.eye(5)[1], (T, 1)) if extra else None
    return blocks, ex


def _zeroed(net):
    return net.with_params({k: np.zeros_like(v) for k, v in net.params().items()})


def test_forward_length_one_zero_params(rng):
    net = _zeroed(_net(rng))
    blocks, extra = _inputs(rng, 1)
    y, _ = forward_sequence(net, blocks, extra)
    assert y.tolist() == [0.5]


def test_forward_constant_input_converges(rng):
    net = _net(rng, hidden=6)
    T = 400
    x_tools, x_dev = rng.uniform(0, 1, 12), rng.uniform(0, 1, 14)
    blocks = [np.tile(x_tools, (T, 1)), np.tile(x_dev, (T, 1))]
    extra = np.tile(np.eye(5)[0], (T, 1))
    y, cache = forward_sequence(net, blocks, extra)
    # oracle: iterate the cell on the fixed input until the state stops moving
    x = cache.X[0]
    h = np.zeros(6)
    for _ in range(5000):
        h_new = _gru_oracle(net.cell, h, x)
        if np.max(np.abs(h_new - h)) < 1e-15:
            break
        h = h_new
    y_fixed = _sig(float(net.head.b[0]) + math.fsum(net.head.W[0] * h))
    assert y[-1] == pytest.approx(y_fixed, abs=1e-9)
    assert abs(y[-1] - y[-2]) < 1e-9


def test_forward_outputs_inside_unit_interval(rng):
    net = _net(rng)
    blocks, extra = _inputs(rng, 50)
    y, _ = forward_sequence(net, blocks, extra)
    assert np.all((y > 0) & (y < 1))


def test_forward_rejects_bad_dims(rng):
    net = _net(rng)
    blocks, extra = _inputs(rng, 5)
    with pytest.raises(ValueError):
        forward_sequence(net, [blocks[0][:, :11], blocks[1]], extra)
    with pytest.raises(ValueError):
        forward_sequence(net, blocks, None)
    with pytest.raises(ValueError):
        forward_sequence(net, [blocks[0], blocks[1][:4]], extra)


def test_forward_names_non_finite_step(rng):
    net = _net(rng)
    blocks, extra = _inputs(rng, 6)
    blocks[1] = blocks[1].copy()
    blocks[1][3, 0] = np.inf
    with pytest.raises(FloatingPointError, match="time step 4"):
        forward_sequence(net, blocks, extra)


# -- loss -------------------------------------------------------------------


def test_bce_examples():
    assert bce_loss(np.array([0.5]), np.array([0.5])) == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss(np.array([0.5, 0.5]), np.array([0.0, 1.0])) == pytest.approx(0.693147, abs=1e-6)
    with pytest.raises(ValueError):
        bce_loss(np.array([0.5]), np.array([0.5, 0.5]))


def test_bce_matches_fsum_oracle(rng):
    y = rng.uniform(0.01, 0.99, 37)
    l = rng.uniform(0, 1, 37)
    oracle = math.fsum(-(li * math.log(yi) + (1 - li) * math.log(1 - yi)) for yi, li in zip(y, l)) / 37
    assert bce_loss(y, l) == pytest.approx(oracle, rel=1e-13)
    logits = np.log(y / (1 - y))
    assert bce_with_logits(logits, l) == pytest.approx(oracle, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-6, 1 - 1e-6), st.floats(0, 1)), min_size=1, max_size=20))
def test_bce_non_negative(pairs):
    y = np.array([p[0] for p in pairs])
    l = np.array([p[1] for p in pairs])
    assert bce_loss(y, l) >= -1e-15
    # the minimum over y is reached at y = l
    assert bce_loss(y, l) >= bce_loss(np.clip(l, 1e-12, 1 - 1e-12), l) - 1e-12


# -- backward ---------------------------------------------------------------


def test_output_bias_gradient_zero_when_labels_match(rng):
    net = _net(rng)
    blocks, extra = _inputs(rng, 9)
    y, cache = forward_sequence(net, blocks, extra)
    g = backward_sequence(net, cache, y.copy())
    assert g["head.b"][0] == 0.0
    assert all(np.all(v == 0.0) for v in g.values())


def test_single_step_chain_rule(rng):
    net = _net(rng)
    blocks, extra = _inputs(rng, 1)
    y, cache = forward_sequence(net, blocks, extra)
    label = np.array([0.2])
    g = backward_sequence(net, cache, label)
    assert g["head.b"][0] == pytest.approx(y[0] - 0.2, rel=1e-14)
    np.testing.assert_allclose(g["head.W"][0], (y[0] - 0.2) * cache.Hs[1], rtol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = _net(rng, hidden=5)
    T = int(rng.integers(2, 21))
    blocks, extra = _inputs(rng, T)
    labels = np.arange(1, T + 1) / T
    report = check_gradients(net, blocks, extra, labels)
    assert report.max_rel_error < 1e-4, report.to_table(5)


def test_backward_rejects_stale_cache(rng):
    net = _net(rng)
    other = _net(rng)
    blocks, extra = _inputs(rng, 4)
    _, cache = forward_sequence(net, blocks, extra)
    with pytest.raises(ValueError):
        backward_sequence(other, cache, np.full(4, 0.5))
    with pytest.raises(ValueError):
        backward_sequence(net, cache, np.full(5, 0.5))


def test_gradient_check_detects_corruption(rng):
    net = _net(rng)
    blocks, extra = _inputs(rng, 6)
    labels = np.arange(1, 7) / 6
    _, cache = forward_sequence(net, blocks, extra)
    grads = backward_sequence(net, cache, labels)
    bad = {k: v.copy() for k, v in grads.items()}
    bad["gru.U_r"][1, 2] += 0.05
    report = check_gradients(net, blocks, extra, labels, analytic=bad)
    assert report.max_rel_error > 1e2 * report.tolerance
    assert report.worst.name == "gru.U_r" and report.worst.index == (1, 2)
    assert "FAIL" in report.to_table()


def test_gradient_check_single_step(rng):
    net = _net(rng)
    blocks, extra = _inputs(rng, 1)
    report = check_gradients(net, blocks, extra, np.array([1.0]))
    assert report.passed
    head_b = next(r for r in report.rows if r.name == "head.b")
    y, _ = forward_sequence(net, blocks, extra)
    assert head_b.analytic == pytest.approx(y[0] - 1.0, rel=1e-14)


def test_determinism(rng):
    seed = 99
    outs = []
    for _ in range(2):
        r = np.random.default_rng(seed)
        net = _net(r)
        blocks, extra = _inputs(r, 12)
        y, cache = forward_sequence(net, blocks, extra)
        g = backward_sequence(net, cache, np.arange(1, 13) / 12)
        p, _ = adam_step(net.params(), g, AdamState(lr=1e-3))
        outs.append((y, g, p))
    (y1, g1, p1), (y2, g2, p2) = outs
    assert y1.tobytes() == y2.tobytes()
    assert all(g1[k].tobytes() == g2[k].tobytes() for k in g1)
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)


# -- adam -------------------------------------------------------------------


def test_adam_first_step_magnitude():
    for g in (3.7, -0.002):
        p, state = adam_step({"w": np.array([1.0])}, {"w": np.array([g])}, AdamState(lr=1e-3))
        assert abs(p["w"][0] - 1.0) == pytest.approx(1e-3, rel=1e-4)
        assert np.sign(1.0 - p["w"][0]) == np.sign(g)
        assert state.t == 1


def test_adam_zero_gradient_no_change():
    params = {"w": np.array([0.3, -2.0])}
    p, state = adam_step(params, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert np.array_equal(p["w"], params["w"])
    assert state.t == 1


def test_adam_matches_scalar_recurrence():
    grads = [0.5, -1.25, 2.0]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    theta, m, v = 0.7, 0.0, 0.0
    expected = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        expected.append(theta)
    params, state = {"w": np.array([0.7])}, AdamState(lr=lr)
    for g, e in zip(grads, expected):
        params, state = adam_step(params, {"w": np.array([g])}, state)
        assert params["w"][0] == pytest.approx(e, rel=1e-14)
    assert state.t == 3
    assert np.all(state.v["w"] >= 0)


def test_adam_no_cross_parameter_coupling(rng):
    names = ["a", "b", "c"]
    params = {n: rng.normal(size=(2, 3)) for n in names}
    grads = {n: rng.normal(size=(2, 3)) for n in names}
    p1, _ = adam_step(params, grads, AdamState(lr=0.01))
    rev = list(reversed(names))
    p2, _ = adam_step({n: params[n] for n in rev}, {n: grads[n] for n in rev}, AdamState(lr=0.01))
    for n in names:
        assert p1[n].tobytes() == p2[n].tobytes()


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(lr=0.1))
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"x": np.zeros(2)}, AdamState(lr=0.1))


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = clip_by_global_norm(g, 1.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    assert clip_by_global_norm(g, 10.0)["a"][0] == 3.0
