import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dexrand import tinynet
from dexrand.tinynet import AdamState, HiddenState, RecurrentNet, init_net, net_backward, net_forward

from oracles import max_relative_error


def random_net(rng, D=3, H=5, R=4, K=6, scale=0.7):
    net = init_net(rng, D, H, R, K, head_scale=1.0)
    net.b1 = rng.normal(0, 0.3, H)
    net.bl = rng.normal(0, scale, 4 * R)
    net.Wo = rng.normal(0, scale, (K, R))
    net.bo = rng.normal(0, scale, K)
    return net


def zero_net(D=3, H=5, R=4, K=6):
    return RecurrentNet(np.zeros((H, D)), np.zeros(H), np.zeros((4 * R, H)), np.zeros((4 * R, R)),
                        np.zeros(4 * R), np.zeros((K, R)), np.zeros(K))


def random_hidden(rng, B, R):
    return HiddenState(rng.normal(0, 0.5, (B, R)), np.tanh(rng.normal(0, 0.5, (B, R))))


def scalar_objective(net, obs, h0, gy, gc, gh):
    out, hT, _ = net_forward(net, obs, h0)
    return np.sum(gy * out) + np.sum(gc * hT.c) + np.sum(gh * hT.h)


# forward ------------------------------------------------------------------------

def test_zero_weights_give_uniform_logits_and_zero_state(rng):
    net = zero_net()
    out, hT, _ = net_forward(net, rng.normal(size=(4, 2, 3)), HiddenState.zeros(2, 4))
    assert np.all(out == 0.0)
    assert np.all(hT.c == 0.0) and np.all(hT.h == 0.0)


def test_constant_input_without_recurrence_repeats_outputs(rng):
    net = random_net(rng)
    net.Wh[:] = 0.0
    net.bl[4:8] = -1e3  # forget gate shut as well, otherwise the cell state carries over
    obs = np.tile(rng.normal(size=3), (2, 1))
    out, _, _ = net_forward(net, obs, HiddenState.zeros((), 4))
    np.testing.assert_array_equal(out[0], out[1])


def test_unbatched_matches_batched(rng):
    net = random_net(rng)
    obs = rng.normal(size=(5, 3))
    h0 = random_hidden(rng, 1, 4)
    out1, hT1, _ = net_forward(net, obs, HiddenState(h0.c[0], h0.h[0]))
    out2, hT2, _ = net_forward(net, obs[:, None], h0)
    np.testing.assert_array_equal(out1, out2[:, 0])
    np.testing.assert_array_equal(hT1.h, hT2.h[0])


def test_step_matches_sequence_forward(rng):
    net = random_net(rng)
    obs = rng.normal(size=(6, 2, 3))
    h = random_hidden(rng, 2, 4)
    out, hT, _ = net_forward(net, obs, h)
    for t in range(6):
        y, h = tinynet.net_step(net, obs[t], h)
        np.testing.assert_allclose(y, out[t], rtol=0, atol=1e-14)
    np.testing.assert_allclose(h.c, hT.c, rtol=0, atol=1e-14)


def test_forward_is_deterministic(rng):
    net = random_net(rng)
    obs, h0 = rng.normal(size=(7, 3, 3)), random_hidden(rng, 3, 4)
    a, _, _ = net_forward(net, obs, h0)
    b, _, _ = net_forward(net, obs, h0)
    assert a.tobytes() == b.tobytes()


def test_truncation_history_before_chunk_is_irrelevant(rng):
    """Outputs of a chunk depend on its history only through h0."""
    net = random_net(rng)
    h0 = random_hidden(rng, 1, 4)
    chunk = rng.normal(size=(5, 1, 3))
    a, _, _ = net_forward(net, chunk, h0)
    # different pre-chunk history, same carried state
    net_forward(net, rng.normal(size=(9, 1, 3)), random_hidden(rng, 1, 4))
    b, _, _ = net_forward(net, chunk, h0)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("bad", ["width", "T0", "hidden"])
def test_shape_errors_name_the_layer(rng, bad):
    net = random_net(rng)
    obs, h0 = rng.normal(size=(3, 2, 3)), HiddenState.zeros(2, 4)
    if bad == "width":
        obs, layer = rng.normal(size=(3, 2, 4)), "dense"
    elif bad == "T0":
        obs, layer = np.zeros((0, 2, 3)), "dense"
    else:
        h0, layer = HiddenState.zeros(2, 5), "lstm"
    with pytest.raises(tinynet.DimensionError, match=layer):
        net_forward(net, obs, h0)


def test_check_rejects_bad_shapes_and_nan(rng):
    net = random_net(rng)
    net.Wx = net.Wx[:, :-1]
    with pytest.raises(tinynet.DimensionError, match="Wx"):
        net.check()
    net = random_net(rng)
    net.bo[0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        net.check()


def test_init_matches_documented_scheme(rng):
    net = init_net(rng, 10, 8, 4, 3)
    assert np.abs(net.W1).max() <= 1 / math.sqrt(10)
    assert np.abs(net.Wx).max() <= 1 / math.sqrt(8)
    assert np.abs(net.Wh).max() <= 1 / math.sqrt(4)
    np.testing.assert_array_equal(net.bl, np.r_[np.zeros(4), np.ones(4), np.zeros(8)])
    assert np.all(net.Wo == 0) and np.all(net.bo == 0)


def test_policy_and_value_share_no_storage(rng):
    p = tinynet.init_params(rng, 4, 6, 2, 11, 8, 4)
    for a in p.policy.arrays().values():
        for b in p.value.arrays().values():
            assert not np.shares_memory(a, b)
    assert p.policy.output_dim == 22 and p.value.output_dim == 1


# backward -----------------------------------------------------------------------

def numeric_gradients(net, f, eps=1e-5):
    grads = {}
    for name, arr in net.arrays().items():
        g = np.zeros_like(arr)
        for k in range(arr.size):
            orig = arr.flat[k]
            arr.flat[k] = orig + eps
            up = f()
            arr.flat[k] = orig - eps
            down = f()
            arr.flat[k] = orig
            g.flat[k] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    obs, h0 = rng.normal(size=(10, 2, 3)), random_hidden(rng, 2, 4)
    gy, gc, gh = rng.normal(size=(10, 2, 6)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    _, _, cache = net_forward(net, obs, h0)
    grads, _ = net_backward(net, cache, gy, HiddenState(gc, gh))
    numeric = numeric_gradients(net, lambda: scalar_objective(net, obs, h0, gy, gc, gh))
    assert max_relative_error({"n": grads}, {"n": numeric}) < 1e-4


def test_h0_gradient_matches_finite_differences(rng):
    net = random_net(rng)
    obs = rng.normal(size=(4, 1, 3))
    h0 = random_hidden(rng, 1, 4)
    gy = rng.normal(size=(4, 1, 6))
    _, _, cache = net_forward(net, obs, h0)
    _, gh0 = net_backward(net, cache, gy)
    for part, analytic in (("c", gh0.c), ("h", gh0.h)):
        arr = getattr(h0, part)
        for k in range(arr.size):
            orig = arr.flat[k]
            arr.flat[k] = orig + 1e-6
            up = scalar_objective(net, obs, h0, gy, 0.0, 0.0)
            arr.flat[k] = orig - 1e-6
            down = scalar_objective(net, obs, h0, gy, 0.0, 0.0)
            arr.flat[k] = orig
            assert abs((up - down) / 2e-6 - analytic.flat[k]) < 1e-7


def test_zero_output_gradient_gives_zero_gradients(rng):
    net = random_net(rng)
    _, _, cache = net_forward(net, rng.normal(size=(5, 2, 3)), random_hidden(rng, 2, 4))
    grads, gh0 = net_backward(net, cache, np.zeros((5, 2, 6)))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(gh0.c == 0) and np.all(gh0.h == 0)


@given(st.floats(-8, 8).filter(lambda x: abs(x) > 1e-3), st.integers(0, 2**32 - 1))
def test_backward_is_linear_in_output_gradient(k, seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    _, _, cache = net_forward(net, rng.normal(size=(4, 2, 3)), random_hidden(rng, 2, 4))
    gy = rng.normal(size=(4, 2, 6))
    g1, _ = net_backward(net, cache, gy)
    g2, _ = net_backward(net, cache, k * gy)
    for n in g1:
        np.testing.assert_allclose(g2[n], k * g1[n], rtol=1e-12, atol=1e-12)


def test_stale_cache_is_rejected(rng):
    net = random_net(rng)
    _, _, cache = net_forward(net, rng.normal(size=(3, 1, 3)), HiddenState.zeros(1, 4))
    grads, _ = net_backward(net, cache, np.ones((3, 1, 6)))
    tinynet.adam_step(net, grads, AdamState.for_net(net))
    with pytest.raises(tinynet.StaleCacheError):
        net_backward(net, cache, np.ones((3, 1, 6)))
    with pytest.raises(tinynet.StaleCacheError):
        net_backward(net.copy(), cache, np.ones((3, 1, 6)))


# Adam ---------------------------------------------------------------------------

def scalar_net(value=0.0):
    z = np.zeros
    return RecurrentNet(np.array([[value]]), z(1), z((4, 1)), z((4, 1)), z(4), z((1, 1)), z(1))


def grads_like(net, fill=0.0):
    return {n: np.full_like(a, fill) for n, a in net.arrays().items()}


def test_adam_zero_gradient_leaves_params_and_counts_step():
    net = scalar_net(2.0)
    adam = AdamState.for_net(net)
    tinynet.adam_step(net, grads_like(net), adam)
    assert net.W1[0, 0] == 2.0 and adam.step == 1


def test_adam_first_step_moves_by_lr():
    net = scalar_net(0.0)
    adam = AdamState.for_net(net)
    assert (adam.lr, adam.beta1, adam.beta2, adam.eps) == (3e-4, 0.9, 0.999, 1e-8)
    tinynet.adam_step(net, grads_like(net, 1.0), adam)
    # m_hat = 1, v_hat = 1: update = lr / (1 + eps)
    assert net.W1[0, 0] == pytest.approx(-3e-4 / (1 + 1e-8), rel=1e-14)


def test_adam_constant_gradient_keeps_step_size():
    net = scalar_net(0.0)
    adam = AdamState.for_net(net, lr=0.01)
    for _ in range(50):
        tinynet.adam_step(net, grads_like(net, 0.3), adam)
    assert net.W1[0, 0] == pytest.approx(-0.5, rel=1e-6)


@given(st.integers(0, 2**32 - 1))
def test_adam_with_zero_lr_never_moves(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    before = net.copy()
    adam = AdamState.for_net(net, lr=0.0)
    for _ in range(3):
        tinynet.adam_step(net, {n: rng.normal(0, 100, a.shape) for n, a in net.arrays().items()}, adam)
    for n in net.names:
        np.testing.assert_array_equal(getattr(net, n), getattr(before, n))


def test_adam_rejects_non_finite_gradient_without_touching_state(rng):
    net = random_net(rng)
    before = net.copy()
    adam = AdamState.for_net(net)
    grads = grads_like(net, 1.0)
    grads["Wh"][0, 0] = np.inf
    with pytest.raises(tinynet.NonFiniteGradientError, match="Wh"):
        tinynet.adam_step(net, grads, adam)
    assert adam.step == 0 and net.version == before.version
    np.testing.assert_array_equal(net.Wh, before.Wh)


def test_adam_rejects_wrong_shape(rng):
    net = random_net(rng)
    grads = grads_like(net)
    grads["b1"] = np.zeros(2)
    with pytest.raises(tinynet.DimensionError):
        tinynet.adam_step(net, grads, AdamState.for_net(net))


# categorical head ---------------------------------------------------------------

def test_uniform_logits_entropy():
    bins, logp, ent = tinynet.sample_action(np.zeros((5, 11)), np.random.default_rng(0))
    assert ent == pytest.approx(5 * math.log(11), abs=1e-12)
    assert logp == pytest.approx(-5 * math.log(11), abs=1e-12)
    assert bins.shape == (5,)


def test_dominant_logit_is_deterministic(rng):
    logits = np.zeros((3, 11))
    target = np.array([2, 7, 10])
    logits[np.arange(3), target] = 1e9
    for _ in range(20):
        bins, logp, ent = tinynet.sample_action(logits, rng)
        np.testing.assert_array_equal(bins, target)
        assert abs(ent) < 1e-12 and abs(logp) < 1e-12


def test_sampling_frequencies_match_softmax():
    from scipy import stats
    rng = np.random.default_rng(7)
    logits = rng.normal(0, 1.0, (2, 11))
    p = np.exp(tinynet.log_softmax(logits))
    n = 1_000_000
    rows = 1000
    counts = np.zeros((2, 11))
    gens = [np.random.default_rng(s) for s in range(rows)]
    for _ in range(n // rows):
        bins, _, _ = tinynet.sample_actions(np.broadcast_to(logits, (rows, 2, 11)), gens)
        for m in range(2):
            counts[m] += np.bincount(bins[:, m], minlength=11)
    for m in range(2):
        np.testing.assert_allclose(counts[m] / n, p[m], atol=0.01 * p[m].max())
        assert stats.chisquare(counts[m], n * p[m]).pvalue > 1e-3


def test_greedy_picks_argmax(rng):
    logits = rng.normal(size=(4, 3, 11))
    bins, _, _ = tinynet.sample_actions(logits, [rng] * 4, greedy=True)
    np.testing.assert_array_equal(bins, logits.argmax(-1))


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 300))
def test_softmax_sums_to_one(seed, scale):
    logits = np.random.default_rng(seed).normal(0, scale, (4, 11))
    p = np.exp(tinynet.log_softmax(logits))
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=0, atol=1e-12)


def test_action_stats_sums_coordinates(rng):
    logits = rng.normal(size=(3, 11))
    bins = np.array([1, 4, 9])
    lp = tinynet.log_softmax(logits)
    logp, ent = tinynet.action_stats(logits, bins)
    assert logp == pytest.approx(lp[0, 1] + lp[1, 4] + lp[2, 9], abs=1e-14)
    assert ent == pytest.approx(-np.sum(np.exp(lp) * lp), abs=1e-14)


# checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(rng, tmp_path):
    net = random_net(rng)
    adam = AdamState.for_net(net, lr=1e-3)
    _, _, cache = net_forward(net, rng.normal(size=(3, 1, 3)), HiddenState.zeros(1, 4))
    grads, _ = net_backward(net, cache, rng.normal(size=(3, 1, 6)))
    tinynet.adam_step(net, grads, adam)
    arrays = {**tinynet.net_to_arrays("p", net), **tinynet.adam_to_arrays("a", adam)}
    tinynet.save_arrays(tmp_path / "ck.npz", arrays, {"batch": 3})
    loaded, meta = tinynet.load_arrays(tmp_path / "ck.npz")
    assert meta["batch"] == 3
    net2 = tinynet.net_from_arrays("p", loaded)
    adam2 = tinynet.adam_from_arrays("a", loaded, net.names)
    assert net2.version == net.version and adam2.step == adam.step and adam2.lr == adam.lr
    for n in net.names:
        assert getattr(net2, n).tobytes() == getattr(net, n).tobytes()
        assert adam2.m[n].tobytes() == adam.m[n].tobytes()
        assert adam2.v[n].tobytes() == adam.v[n].tobytes()


def test_checkpoint_version_mismatch(rng, tmp_path, monkeypatch):
    tinynet.save_arrays(tmp_path / "ck.npz", tinynet.net_to_arrays("p", random_net(rng)))
    monkeypatch.setattr(tinynet, "CHECKPOINT_VERSION", 99)
    with pytest.raises(ValueError, match="unsupported checkpoint format"):
        tinynet.load_arrays(tmp_path / "ck.npz")
