import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dexrand import chunkreplay, rlcore, tinynet, trainer
from dexrand.chunkreplay import chunk_episode, iterate_minibatches, refresh_hidden, seal
from dexrand.tinynet import HiddenState

from oracles import random_buffer, replay_from_start, small_nets

R = 3


def transitions(L, seed=0):
    rng = np.random.default_rng(seed)
    return {"x": rng.normal(size=(L, 2)), "step": np.arange(L)}


def hidden(n, fill=0.0):
    return {net: HiddenState(np.full((n, R), fill), np.full((n, R), fill)) for net in chunkreplay.NETS}


def buffer_of(lengths, refresh=True):
    chunks = []
    for ep, L in enumerate(lengths):
        chunks += chunk_episode(ep, transitions(L, ep), hidden(-(-L // 10), float(ep)))
    return seal(chunks, refresh=refresh)


# chunking -------------------------------------------------------------------------

def test_25_steps_make_three_chunks():
    chunks = chunk_episode(0, transitions(25), hidden(3))
    assert [c.length for c in chunks] == [10, 10, 5]
    assert [c.index for c in chunks] == [0, 1, 2]
    assert [c.has_successor for c in chunks] == [True, True, False]
    last = chunks[-1]
    np.testing.assert_array_equal(last.data["step"][:5], np.arange(20, 25))
    assert np.all(last.data["x"][5:] == 0) and not last.mask[5:].any()


def test_exactly_ten_steps_is_one_chunk():
    (c,) = chunk_episode(3, transitions(10), hidden(1))
    assert c.length == 10 and not c.has_successor


def test_first_chunk_carries_zero_state():
    c = chunk_episode(0, transitions(12), hidden(2))[0]
    assert np.all(c.h0["policy"].c == 0) and np.all(c.h0["value"].h == 0)


def test_empty_episode_has_no_chunks():
    assert chunk_episode(0, {"x": np.zeros((0, 2))}, hidden(0)) == []


def test_missing_hidden_state_is_an_integrity_error():
    with pytest.raises(chunkreplay.IntegrityError, match="hidden"):
        chunk_episode(0, transitions(25), hidden(2))
    with pytest.raises(chunkreplay.IntegrityError, match="lengths"):
        chunk_episode(0, {"a": np.zeros(3), "b": np.zeros(4)}, hidden(1))


def test_seal_detects_broken_chains():
    chunks = chunk_episode(0, transitions(25), hidden(3))
    with pytest.raises(chunkreplay.IntegrityError, match="successor"):
        seal(chunks[:2])
    with pytest.raises(chunkreplay.IntegrityError, match="predecessor"):
        seal(chunks[1:])
    with pytest.raises(chunkreplay.IntegrityError, match="duplicate"):
        seal(chunks + chunks[:1])


@given(st.lists(st.integers(1, 60), min_size=1, max_size=8))
def test_chunking_conserves_transitions(lengths):
    buf = buffer_of(lengths)
    assert buf.valid_transitions() == sum(lengths)
    for ep, L in enumerate(lengths):
        sel = buf.episode == ep
        steps = buf.data["step"][sel][buf.mask[sel]]
        np.testing.assert_array_equal(np.sort(steps), np.arange(L))
        # each episode: indices 0..n-1, one chunk without predecessor, one without successor
        assert sorted(buf.level[sel]) == list(range(-(-L // 10)))
        assert np.sum(buf.successor[sel] < 0) == 1


# iteration ------------------------------------------------------------------------

def test_single_episode_minibatch_one_is_in_order():
    buf = buffer_of([30])
    stream = iterate_minibatches(buf, 1, np.random.default_rng(0))
    assert [int(m[0]) for m in stream] == [0, 1, 2]


def test_full_minibatch_is_sorted_by_level():
    buf = buffer_of([25, 7, 40, 12])
    (mb,) = iterate_minibatches(buf, buf.size, np.random.default_rng(1))
    assert sorted(mb.tolist()) == list(range(buf.size))
    assert np.all(np.diff(buf.level[mb]) >= 0)


def test_minibatch_size_errors():
    buf = buffer_of([25])
    with pytest.raises(ValueError, match="exceeds"):
        iterate_minibatches(buf, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        iterate_minibatches(buf, 0, np.random.default_rng(0))


def test_order_constraint_and_partition_over_seeds():
    rng = np.random.default_rng(5)
    lengths = rng.integers(1, 45, 12)
    buf = buffer_of(lengths)
    orders = set()
    for seed in range(100):
        stream = iterate_minibatches(buf, 4, np.random.default_rng(seed))
        flat = np.concatenate(stream)
        assert sorted(flat.tolist()) == list(range(buf.size))
        position = np.empty(buf.size, dtype=int)
        position[flat] = np.arange(buf.size)
        for i, j in enumerate(buf.successor):
            if j >= 0:
                assert position[i] < position[j]
        orders.add(tuple(flat))
    assert len(orders) > 90


def test_waves_group_levels():
    buf = buffer_of([25, 15])
    waves = chunkreplay.waves(buf, np.arange(buf.size))
    assert [buf.level[w].tolist() for w in waves] == [[0, 0], [1, 1], [2]]


# refresh --------------------------------------------------------------------------

def test_refresh_without_successor_is_noop():
    buf = buffer_of([8, 25])
    before = {n: h.copy() for n, h in buf.h0.items()}
    final = {n: HiddenState(np.ones(R), np.ones(R)) for n in chunkreplay.NETS}
    refresh_hidden(buf, 0, final)  # episode 0 is a single chunk
    for n in chunkreplay.NETS:
        np.testing.assert_array_equal(buf.h0[n].h, before[n].h)


def test_refresh_writes_successor_only():
    buf = buffer_of([25])
    final = {n: HiddenState(np.full(R, 7.0), np.full(R, 8.0)) for n in chunkreplay.NETS}
    refresh_hidden(buf, 0, final)
    assert np.all(buf.h0["policy"].c[1] == 7.0) and np.all(buf.h0["value"].h[1] == 8.0)
    assert np.all(buf.h0["policy"].c[[0, 2]] == 0.0)
    assert np.all(buf.h0_generated["policy"].c == 0.0)


def test_refresh_disabled_keeps_generation_states():
    buf = buffer_of([25], refresh=False)
    final = {n: HiddenState(np.ones(R), np.ones(R)) for n in chunkreplay.NETS}
    refresh_hidden(buf, 0, final)
    np.testing.assert_array_equal(buf.h0["policy"].c, buf.h0_generated["policy"].c)


def test_refresh_across_generations_is_stale():
    buf = buffer_of([25])
    buf.generation[1] = buf.current_generation + 1
    final = {n: HiddenState(np.ones(R), np.ones(R)) for n in chunkreplay.NETS}
    with pytest.raises(chunkreplay.StalenessError):
        refresh_hidden(buf, 0, final)


def test_last_valid_picks_state_after_last_step():
    states = np.arange(4 * 2 * 1, dtype=float).reshape(4, 2, 1)  # T = 3
    mask = np.array([[True, True, True], [True, False, False]])
    np.testing.assert_array_equal(chunkreplay.last_valid(states, mask)[:, 0], [states[3, 0, 0], states[1, 1, 0]])


# oracles against a frozen network ---------------------------------------------------

def frozen_case(seed, refresh=True):
    rng = np.random.default_rng(seed)
    nets = small_nets(rng, 3, 4, 5, R)
    lengths = rng.integers(1, 48, 6).tolist()
    buf = random_buffer(rng, nets, lengths, multi_chunk=True)
    buf.refresh = refresh
    return nets, buf, lengths, rng


def episode_obs(buf, ep, key):
    sel = np.flatnonzero(buf.episode == ep)
    sel = sel[np.argsort(buf.level[sel])]
    return buf.data[key][sel][buf.mask[sel]], sel


@pytest.mark.parametrize("seed", range(4))
def test_zero_lr_pass_matches_from_start_recomputation(seed):
    nets, buf, lengths, rng = frozen_case(seed)
    start = {n: buf.h0[n].copy() for n in chunkreplay.NETS}
    for mb in iterate_minibatches(buf, 3, rng):
        trainer.minibatch_gradients(nets, buf, mb, rlcore.PpoConfig())
    for ep in range(len(lengths)):
        for which, key in (("policy", "obs_p"), ("value", "obs_v")):
            obs, sel = episode_obs(buf, ep, key)
            h0 = HiddenState(start[which].c[sel[0]], start[which].h[sel[0]])
            c, h, _ = replay_from_start(getattr(nets, which), obs, h0, 10)
            np.testing.assert_allclose(buf.h0[which].c[sel], c, rtol=0, atol=1e-12)
            np.testing.assert_allclose(buf.h0[which].h[sel], h, rtol=0, atol=1e-12)


def test_without_refresh_states_stay_stale():
    nets, buf, lengths, rng = frozen_case(11, refresh=False)
    for mb in iterate_minibatches(buf, 3, rng):
        trainer.minibatch_gradients(nets, buf, mb, rlcore.PpoConfig())
    for n in chunkreplay.NETS:
        np.testing.assert_array_equal(buf.h0[n].c, buf.h0_generated[n].c)
    # and the stale states really differ from the true recurrent ones
    obs, sel = episode_obs(buf, int(np.argmax(lengths)), "obs_p")
    c, _, _ = replay_from_start(nets.policy, obs, HiddenState(buf.h0["policy"].c[sel[0]],
                                                              buf.h0["policy"].h[sel[0]]), 10)
    assert np.abs(buf.h0["policy"].c[sel] - c).max() > 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_chained_replay_reproduces_full_episode(seed):
    nets, buf, lengths, rng = frozen_case(seed + 20)
    chunk_out = {}
    for wave in chunkreplay.waves(buf, np.arange(buf.size)):
        obs = np.swapaxes(buf.data["obs_p"][wave], 0, 1)
        h0 = HiddenState(buf.h0["policy"].c[wave].copy(), buf.h0["policy"].h[wave].copy())
        out, _, cache = tinynet.net_forward(nets.policy, obs, h0)
        mask = buf.mask[wave]
        final = HiddenState(chunkreplay.last_valid(cache.c, mask), chunkreplay.last_valid(cache.h, mask))
        refresh_hidden(buf, wave, {"policy": final, "value": final})
        for k, i in enumerate(wave):
            chunk_out[int(i)] = out[:, k][mask[k]]
    for ep in range(len(lengths)):
        obs, sel = episode_obs(buf, ep, "obs_p")
        full, _, _ = tinynet.net_forward(nets.policy, obs, HiddenState(buf.h0_generated["policy"].c[sel[0]],
                                                                        buf.h0_generated["policy"].h[sel[0]]))
        chained = np.concatenate([chunk_out[int(i)] for i in sel])
        np.testing.assert_allclose(chained, full, rtol=0, atol=1e-10)


def one_pass(nets, buf, rng, lr):
    adam = tinynet.AdamState.for_net(nets.policy, lr)
    stream = iterate_minibatches(buf, 3, rng)
    for mb in stream:
        res = trainer.minibatch_gradients(nets, buf, mb, rlcore.PpoConfig())
        tinynet.adam_step(nets.policy, res.grads_policy, adam)
    return stream


def test_nonzero_lr_moves_refreshed_states():
    nets, buf, lengths, rng = frozen_case(3)
    one_pass(nets, buf, rng, 0.0)  # stored states now match the current network
    settled = buf.h0["policy"].copy()
    one_pass(nets, buf, rng, 0.0)
    np.testing.assert_allclose(buf.h0["policy"].c, settled.c, rtol=0, atol=1e-12)
    stream = one_pass(nets, buf, rng, 1e-2)
    # successors of the first minibatch were refreshed before any update took effect
    early = buf.successor[stream[0]]
    early = early[early >= 0]
    moved = np.setdiff1d(np.flatnonzero(buf.level > 0), early)
    assert len(moved) > 5
    assert np.all(np.abs(buf.h0["policy"].c[moved] - settled.c[moved]).max(axis=1) > 0)
    np.testing.assert_allclose(buf.h0["policy"].c[early], settled.c[early], rtol=0, atol=1e-12)
