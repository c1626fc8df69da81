import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dexrand import rlcore, tinynet
from dexrand.rlcore import GaeConfig, PpoConfig, RunningNormalizer, compute_gae, normalize_advantages, ppo_loss

from oracles import gae_explicit

finite = st.floats(-50, 50, allow_nan=False)
KINDS = (rlcore.TRUE_TERMINAL, rlcore.TRUNCATION)


# GAE --------------------------------------------------------------------------

def test_gae_zero_inputs():
    adv, tgt = compute_gae(np.zeros(6), np.zeros(7), rlcore.TRUNCATION)
    assert np.all(adv == 0) and np.all(tgt == 0)


def test_gae_two_step_example():
    adv, tgt = compute_gae([1.0, 2.0], [0.5, 1.0, 2.0], rlcore.TRUNCATION, GaeConfig(0.998, 0.95))
    d1 = 2 + 0.998 * 2 - 1
    d0 = 1 + 0.998 * 1 - 0.5
    assert (d0, d1) == pytest.approx((1.498, 2.996), abs=1e-12)
    np.testing.assert_allclose(adv, [d0 + 0.9481 * d1, d1], rtol=0, atol=1e-12)
    np.testing.assert_allclose(tgt, adv + [0.5, 1.0], rtol=0, atol=1e-12)


def test_true_terminal_ignores_bootstrap():
    a1, _ = compute_gae([1.0, 2.0], [0.5, 1.0, 123.0], rlcore.TRUE_TERMINAL)
    a2, _ = compute_gae([1.0, 2.0], [0.5, 1.0, 0.0], rlcore.TRUNCATION)
    np.testing.assert_array_equal(a1, a2)


@given(hnp.arrays(float, st.integers(1, 50), elements=finite), st.sampled_from(KINDS),
       st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_gae_matches_explicit_sum(rewards, kind, gamma, lam, seed):
    values = np.random.default_rng(seed).normal(0, 10, len(rewards) + 1)
    adv, tgt = compute_gae(rewards, values, kind, GaeConfig(gamma, lam))
    ref_adv, ref_tgt = gae_explicit(rewards, values, kind, gamma, lam)
    np.testing.assert_allclose(adv, ref_adv, rtol=0, atol=1e-10 * max(1.0, np.abs(ref_adv).max()))
    np.testing.assert_allclose(tgt, ref_tgt, rtol=0, atol=1e-10 * max(1.0, np.abs(ref_tgt).max()))


@given(hnp.arrays(float, st.integers(1, 40), elements=finite), st.sampled_from(KINDS), st.integers(0, 2**32 - 1))
def test_lambda_zero_is_one_step_td(rewards, kind, seed):
    values = np.random.default_rng(seed).normal(0, 5, len(rewards) + 1)
    adv, _ = compute_gae(rewards, values, kind, GaeConfig(0.99, 0.0))
    nxt = values[1:].copy()
    if kind == rlcore.TRUE_TERMINAL:
        nxt[-1] = 0.0
    np.testing.assert_array_equal(adv, rewards + 0.99 * nxt - values[:-1])


@given(hnp.arrays(float, st.integers(1, 40), elements=finite), st.integers(0, 2**32 - 1))
def test_lambda_one_is_discounted_return_minus_value(rewards, seed):
    g = 0.998
    values = np.random.default_rng(seed).normal(0, 5, len(rewards) + 1)
    adv, _ = compute_gae(rewards, values, rlcore.TRUNCATION, GaeConfig(g, 1.0))
    T = len(rewards)
    ret = np.array([sum(g**k * rewards[t + k] for k in range(T - t)) + g ** (T - t) * values[-1] for t in range(T)])
    np.testing.assert_allclose(adv, ret - values[:-1], rtol=0, atol=1e-10 * max(1.0, np.abs(ret).max()))


def test_gae_errors():
    with pytest.raises(ValueError, match="length"):
        compute_gae([1.0, 2.0], [0.0, 0.0], rlcore.TRUNCATION)
    with pytest.raises(ValueError, match="terminal kind"):
        compute_gae([1.0], [0.0, 0.0], "dropped")
    with pytest.raises(ValueError):
        GaeConfig(gamma=1.2).validate()


# PPO ----------------------------------------------------------------------------

def test_ratio_one_surrogate_is_mean_advantage(rng):
    lp = rng.normal(size=8)
    adv = rng.normal(size=8)
    t = ppo_loss(lp, lp, adv, np.zeros(8), np.zeros(8), np.zeros(8))
    assert t.surrogate == pytest.approx(adv.mean(), abs=1e-15)
    assert t.clip_fraction == 0 and t.approx_kl == 0


@pytest.mark.parametrize("ratio, adv, term", [(1.5, 1.0, 1.2), (0.5, -1.0, -0.8), (0.5, 1.0, 0.5), (1.5, -1.0, -1.5)])
def test_clip_examples(ratio, adv, term):
    t = ppo_loss([np.log(ratio)], [0.0], [adv], [0.0], [0.0], [0.0], PpoConfig(clip=0.2))
    assert t.surrogate == pytest.approx(term, abs=1e-12)
    assert t.clip_fraction == 1.0


def test_total_loss_composition(rng):
    n = 6
    args = [rng.normal(size=n) for _ in range(6)]
    cfg = PpoConfig(clip=0.2, entropy_coef=0.01, value_coef=0.5)
    t = ppo_loss(*args, cfg)
    assert t.value_loss == pytest.approx(np.mean((args[3] - args[4]) ** 2), abs=1e-14)
    assert t.entropy == pytest.approx(args[5].mean(), abs=1e-14)
    assert t.loss == pytest.approx(-t.surrogate + 0.5 * t.value_loss - 0.01 * t.entropy, abs=1e-14)
    assert t.approx_kl == pytest.approx(np.mean(args[1] - args[0]), abs=1e-14)


@given(hnp.arrays(float, 5, elements=st.floats(-2, 2)), st.floats(-30, 30), st.integers(0, 2**32 - 1))
def test_surrogate_invariant_to_common_logp_shift(lp_new, shift, seed):
    rng = np.random.default_rng(seed)
    lp_old, adv = rng.normal(size=5), rng.normal(size=5)
    a = ppo_loss(lp_new, lp_old, adv, np.zeros(5), np.zeros(5), np.zeros(5))
    b = ppo_loss(lp_new + shift, lp_old + shift, adv, np.zeros(5), np.zeros(5), np.zeros(5))
    assert b.surrogate == pytest.approx(a.surrogate, rel=1e-9, abs=1e-12)


def test_ppo_input_derivatives_match_finite_differences(rng):
    n = 7
    base = [rng.normal(0, 0.3, n), rng.normal(0, 0.3, n), rng.normal(size=n), rng.normal(size=n),
            rng.normal(size=n), rng.normal(size=n)]
    t = ppo_loss(*base)
    for slot, analytic in ((0, t.d_logp), (3, t.d_value), (5, t.d_entropy)):
        for k in range(n):
            up = [a.copy() for a in base]
            down = [a.copy() for a in base]
            up[slot][k] += 1e-6
            down[slot][k] -= 1e-6
            fd = (ppo_loss(*up).loss - ppo_loss(*down).loss) / 2e-6
            assert fd == pytest.approx(analytic[k], abs=1e-8)


def test_logit_gradient_matches_finite_differences(rng):
    """Loss derivatives chained through the categorical head."""
    B, M, K = 4, 3, 11
    logits = rng.normal(size=(B, M, K))
    bins = rng.integers(0, K, (B, M))
    lp_old = tinynet.action_stats(logits, bins)[0] + rng.normal(0, 0.1, B)
    adv, v, vt = rng.normal(size=B), rng.normal(size=B), rng.normal(size=B)

    def loss(lg):
        lp, ent = tinynet.action_stats(lg, bins)
        return ppo_loss(lp, lp_old, adv, v, vt, ent)

    t = loss(logits)
    g = rlcore.policy_logit_grad(logits, bins, t.d_logp, t.d_entropy)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        fd = (loss(up).loss - loss(down).loss) / 2e-6
        assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-6)


def test_ppo_rejects_bad_inputs():
    with pytest.raises(ValueError, match="same shape"):
        ppo_loss([0.0], [0.0, 1.0], [1.0], [0.0], [0.0], [0.0])
    with pytest.raises(FloatingPointError):
        ppo_loss([np.nan], [0.0], [1.0], [0.0], [0.0], [0.0])
    with pytest.raises(ValueError):
        PpoConfig(clip=0.0).validate()
    with pytest.raises(ValueError):
        PpoConfig(entropy_coef=-1.0).validate()


# advantage normalization -----------------------------------------------------------

def test_normalize_examples():
    np.testing.assert_array_equal(normalize_advantages([1.0, -1.0]), [1.0, -1.0])
    np.testing.assert_array_equal(normalize_advantages([3.0, 3.0, 3.0]), [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        normalize_advantages([1.0])


@given(hnp.arrays(float, st.integers(2, 200), elements=st.floats(-1e3, 1e3)))
def test_normalized_advantages_are_standardized(adv):
    if np.std(adv) < 1e-6:
        return
    out = normalize_advantages(adv)
    assert abs(out.mean()) < 1e-12
    assert abs(out.std() - 1.0) < 1e-9


# running normalizer -------------------------------------------------------------

def test_single_batch_statistics(rng):
    x = rng.normal(3.0, 2.0, (500, 4))
    n = rlcore.normalizer_update(RunningNormalizer.create(4), x)
    np.testing.assert_allclose(n.mean, x.mean(0), rtol=0, atol=1e-12)
    np.testing.assert_allclose(n.var, x.var(0), rtol=0, atol=1e-12)
    assert n.count == 500


@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_merge_equals_full_batch(n1, n2, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(rng.normal(0, 100, 3), rng.uniform(0.01, 10, 3), (n1 + n2, 3))
    full = rlcore.normalizer_update(RunningNormalizer.create(3), x)
    half = rlcore.normalizer_update(rlcore.normalizer_update(RunningNormalizer.create(3), x[:n1]), x[n1:])
    np.testing.assert_allclose(half.mean, full.mean, rtol=0, atol=1e-9)
    np.testing.assert_allclose(half.var, full.var, rtol=0, atol=1e-9 * max(1.0, full.var.max()))


def test_constant_dimension_uses_floor():
    n = rlcore.normalizer_update(RunningNormalizer.create(2), np.array([[1.0, 0.0], [1.0, 2.0]]))
    assert n.var[0] == 0.0 and n.std[0] == 1e-8
    out = rlcore.normalizer_apply(n, np.array([1.0, 1.0]))
    assert out[0] == 0.0 and np.all(np.isfinite(out))


def test_apply_examples(rng):
    x = rng.normal(2.0, 3.0, (1000, 2))
    n = rlcore.normalizer_update(RunningNormalizer.create(2), x)
    np.testing.assert_array_equal(rlcore.normalizer_apply(n, n.mean), [0.0, 0.0])
    np.testing.assert_array_equal(rlcore.normalizer_apply(n, n.mean + 100 * n.std), [5.0, 5.0])
    np.testing.assert_array_equal(rlcore.normalizer_apply(n, n.mean - 100 * n.std), [-5.0, -5.0])
    z = rlcore.normalizer_apply(n, x, clip=False)
    np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-6)
    np.testing.assert_allclose(z.std(0), 1.0, atol=1e-6)


@given(hnp.arrays(float, 20, elements=st.floats(-1e4, 1e4)), hnp.arrays(float, 5, elements=st.floats(-1e4, 1e4)))
def test_denormalize_inverts_unclipped_apply(batch, x):
    n = rlcore.normalizer_update(RunningNormalizer.create(()), batch)
    back = rlcore.normalizer_denormalize(n, rlcore.normalizer_apply(n, x, clip=False))
    np.testing.assert_allclose(back, x, rtol=1e-9, atol=1e-9)


def test_normalizer_errors():
    n = RunningNormalizer.create(3)
    with pytest.raises(ValueError, match="not seen"):
        rlcore.normalizer_apply(n, np.zeros(3))
    with pytest.raises(ValueError, match="trailing shape"):
        rlcore.normalizer_update(n, np.zeros((4, 2)))
    with pytest.raises(ValueError, match="nonempty"):
        rlcore.normalizer_update(n, np.zeros((0, 3)))


@given(hnp.arrays(float, (30, 2), elements=st.floats(-1e3, 1e3)), st.integers(0, 2**32 - 1))
def test_apply_output_bounded_by_clip(batch, seed):
    n = rlcore.normalizer_update(RunningNormalizer.create(2), batch)
    x = np.random.default_rng(seed).normal(0, 1e6, (10, 2))
    assert np.all(np.abs(rlcore.normalizer_apply(n, x)) <= 5.0)
