"""Slow, obviously-correct reference implementations shared by the test modules."""
from __future__ import annotations

import numpy as np

from dexrand import chunkreplay, rlcore, tinynet, trainer
from dexrand.tinynet import HiddenState, NetParams


def gae_explicit(rewards, values, kind, gamma, lam):
    """Advantages as the explicit sum over l of (gamma*lam)^l * delta_{t+l}; O(T^2)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = len(rewards)
    nxt = values[1:].copy()
    if kind == rlcore.TRUE_TERMINAL and T:
        nxt[-1] = 0.0
    delta = [rewards[t] + gamma * nxt[t] - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        adv[t] = sum((gamma * lam) ** l * delta[t + l] for l in range(T - t))
    return adv, adv + values[:-1]


# gradient check ----------------------------------------------------------------

GRAD_DIMS = dict(policy_dim=3, value_dim=4, dense=5, lstm=3)


def small_nets(rng: np.random.Generator, policy_dim=3, value_dim=4, dense=5, lstm=3) -> NetParams:
    """Nets with random (non-zero) heads and biases so every weight gets gradient."""
    nets = tinynet.init_params(rng, policy_dim, value_dim, trainer.N_ACT, trainer.N_BINS, dense, lstm)
    for net in (nets.policy, nets.value):
        R = net.hidden
        net.Wo = rng.normal(0.0, 1.0 / np.sqrt(R), net.Wo.shape)
        net.bo = rng.normal(0.0, 0.1, net.bo.shape)
        net.b1 = rng.normal(0.0, 0.3, net.b1.shape)
        net.bl = net.bl + rng.normal(0.0, 0.3, net.bl.shape)
    return nets


def random_buffer(rng, nets: NetParams, lengths, T=10, multi_chunk=False):
    """Buffer of synthetic transitions, one episode per entry of ``lengths``.

    Old log-probabilities sit near the current policy's so both clipped and
    unclipped branches of the surrogate occur.
    """
    Dp, Dv, R = nets.policy.input_dim, nets.value.input_dim, nets.policy.hidden
    chunks = []
    for ep, L in enumerate(lengths):
        n = -(-L // T)
        obs_p = rng.normal(size=(L, Dp))
        obs_v = rng.normal(size=(L, Dv))
        h0p = HiddenState(rng.normal(0, 0.5, R), np.tanh(rng.normal(0, 0.5, R)))
        h0v = HiddenState(rng.normal(0, 0.5, R), np.tanh(rng.normal(0, 0.5, R)))
        logits, _, _ = tinynet.net_forward(nets.policy, obs_p, h0p)
        bins = rng.integers(0, trainer.N_BINS, size=(L, trainer.N_ACT))
        logp, _ = tinynet.action_stats(logits.reshape(L, trainer.N_ACT, trainer.N_BINS), bins)
        trans = {
            "obs_p": obs_p, "obs_v": obs_v, "raw_p": obs_p, "raw_v": obs_v,
            "bins": bins, "logp": logp + rng.normal(0, 0.15, L),
            "value": rng.normal(size=L), "adv": rng.normal(size=L),
            "target": rng.normal(size=L), "target_n": rng.normal(size=L),
        }

        def recorded(h0):
            # later entries are deliberately stale: random, not the true recurrent state
            c = np.vstack([h0.c] + [rng.normal(size=R) for _ in range(n - 1)]) if multi_chunk else h0.c[None]
            h = np.vstack([h0.h] + [rng.normal(size=R) for _ in range(n - 1)]) if multi_chunk else h0.h[None]
            return HiddenState(c, h)

        chunks.extend(chunkreplay.chunk_episode(ep, trans, {"policy": recorded(h0p), "value": recorded(h0v)}, T))
    return chunkreplay.seal(chunks)


class ReferenceLoss:
    """Total PPO loss of single-chunk episodes, composed from forward pieces only.

    The two networks enter the loss through disjoint terms, so the output of
    the network not being perturbed is cached between evaluations.
    """

    def __init__(self, nets: NetParams, buffer, minibatch, ppo: rlcore.PpoConfig):
        mb = np.asarray(minibatch)
        self.nets, self.ppo = nets, ppo
        self.mask = buffer.mask[mb].T  # (T, B)
        self.obs = {"policy": np.swapaxes(buffer.data["obs_p"][mb], 0, 1),
                    "value": np.swapaxes(buffer.data["obs_v"][mb], 0, 1)}
        self.h0 = {w: HiddenState(buffer.h0[w].c[mb], buffer.h0[w].h[mb]) for w in ("policy", "value")}
        take = lambda name: np.swapaxes(buffer.data[name][mb], 0, 1)[self.mask]  # noqa: E731
        self.bins, self.logp_old, self.target = take("bins"), take("logp"), take("target_n")
        self.adv = rlcore.normalize_advantages(take("adv"))
        self.out = {w: self._forward(w) for w in ("policy", "value")}

    def _forward(self, which):
        out, _, _ = tinynet.net_forward(getattr(self.nets, which), self.obs[which], self.h0[which])
        return out

    def __call__(self, which=None) -> float:
        out = dict(self.out)
        if which is not None:
            out[which] = self._forward(which)
        logits = out["policy"].reshape(out["policy"].shape[:2] + (trainer.N_ACT, trainer.N_BINS))[self.mask]
        values = out["value"][..., 0][self.mask]
        logp, ent = tinynet.action_stats(logits, self.bins)
        return rlcore.ppo_loss(logp, self.logp_old, self.adv, values, self.target, ent, self.ppo).loss


def central_differences(nets: NetParams, loss_fn, eps=3e-5):
    """Numerical gradient of ``loss_fn(which)`` for every weight of both networks."""
    out = {}
    for which in ("policy", "value"):
        net = getattr(nets, which)
        grads = {}
        for name, arr in net.arrays().items():
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = loss_fn(which)
                flat[k] = orig - eps
                down = loss_fn(which)
                flat[k] = orig
                gflat[k] = (up - down) / (2 * eps)
            grads[name] = g
        out[which] = grads
    return out


def max_relative_error(analytic: dict, numeric: dict, floor=1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized over all weights."""
    worst = 0.0
    for which in analytic:
        for name, a in analytic[which].items():
            n = numeric[which][name]
            err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(err.max()))
    return worst


def gradient_check(seed: int, eps=3e-5, ppo=None) -> tuple[float, int]:
    """Analytic minibatch gradients vs central differences on one random small net.

    Returns ``(max relative error, parameter count)``.
    """
    ppo = ppo or rlcore.PpoConfig()
    rng = np.random.default_rng(seed)
    nets = small_nets(rng, **GRAD_DIMS)
    lengths = [10, 10, int(rng.integers(2, 10))]  # one padded chunk
    buffer = random_buffer(rng, nets, lengths)
    mb = np.arange(buffer.size)
    res = trainer.minibatch_gradients(nets, buffer, mb, ppo)
    numeric = central_differences(nets, ReferenceLoss(nets, buffer, mb, ppo), eps)
    analytic = {"policy": res.grads_policy, "value": res.grads_value}
    return max_relative_error(analytic, numeric), nets.policy.size() + nets.value.size()


# hidden-state replay -------------------------------------------------------------

def replay_from_start(net, obs_episode, h0: HiddenState, T: int):
    """States a chunked replay should start from, recomputed over the whole episode."""
    _, _, cache = tinynet.net_forward(net, obs_episode, h0)
    idx = np.arange(0, len(obs_episode), T)
    return cache.c[idx, 0], cache.h[idx, 0], cache
