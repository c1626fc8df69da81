"""Small recurrent networks with hand-written reverse mode.

Each network is dense -> ReLU -> LSTM -> linear head. Sequences are
processed time-major, ``(T, B, D)``, so a minibatch of chunks runs as one
batched recurrence. Gradients stop at the initial hidden state.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

GATES = 4  # input, forget, output, candidate


class DimensionError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class RecurrentNet:
    """Weights of one dense-LSTM-head network."""

    W1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    Wx: np.ndarray  # (4R, H)
    Wh: np.ndarray  # (4R, R)
    bl: np.ndarray  # (4R,)
    Wo: np.ndarray  # (K, R)
    bo: np.ndarray  # (K,)
    version: int = field(default=0, compare=False)

    @property
    def names(self) -> tuple[str, ...]:
        return ("W1", "b1", "Wx", "Wh", "bl", "Wo", "bo")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.Wh.shape[1]

    @property
    def output_dim(self) -> int:
        return self.Wo.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names}

    def size(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def copy(self) -> "RecurrentNet":
        return RecurrentNet(**{n: a.copy() for n, a in self.arrays().items()}, version=self.version)

    def check(self) -> "RecurrentNet":
        H, D = self.W1.shape
        R = self.Wh.shape[1]
        K = self.Wo.shape[0]
        expected = {"W1": (H, D), "b1": (H,), "Wx": (GATES * R, H), "Wh": (GATES * R, R),
                    "bl": (GATES * R,), "Wo": (K, R), "bo": (K,)}
        for n, shape in expected.items():
            if getattr(self, n).shape != shape:
                raise DimensionError(f"{n}: expected shape {shape}, got {getattr(self, n).shape}")
            if not np.all(np.isfinite(getattr(self, n))):
                raise ValueError(f"{n} has non-finite entries")
        return self


def init_net(rng: np.random.Generator, input_dim: int, dense: int, lstm: int, output_dim: int,
             head_scale: float = 0.0) -> RecurrentNet:
    """Uniform +-1/sqrt(fan-in) weights, forget bias +1, zero head (unless ``head_scale``)."""
    def uni(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, shape)

    bl = np.zeros(GATES * lstm)
    bl[lstm:2 * lstm] = 1.0
    return RecurrentNet(
        W1=uni((dense, input_dim), input_dim),
        b1=np.zeros(dense),
        Wx=uni((GATES * lstm, dense), dense),
        Wh=uni((GATES * lstm, lstm), lstm),
        bl=bl,
        Wo=head_scale * uni((output_dim, lstm), lstm),
        bo=np.zeros(output_dim),
    )


@dataclass
class NetParams:
    """Policy and value networks; they never share storage."""

    policy: RecurrentNet
    value: RecurrentNet

    def copy(self) -> "NetParams":
        return NetParams(self.policy.copy(), self.value.copy())


def init_params(rng: np.random.Generator, policy_dim: int, value_dim: int, n_actions: int, n_bins: int,
                dense: int = 64, lstm: int = 32) -> NetParams:
    return NetParams(
        policy=init_net(rng, policy_dim, dense, lstm, n_actions * n_bins),
        value=init_net(rng, value_dim, dense, lstm, 1),
    )


@dataclass
class HiddenState:
    c: np.ndarray
    h: np.ndarray

    @staticmethod
    def zeros(batch: tuple | int, size: int) -> "HiddenState":
        shape = (batch,) if isinstance(batch, int) else tuple(batch)
        return HiddenState(np.zeros(shape + (size,)), np.zeros(shape + (size,)))

    def copy(self) -> "HiddenState":
        return HiddenState(self.c.copy(), self.h.copy())


@dataclass
class Cache:
    net_id: int
    version: int
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray  # (T+1, B, R), c[0] = c0
    h: np.ndarray  # (T+1, B, R)
    tanh_c: np.ndarray


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def net_forward(net: RecurrentNet, obs: np.ndarray, h0: HiddenState):
    """Run ``obs`` of shape (T, B, D) (or (T, D)) from ``h0``.

    Returns ``(outputs, hT, cache)``; outputs have shape (T, B, K).
    """
    obs = np.asarray(obs, dtype=float)
    squeeze = obs.ndim == 2
    if squeeze:
        obs = obs[:, None, :]
        h0 = HiddenState(np.asarray(h0.c)[None], np.asarray(h0.h)[None])
    if obs.ndim != 3 or obs.shape[0] < 1:
        raise DimensionError("dense: observations must be (T, B, D) with T >= 1")
    if obs.shape[-1] != net.input_dim:
        raise DimensionError(f"dense: input width {obs.shape[-1]} != {net.input_dim}")
    T, B, _ = obs.shape
    R = net.hidden
    if h0.c.shape != (B, R) or h0.h.shape != (B, R):
        raise DimensionError(f"lstm: hidden state must be ({B}, {R})")
    z1 = obs @ net.W1.T + net.b1
    a1 = np.maximum(z1, 0.0)
    gx = a1 @ net.Wx.T + net.bl
    c = np.empty((T + 1, B, R))
    h = np.empty((T + 1, B, R))
    c[0], h[0] = h0.c, h0.h
    i = np.empty((T, B, R))
    f = np.empty_like(i)
    o = np.empty_like(i)
    g = np.empty_like(i)
    tanh_c = np.empty_like(i)
    for t in range(T):
        pre = gx[t] + h[t] @ net.Wh.T
        i[t] = _sigmoid(pre[:, :R])
        f[t] = _sigmoid(pre[:, R:2 * R])
        o[t] = _sigmoid(pre[:, 2 * R:3 * R])
        g[t] = np.tanh(pre[:, 3 * R:])
        c[t + 1] = f[t] * c[t] + i[t] * g[t]
        tanh_c[t] = np.tanh(c[t + 1])
        h[t + 1] = o[t] * tanh_c[t]
    out = h[1:] @ net.Wo.T + net.bo
    cache = Cache(id(net), net.version, obs, z1, a1, i, f, o, g, c, h, tanh_c)
    hT = HiddenState(c[T].copy(), h[T].copy())
    if squeeze:
        return out[:, 0], HiddenState(hT.c[0], hT.h[0]), cache
    return out, hT, cache


def net_step(net: RecurrentNet, obs: np.ndarray, hidden: HiddenState):
    """Single batched step for rollouts: obs (B, D) -> (outputs (B, K), new hidden)."""
    R = net.hidden
    a1 = np.maximum(obs @ net.W1.T + net.b1, 0.0)
    pre = a1 @ net.Wx.T + net.bl + hidden.h @ net.Wh.T
    i = _sigmoid(pre[:, :R])
    f = _sigmoid(pre[:, R:2 * R])
    o = _sigmoid(pre[:, 2 * R:3 * R])
    g = np.tanh(pre[:, 3 * R:])
    c = f * hidden.c + i * g
    h = o * np.tanh(c)
    return h @ net.Wo.T + net.bo, HiddenState(c, h)


def net_backward(net: RecurrentNet, cache: Cache, grad_out: np.ndarray, grad_hT: HiddenState | None = None):
    """Reverse mode through a cached forward; returns ``(grads, grad_h0)``."""
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("cache does not belong to the current network weights")
    grad_out = np.asarray(grad_out, dtype=float)
    if grad_out.ndim == 2:
        grad_out = grad_out[:, None, :]
        if grad_hT is not None:
            grad_hT = HiddenState(np.asarray(grad_hT.c)[None], np.asarray(grad_hT.h)[None])
    T, B, R = cache.i.shape
    if grad_out.shape != (T, B, net.output_dim):
        raise DimensionError(f"head: output gradient must be {(T, B, net.output_dim)}")
    hs = cache.h
    grads = {
        "Wo": np.einsum("tbk,tbr->kr", grad_out, hs[1:]),
        "bo": grad_out.sum(axis=(0, 1)),
    }
    dh_out = grad_out @ net.Wo
    dpre = np.empty((T, B, GATES * R))
    dh_next = np.zeros((B, R)) if grad_hT is None else np.array(grad_hT.h, dtype=float)
    dc_next = np.zeros((B, R)) if grad_hT is None else np.array(grad_hT.c, dtype=float)
    for t in range(T - 1, -1, -1):
        dh = dh_out[t] + dh_next
        i, f, o, g, tc = cache.i[t], cache.f[t], cache.o[t], cache.g[t], cache.tanh_c[t]
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dpre[t, :, :R] = dc * g * i * (1.0 - i)
        dpre[t, :, R:2 * R] = dc * cache.c[t] * f * (1.0 - f)
        dpre[t, :, 2 * R:3 * R] = dh * tc * o * (1.0 - o)
        dpre[t, :, 3 * R:] = dc * i * (1.0 - g * g)
        dh_next = dpre[t] @ net.Wh
        dc_next = dc * f
    grads["Wh"] = np.einsum("tbg,tbr->gr", dpre, hs[:-1])
    grads["Wx"] = np.einsum("tbg,tbh->gh", dpre, cache.a1)
    grads["bl"] = dpre.sum(axis=(0, 1))
    dz1 = (dpre @ net.Wx) * (cache.z1 > 0)
    grads["W1"] = np.einsum("tbh,tbd->hd", dz1, cache.x)
    grads["b1"] = dz1.sum(axis=(0, 1))
    return grads, HiddenState(dc_next, dh_next)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_net(net: RecurrentNet, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> "AdamState":
        arrays = net.arrays()
        return AdamState({n: np.zeros_like(a) for n, a in arrays.items()},
                         {n: np.zeros_like(a) for n, a in arrays.items()}, 0, lr, beta1, beta2, eps)


def adam_step(net: RecurrentNet, grads: dict[str, np.ndarray], adam: AdamState) -> RecurrentNet:
    """Bias-corrected Adam update in place; bumps the network version."""
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {bad} at Adam step {adam.step}")
    for n in net.names:
        if grads[n].shape != getattr(net, n).shape:
            raise DimensionError(f"{n}: gradient shape {grads[n].shape} != {getattr(net, n).shape}")
    adam.step += 1
    c1 = 1.0 - adam.beta1**adam.step
    c2 = 1.0 - adam.beta2**adam.step
    for n in net.names:
        g = grads[n]
        adam.m[n] = adam.beta1 * adam.m[n] + (1.0 - adam.beta1) * g
        adam.v[n] = adam.beta2 * adam.v[n] + (1.0 - adam.beta2) * g * g
        upd = adam.lr * (adam.m[n] / c1) / (np.sqrt(adam.v[n] / c2) + adam.eps)
        setattr(net, n, getattr(net, n) - upd)
    net.version += 1
    return net


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def action_stats(logits: np.ndarray, bins: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint log-probability of ``bins`` and total entropy for logits (..., M, K)."""
    lp = log_softmax(logits)
    p = np.exp(lp)
    logp = np.sum(np.take_along_axis(lp, bins[..., None], axis=-1)[..., 0], axis=-1)
    ent = -np.sum(p * lp, axis=(-2, -1))
    return logp, ent


def sample_actions(logits: np.ndarray, rngs, greedy: bool = False):
    """Batched categorical sampling: logits (B, M, K), one generator per row."""
    lp = log_softmax(logits)
    p = np.exp(lp)
    if greedy:
        bins = np.argmax(logits, axis=-1)
    else:
        u = np.stack([g.random(logits.shape[-2]) for g in rngs])
        cdf = np.cumsum(p, axis=-1)
        bins = np.minimum(np.sum(cdf < u[..., None] * cdf[..., -1:], axis=-1), logits.shape[-1] - 1)
    logp = np.sum(np.take_along_axis(lp, bins[..., None], axis=-1)[..., 0], axis=-1)
    ent = -np.sum(p * lp, axis=(-2, -1))
    return bins, logp, ent


def sample_action(logits: np.ndarray, rng: np.random.Generator):
    """Sample one bin per coordinate from logits (M, K); returns (bins, logprob, entropy)."""
    bins, logp, ent = sample_actions(np.asarray(logits, dtype=float)[None], [rng])
    return bins[0], float(logp[0]), float(ent[0])


# checkpoints -----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def net_to_arrays(prefix: str, net: RecurrentNet) -> dict[str, np.ndarray]:
    out = {f"{prefix}.{n}": a for n, a in net.arrays().items()}
    out[f"{prefix}.version"] = np.array(net.version)
    return out


def net_from_arrays(prefix: str, arrays) -> RecurrentNet:
    kw = {n: np.array(arrays[f"{prefix}.{n}"]) for n in ("W1", "b1", "Wx", "Wh", "bl", "Wo", "bo")}
    return RecurrentNet(**kw, version=int(arrays[f"{prefix}.version"])).check()


def adam_to_arrays(prefix: str, adam: AdamState) -> dict[str, np.ndarray]:
    out = {f"{prefix}.m.{n}": a for n, a in adam.m.items()}
    out.update({f"{prefix}.v.{n}": a for n, a in adam.v.items()})
    out[f"{prefix}.hyper"] = np.array([adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps])
    return out


def adam_from_arrays(prefix: str, arrays, names) -> AdamState:
    hyper = arrays[f"{prefix}.hyper"]
    return AdamState(
        m={n: np.array(arrays[f"{prefix}.m.{n}"]) for n in names},
        v={n: np.array(arrays[f"{prefix}.v.{n}"]) for n in names},
        step=int(hyper[0]), lr=float(hyper[1]), beta1=float(hyper[2]), beta2=float(hyper[3]), eps=float(hyper[4]),
    )


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a versioned ``.npz`` checkpoint (bit-exact round trip)."""
    payload = dict(arrays)
    header = {"format": "dexrand-checkpoint", "version": CHECKPOINT_VERSION, **(meta or {})}
    payload["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: np.array(data[k]) for k in data.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != "dexrand-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {meta.get('format')} v{meta.get('version')}")
    return arrays, meta
