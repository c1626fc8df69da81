"""GAE, the clipped PPO objective and running normalizers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRUE_TERMINAL = "terminal"
TRUNCATION = "truncation"
STD_FLOOR = 1e-8


@dataclass
class GaeConfig:
    gamma: float = 0.998
    lam: float = 0.95

    def validate(self) -> "GaeConfig":
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        return self


@dataclass
class PpoConfig:
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5

    def validate(self) -> "PpoConfig":
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("loss coefficients must be non-negative")
        return self


def compute_gae(rewards, values, terminal_kind: str, cfg: GaeConfig = GaeConfig()):
    """Advantages and value targets for one trajectory piece.

    ``values`` has one more entry than ``rewards``; its last entry is the
    bootstrap value and is ignored for a true terminal.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != (rewards.shape[0] + 1,):
        raise ValueError(f"values must have length len(rewards)+1, got {values.shape} for {rewards.shape}")
    if terminal_kind not in (TRUE_TERMINAL, TRUNCATION):
        raise ValueError(f"unknown terminal kind {terminal_kind!r}")
    nxt = values[1:].copy()
    if terminal_kind == TRUE_TERMINAL and len(nxt):
        nxt[-1] = 0.0
    delta = rewards + cfg.gamma * nxt - values[:-1]
    adv = np.empty_like(rewards)
    acc = 0.0
    decay = cfg.gamma * cfg.lam
    for t in range(len(rewards) - 1, -1, -1):
        acc = delta[t] + decay * acc
        adv[t] = acc
    return adv, adv + values[:-1]


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    if adv.size < 2:
        raise ValueError("advantage normalization needs at least two samples")
    centered = adv - adv.mean()
    return centered / max(float(np.sqrt(np.mean(centered**2))), STD_FLOOR)


@dataclass
class PpoTerms:
    loss: float
    surrogate: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    # derivatives of the total loss with respect to each per-sample input
    d_logp: np.ndarray
    d_value: np.ndarray
    d_entropy: np.ndarray


def ppo_loss(logp_new, logp_old, advantages, values_pred, value_targets, entropy, cfg: PpoConfig = PpoConfig(),
             weights=None) -> PpoTerms:
    """Clipped surrogate with value regression and entropy bonus.

    ``weights`` (default uniform) are per-sample weights summing to one; the
    returned derivatives are those of the total loss.
    """
    arrs = [np.asarray(x, dtype=float) for x in (logp_new, logp_old, advantages, values_pred, value_targets, entropy)]
    n = arrs[0].shape
    if any(a.shape != n for a in arrs):
        raise ValueError("all ppo_loss inputs must have the same shape")
    if not all(np.all(np.isfinite(a)) for a in arrs):
        raise FloatingPointError("non-finite input to ppo_loss")
    logp_new, logp_old, adv, v, vt, ent = arrs
    w = np.full(n, 1.0 / max(adv.size, 1)) if weights is None else np.asarray(weights, dtype=float)
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    use_unclipped = unclipped_term <= clipped_term
    per = np.where(use_unclipped, unclipped_term, clipped_term)
    surrogate = float(np.sum(w * per))
    verr = v - vt
    value_loss = float(np.sum(w * verr**2))
    mean_ent = float(np.sum(w * ent))
    total = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * mean_ent
    # clipped branch is flat in logp; the unclipped branch has d(rho A)/dlogp = rho A
    d_logp = -w * np.where(use_unclipped, unclipped_term, 0.0)
    return PpoTerms(
        loss=total,
        surrogate=surrogate,
        value_loss=value_loss,
        entropy=mean_ent,
        clip_fraction=float(np.sum(w * (np.abs(ratio - 1.0) > cfg.clip))),
        approx_kl=float(np.sum(w * (logp_old - logp_new))),
        d_logp=d_logp,
        d_value=2.0 * cfg.value_coef * w * verr,
        d_entropy=-cfg.entropy_coef * w,
    )


def policy_logit_grad(logits: np.ndarray, bins: np.ndarray, d_logp: np.ndarray, d_entropy: np.ndarray) -> np.ndarray:
    """Chain PPO derivatives through the categorical head: logits (..., M, K)."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    lp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    p = np.exp(lp)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, bins[..., None], 1.0, axis=-1)
    g = d_logp[..., None, None] * (onehot - p)
    h_coord = -np.sum(p * lp, axis=-1, keepdims=True)
    g += d_entropy[..., None, None] * (-p * (lp + h_coord))
    return g


@dataclass
class RunningNormalizer:
    """Per-dimension running mean and variance with a clip radius in stds."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    clip: float = 5.0

    @staticmethod
    def create(dim: int | tuple = (), clip: float = 5.0) -> "RunningNormalizer":
        shape = (dim,) if isinstance(dim, int) else tuple(dim)
        return RunningNormalizer(np.zeros(shape), np.ones(shape), 0.0, clip)

    @property
    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.var), STD_FLOOR)

    def copy(self) -> "RunningNormalizer":
        return RunningNormalizer(self.mean.copy(), self.var.copy(), self.count, self.clip)


def normalizer_update(norm: RunningNormalizer, batch) -> RunningNormalizer:
    """Merge batch statistics into the running ones (parallel-variance rule)."""
    batch = np.asarray(batch, dtype=float)
    if batch.shape[1:] != norm.mean.shape:
        raise ValueError(f"normalizer expects trailing shape {norm.mean.shape}, got {batch.shape[1:]}")
    n = batch.shape[0]
    if n == 0:
        raise ValueError("normalizer update needs a nonempty batch")
    b_mean = batch.mean(axis=0)
    b_var = np.mean((batch - b_mean) ** 2, axis=0)
    if norm.count == 0:
        return RunningNormalizer(b_mean, b_var, float(n), norm.clip)
    total = norm.count + n
    delta = b_mean - norm.mean
    mean = norm.mean + delta * (n / total)
    m2 = norm.var * norm.count + b_var * n + delta**2 * (norm.count * n / total)
    return RunningNormalizer(mean, m2 / total, float(total), norm.clip)


def normalizer_apply(norm: RunningNormalizer, x, clip: bool = True) -> np.ndarray:
    if norm.count < 1:
        raise ValueError("normalizer has not seen any data")
    out = (np.asarray(x, dtype=float) - norm.mean) / norm.std
    return np.clip(out, -norm.clip, norm.clip) if clip else out


def normalizer_denormalize(norm: RunningNormalizer, x_hat) -> np.ndarray:
    return np.asarray(x_hat, dtype=float) * norm.std + norm.mean
