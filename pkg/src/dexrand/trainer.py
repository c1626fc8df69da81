"""Rollout collection and PPO optimization with truncated episodic replay.

Environment slots are split into fixed groups. Each group owns its
randomized environments, recurrent states and partly collected episodes; a
worker advances whole groups, so the worker count never changes what is
collected. Optimization is single-threaded and strictly alternates with
collection.
"""
from __future__ import annotations

import json
import logging
import pickle
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dexrand import chunkreplay, rlcore, tinynet, toyenv
from dexrand.randstack import RandomizationSpec, RandomizedEnvs
from dexrand.rlcore import GaeConfig, PpoConfig, RunningNormalizer
from dexrand.tinynet import HiddenState, NetParams

log = logging.getLogger(__name__)

N_ACT = toyenv.N_FINGERS
N_BINS = toyenv.N_BINS
TRAIN_STREAM = 1 << 20  # spawn-key offset keeping trainer streams apart from environment streams
EVAL_SEED_OFFSET = 1_000_003


@dataclass
class TrainConfig:
    seed: int = 0
    workers: int = 1
    n_envs: int = 32
    group_size: int = 32
    transitions_per_batch: int = 2000
    chunk_length: int = 10
    minibatch_chunks: int = 20
    epochs: int = 4
    total_batches: int = 300
    lr: float = 1e-3  # above the Adam default: batches here are tiny, and 3e-4 stalls with every layer on
    dense: int = 64
    lstm: int = 32
    refresh_hidden: bool = True
    checkpoint_every: int = 10
    eval_every: int = 0
    eval_episodes: int = 20
    gae: GaeConfig = field(default_factory=GaeConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def validate(self) -> "TrainConfig":
        counts = ("workers", "n_envs", "group_size", "transitions_per_batch", "chunk_length",
                  "minibatch_chunks", "epochs", "total_batches", "dense", "lstm", "eval_episodes",
                  "checkpoint_every")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be >= 1")
        if self.n_envs % self.group_size:
            raise ValueError("train.n_envs must be a multiple of train.group_size")
        if self.lr < 0:
            raise ValueError("train.lr must be >= 0")
        if self.eval_every < 0:
            raise ValueError("train.eval_every must be >= 0")
        self.gae.validate()
        self.ppo.validate()
        return self

    @property
    def steps_per_batch(self) -> int:
        return -(-self.transitions_per_batch // self.n_envs)


@dataclass
class Normalizers:
    policy_obs: RunningNormalizer
    value_obs: RunningNormalizer
    value_target: RunningNormalizer

    @staticmethod
    def create() -> "Normalizers":
        return Normalizers(RunningNormalizer.create(toyenv.POLICY_DIM), RunningNormalizer.create(toyenv.VALUE_DIM),
                           RunningNormalizer.create(()))

    def copy(self) -> "Normalizers":
        return Normalizers(self.policy_obs.copy(), self.value_obs.copy(), self.value_target.copy())


def apply_obs(norm: RunningNormalizer, x: np.ndarray) -> np.ndarray:
    """Clipped standardization; identity before any data has been seen."""
    if norm.count == 0:
        return np.asarray(x, dtype=float)
    return rlcore.normalizer_apply(norm, x)


def value_to_raw(norm: RunningNormalizer, v: np.ndarray) -> np.ndarray:
    return v if norm.count == 0 else rlcore.normalizer_denormalize(norm, v)


def value_to_normalized(norm: RunningNormalizer, v: np.ndarray) -> np.ndarray:
    return v if norm.count == 0 else rlcore.normalizer_apply(norm, v, clip=False)


# collection -----------------------------------------------------------------

@dataclass
class Piece:
    """The part of one episode collected within one batch."""

    key: tuple[int, int]  # (instance, episode)
    start: int  # step offset of this piece within the episode
    obs_p: list = field(default_factory=list)
    obs_v: list = field(default_factory=list)
    bins: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    value: list = field(default_factory=list)
    hp_c: list = field(default_factory=list)
    hp_h: list = field(default_factory=list)
    hv_c: list = field(default_factory=list)
    hv_h: list = field(default_factory=list)
    kind: str = rlcore.TRUNCATION
    bootstrap: float = 0.0

    def __len__(self) -> int:
        return len(self.reward)


@dataclass
class EpisodeSummary:
    key: tuple[int, int]
    ret: float
    length: int
    goals: int
    reason: str


class Group:
    """Slots advanced together by one worker."""

    def __init__(self, cfg: TrainConfig, spec: RandomizationSpec, base: toyenv.EnvParams, instances):
        self.envs = RandomizedEnvs(spec, base, cfg.seed, instances)
        self.envs.reset()
        B = len(self.envs)
        self.hp = HiddenState.zeros(B, cfg.lstm)
        self.hv = HiddenState.zeros(B, cfg.lstm)
        self.pending = self.envs.observe()
        self.ep_return = np.zeros(B)
        self.ep_len = np.zeros(B, dtype=np.int64)
        self.pieces: list[Piece] = [self._new_piece(i) for i in range(B)]

    def _new_piece(self, i: int) -> Piece:
        return Piece(key=(self.envs.instances[i], int(self.envs.episodes[i])), start=int(self.ep_len[i]))


def _policy_value(nets: NetParams, norms: Normalizers, obs: toyenv.ObservationPair, hp: HiddenState,
                  hv: HiddenState):
    logits, hp2 = tinynet.net_step(nets.policy, apply_obs(norms.policy_obs, obs.policy), hp)
    out_v, hv2 = tinynet.net_step(nets.value, apply_obs(norms.value_obs, obs.value), hv)
    return logits.reshape(-1, N_ACT, N_BINS), hp2, value_to_raw(norms.value_target, out_v[:, 0]), hv2


def collect_group(group: Group, nets: NetParams, norms: Normalizers, steps: int):
    """Advance a group by ``steps`` steps.

    Returns ``(group, pieces, episodes, discarded)``; open pieces are
    truncated at the end with a bootstrap value.
    """
    envs = group.envs
    B = len(envs)
    finished: list[Piece] = []
    episodes: list[EpisodeSummary] = []
    discarded = 0
    for _ in range(steps):
        obs = group.pending
        hp0, hv0 = group.hp, group.hv
        logits, group.hp, value, group.hv = _policy_value(nets, norms, obs, hp0, hv0)
        bins, logp, _ = tinynet.sample_actions(logits, envs._rngs("policy"))
        r, done, reasons, bad = envs.step(bins)
        for i in range(B):
            pc = group.pieces[i]
            pc.obs_p.append(obs.policy[i])
            pc.obs_v.append(obs.value[i])
            pc.bins.append(bins[i])
            pc.logp.append(logp[i])
            pc.reward.append(r[i])
            pc.value.append(value[i])
            pc.hp_c.append(hp0.c[i])
            pc.hp_h.append(hp0.h[i])
            pc.hv_c.append(hv0.c[i])
            pc.hv_h.append(hv0.h[i])
        group.ep_return += np.where(bad >= 0, 0.0, r)
        group.ep_len += 1
        group.pending = envs.observe()
        ended = np.flatnonzero(done | (bad >= 0))
        if len(ended):
            term = toyenv.ObservationPair(group.pending.policy[ended], group.pending.value[ended])
            sub_hv = HiddenState(group.hv.c[ended], group.hv.h[ended])
            _, _, boot, _ = _policy_value(nets, norms, term, HiddenState(group.hp.c[ended], group.hp.h[ended]), sub_hv)
            for j, i in enumerate(ended):
                pc = group.pieces[i]
                if bad[i] >= 0:
                    discarded += 1
                    finished = [p for p in finished if p.key != pc.key]
                    log.warning("numerical blowup at substep %d in episode %s; episode discarded", bad[i], pc.key)
                else:
                    pc.kind = rlcore.TRUE_TERMINAL if reasons[i] == toyenv.DONE_DROP else rlcore.TRUNCATION
                    pc.bootstrap = 0.0 if pc.kind == rlcore.TRUE_TERMINAL else float(boot[j])
                    finished.append(pc)
                    episodes.append(EpisodeSummary(pc.key, float(group.ep_return[i]), int(group.ep_len[i]),
                                                   int(envs.state.goal_count[i]), reasons[i]))
            envs.reset(ended)
            group.ep_return[ended] = 0.0
            group.ep_len[ended] = 0
            group.hp.c[ended] = 0.0
            group.hp.h[ended] = 0.0
            group.hv.c[ended] = 0.0
            group.hv.h[ended] = 0.0
            fresh = envs.observe_slots(ended)
            group.pending.policy[ended] = fresh.policy
            group.pending.value[ended] = fresh.value
            for i in ended:
                group.pieces[i] = group._new_piece(i)
    # truncate whatever is still open
    _, _, boot, _ = _policy_value(nets, norms, group.pending, group.hp, group.hv)
    for i in range(B):
        pc = group.pieces[i]
        if len(pc):
            pc.kind = rlcore.TRUNCATION
            pc.bootstrap = float(boot[i])
            finished.append(pc)
        group.pieces[i] = group._new_piece(i)
    return group, finished, episodes, discarded


def _collect_task(args):
    return collect_group(*args)


class Collector:
    def __init__(self, cfg: TrainConfig, spec: RandomizationSpec, base: toyenv.EnvParams):
        self.cfg = cfg
        self.groups = [Group(cfg, spec, base, range(g, g + cfg.group_size))
                       for g in range(0, cfg.n_envs, cfg.group_size)]
        self._pool: ProcessPoolExecutor | None = None

    def collect(self, nets: NetParams, norms: Normalizers):
        steps = self.cfg.steps_per_batch
        jobs = [(g, nets, norms, steps) for g in self.groups]
        if self.cfg.workers > 1 and len(self.groups) > 1:
            if self._pool is None:
                self._pool = ProcessPoolExecutor(max_workers=self.cfg.workers)
            results = list(self._pool.map(_collect_task, jobs))
        else:
            results = [collect_group(*job) for job in jobs]
        self.groups = [res[0] for res in results]
        pieces = [p for res in results for p in res[1]]
        episodes = [e for res in results for e in res[2]]
        discarded = sum(res[3] for res in results)
        return pieces, episodes, discarded

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __getstate__(self):
        return {"cfg": self.cfg, "groups": self.groups}

    def __setstate__(self, state):
        self.cfg = state["cfg"]
        self.groups = state["groups"]
        self._pool = None


# optimization ---------------------------------------------------------------

def build_buffer(pieces: list[Piece], norms: Normalizers, cfg: TrainConfig) -> chunkreplay.ChunkBuffer:
    """GAE per piece, then chunking; observations are normalized with the collection snapshot."""
    T = cfg.chunk_length
    chunks = []
    for pid, pc in enumerate(pieces):
        values = np.append(np.array(pc.value), pc.bootstrap)
        adv, targets = rlcore.compute_gae(np.array(pc.reward), values, pc.kind, cfg.gae)
        trans = {
            "obs_p": apply_obs(norms.policy_obs, np.array(pc.obs_p)),
            "obs_v": apply_obs(norms.value_obs, np.array(pc.obs_v)),
            "raw_p": np.array(pc.obs_p),
            "raw_v": np.array(pc.obs_v),
            "bins": np.array(pc.bins, dtype=np.int64),
            "logp": np.array(pc.logp),
            "value": values[:-1],
            "adv": adv,
            "target": targets,
            "target_n": value_to_normalized(norms.value_target, targets),
        }
        hidden = {
            "policy": HiddenState(np.array(pc.hp_c[::T]), np.array(pc.hp_h[::T])),
            "value": HiddenState(np.array(pc.hv_c[::T]), np.array(pc.hv_h[::T])),
        }
        chunks.extend(chunkreplay.chunk_episode(pid, trans, hidden, T))
    return chunkreplay.seal(chunks, refresh=cfg.refresh_hidden)


@dataclass
class MinibatchResult:
    loss: float
    terms: rlcore.PpoTerms
    grads_policy: dict
    grads_value: dict


def minibatch_gradients(nets: NetParams, buffer: chunkreplay.ChunkBuffer, minibatch: np.ndarray,
                        ppo: PpoConfig) -> MinibatchResult:
    """Forward by level waves (refreshing successors as it goes), PPO loss, backward."""
    forwards = []
    for wave in chunkreplay.waves(buffer, minibatch):
        mask = buffer.mask[wave]
        obs_p = np.swapaxes(buffer.data["obs_p"][wave], 0, 1)
        obs_v = np.swapaxes(buffer.data["obs_v"][wave], 0, 1)
        hp0 = HiddenState(buffer.h0["policy"].c[wave].copy(), buffer.h0["policy"].h[wave].copy())
        hv0 = HiddenState(buffer.h0["value"].c[wave].copy(), buffer.h0["value"].h[wave].copy())
        logits, _, cache_p = tinynet.net_forward(nets.policy, obs_p, hp0)
        values, _, cache_v = tinynet.net_forward(nets.value, obs_v, hv0)
        final = {
            "policy": HiddenState(chunkreplay.last_valid(cache_p.c, mask), chunkreplay.last_valid(cache_p.h, mask)),
            "value": HiddenState(chunkreplay.last_valid(cache_v.c, mask), chunkreplay.last_valid(cache_v.h, mask)),
        }
        chunkreplay.refresh_hidden(buffer, wave, final)
        forwards.append((wave, mask, logits, values, cache_p, cache_v))

    sel = [(np.swapaxes(m, 0, 1)) for _, m, *_ in forwards]  # (T, B) masks
    logits_v = np.concatenate([f[2].reshape(f[2].shape[:2] + (N_ACT, N_BINS))[s] for f, s in zip(forwards, sel)])
    value_v = np.concatenate([f[3][..., 0][s] for f, s in zip(forwards, sel)])

    def gather(name):
        return np.concatenate([np.swapaxes(buffer.data[name][f[0]], 0, 1)[s] for f, s in zip(forwards, sel)])

    bins = gather("bins")
    logp_new, ent = tinynet.action_stats(logits_v, bins)
    adv = rlcore.normalize_advantages(gather("adv"))
    terms = rlcore.ppo_loss(logp_new, gather("logp"), adv, value_v, gather("target_n"), ent, ppo)
    d_logits = rlcore.policy_logit_grad(logits_v, bins, terms.d_logp, terms.d_entropy)

    grads_p = {n: np.zeros_like(a) for n, a in nets.policy.arrays().items()}
    grads_v = {n: np.zeros_like(a) for n, a in nets.value.arrays().items()}
    offset = 0
    for (wave, mask, logits, values, cache_p, cache_v), s in zip(forwards, sel):
        n = int(s.sum())
        g_logits = np.zeros(logits.shape)
        g_logits[s] = d_logits[offset:offset + n].reshape(n, -1)
        g_values = np.zeros(values.shape)
        g_values[s, 0] = terms.d_value[offset:offset + n]
        offset += n
        gp, _ = tinynet.net_backward(nets.policy, cache_p, g_logits)
        gv, _ = tinynet.net_backward(nets.value, cache_v, g_values)
        for k in grads_p:
            grads_p[k] += gp[k]
            grads_v[k] += gv[k]
    return MinibatchResult(terms.loss, terms, grads_p, grads_v)


@dataclass
class OptState:
    nets: NetParams
    adam_policy: tinynet.AdamState
    adam_value: tinynet.AdamState
    norms: Normalizers

    def copy(self) -> "OptState":
        return OptState(self.nets.copy(), pickle.loads(pickle.dumps(self.adam_policy)),
                        pickle.loads(pickle.dumps(self.adam_value)), self.norms.copy())


def explained_variance(pred: np.ndarray, target: np.ndarray) -> float:
    """``1 - Var(target - pred) / Var(target)`` of the collection-time value predictions."""
    var = float(np.var(target))
    return float("nan") if var == 0.0 else 1.0 - float(np.var(target - pred)) / var


def optimize_batch(opt: OptState, buffer: chunkreplay.ChunkBuffer, cfg: TrainConfig, rng: np.random.Generator):
    """PPO epochs over the buffer; returns (opt, diagnostics). Rolls back on a non-finite loss."""
    start = opt.copy()
    diag = {"entropy": [], "clip_fraction": [], "approx_kl": [], "value_loss": [], "loss": []}
    aborted = False
    mb = min(cfg.minibatch_chunks, buffer.size)
    for _ in range(cfg.epochs):
        for minibatch in chunkreplay.iterate_minibatches(buffer, mb, rng):
            if int(buffer.mask[minibatch].sum()) < 2:
                continue
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    res = minibatch_gradients(opt.nets, buffer, minibatch, cfg.ppo)
                if not np.isfinite(res.loss):
                    raise FloatingPointError("non-finite loss")
                tinynet.adam_step(opt.nets.policy, res.grads_policy, opt.adam_policy)
                tinynet.adam_step(opt.nets.value, res.grads_value, opt.adam_value)
            except FloatingPointError as exc:  # includes rejected non-finite gradients
                log.error("batch aborted: %s", exc)
                aborted = True
                break
            t = res.terms
            diag["entropy"].append(t.entropy)
            diag["clip_fraction"].append(t.clip_fraction)
            diag["approx_kl"].append(t.approx_kl)
            diag["value_loss"].append(t.value_loss)
            diag["loss"].append(t.loss)
        if aborted:
            break
    if aborted:
        opt = start  # roll back every update of this batch
    valid = buffer.mask
    norms = opt.norms
    norms.policy_obs = rlcore.normalizer_update(norms.policy_obs, buffer.data["raw_p"][valid])
    norms.value_obs = rlcore.normalizer_update(norms.value_obs, buffer.data["raw_v"][valid])
    norms.value_target = rlcore.normalizer_update(norms.value_target, buffer.data["target"][valid])
    out = {k: (float(np.mean(v)) if v else float("nan")) for k, v in diag.items()}
    out["aborted"] = aborted
    out["explained_variance"] = explained_variance(buffer.data["value"][valid], buffer.data["target"][valid])
    return opt, out


# training loop --------------------------------------------------------------

def init_opt(cfg: TrainConfig) -> OptState:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(TRAIN_STREAM, 0)))
    nets = tinynet.init_params(rng, toyenv.POLICY_DIM, toyenv.VALUE_DIM, N_ACT, N_BINS, cfg.dense, cfg.lstm)
    return OptState(nets, tinynet.AdamState.for_net(nets.policy, cfg.lr), tinynet.AdamState.for_net(nets.value, cfg.lr),
                    Normalizers.create())


def batch_rng(cfg: TrainConfig, batch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(TRAIN_STREAM, 1, batch)))


def _norm_arrays(prefix: str, n: RunningNormalizer) -> dict:
    return {f"{prefix}.mean": n.mean, f"{prefix}.var": n.var, f"{prefix}.stats": np.array([n.count, n.clip])}


def _norm_from(prefix: str, a) -> RunningNormalizer:
    stats = a[f"{prefix}.stats"]
    return RunningNormalizer(np.array(a[f"{prefix}.mean"]), np.array(a[f"{prefix}.var"]), float(stats[0]), float(stats[1]))


def save_checkpoint(path, opt: OptState, batch: int, collector: Collector | None = None) -> None:
    arrays = {}
    arrays.update(tinynet.net_to_arrays("policy", opt.nets.policy))
    arrays.update(tinynet.net_to_arrays("value", opt.nets.value))
    arrays.update(tinynet.adam_to_arrays("adam_policy", opt.adam_policy))
    arrays.update(tinynet.adam_to_arrays("adam_value", opt.adam_value))
    for name in ("policy_obs", "value_obs", "value_target"):
        arrays.update(_norm_arrays(f"norm.{name}", getattr(opt.norms, name)))
    if collector is not None:
        arrays["rollout"] = np.frombuffer(pickle.dumps(collector, protocol=4), dtype=np.uint8)
    tinynet.save_arrays(path, arrays, {"batch": batch})


def load_checkpoint(path):
    """Returns ``(opt, batch, collector-or-None)``."""
    arrays, meta = tinynet.load_arrays(path)
    nets = NetParams(tinynet.net_from_arrays("policy", arrays), tinynet.net_from_arrays("value", arrays))
    names = nets.policy.names
    opt = OptState(
        nets,
        tinynet.adam_from_arrays("adam_policy", arrays, names),
        tinynet.adam_from_arrays("adam_value", arrays, names),
        Normalizers(*(_norm_from(f"norm.{n}", arrays) for n in ("policy_obs", "value_obs", "value_target"))),
    )
    collector = pickle.loads(arrays["rollout"].tobytes()) if "rollout" in arrays else None
    return opt, int(meta["batch"]), collector


def summarize(episodes: list[EpisodeSummary]) -> dict:
    if not episodes:
        return {"episodes": 0, "mean_return": None, "mean_goals": None, "median_goals": None,
                "length_min": None, "length_median": None, "length_max": None, "drops": 0}
    lengths = np.array([e.length for e in episodes])
    goals = np.array([e.goals for e in episodes])
    return {
        "episodes": len(episodes),
        "mean_return": float(np.mean([e.ret for e in episodes])),
        "mean_goals": float(goals.mean()),
        "median_goals": float(np.median(goals)),
        "length_min": int(lengths.min()),
        "length_median": float(np.median(lengths)),
        "length_max": int(lengths.max()),
        "drops": int(sum(e.reason == toyenv.DONE_DROP for e in episodes)),
    }


def evaluate(nets: NetParams, norms: Normalizers, spec: RandomizationSpec, base: toyenv.EnvParams, seed: int,
             episodes: int = 20, lstm: int | None = None, greedy: bool = True) -> list[int]:
    """Consecutive goals reached in ``episodes`` evaluation episodes (one per slot)."""
    envs = RandomizedEnvs(spec, base, seed + EVAL_SEED_OFFSET, range(episodes), prefetch=1)
    envs.reset()
    R = lstm or nets.policy.hidden
    hp, hv = HiddenState.zeros(episodes, R), HiddenState.zeros(episodes, R)
    goals = np.full(episodes, -1, dtype=np.int64)
    while np.any(goals < 0):
        obs = envs.observe()
        logits, hp, _, hv = _policy_value(nets, norms, obs, hp, hv)
        bins, _, _ = tinynet.sample_actions(logits, envs._rngs("policy"), greedy=greedy)
        before = envs.state.goal_count.copy()
        _, done, _, bad = envs.step(bins)
        ended = np.flatnonzero(done | (bad >= 0))
        for i in ended:
            if goals[i] < 0:
                goals[i] = envs.state.goal_count[i] if bad[i] < 0 else before[i]
        if len(ended):
            # finished slots keep running on fresh episodes that are never counted
            envs.reset(ended)
            hp.c[ended] = 0.0
            hp.h[ended] = 0.0
            hv.c[ended] = 0.0
            hv.h[ended] = 0.0
    return goals.tolist()


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def train(cfg: TrainConfig, spec: RandomizationSpec, base: toyenv.EnvParams, out_dir, resume: bool = True,
          progress=None, stop_after: int | None = None) -> dict:
    """Alternate collection and optimization; returns the last metrics record.

    Writes ``metrics.jsonl`` (deterministic), ``timings.jsonl`` (wall clock)
    and ``checkpoint.npz`` under ``out_dir``. With ``resume`` an existing
    checkpoint is continued bit-exactly. ``stop_after`` ends the run early
    after that many batches (for interruption tests).
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    metrics_path, timings_path = out / "metrics.jsonl", out / "timings.jsonl"
    if resume and ckpt.exists():
        opt, start, collector = load_checkpoint(ckpt)
        if collector is None:
            raise ValueError("checkpoint has no rollout state; cannot resume")
        metrics = [m for m in _read_jsonl(metrics_path) if m["batch"] < start]
        timings = [t for t in _read_jsonl(timings_path) if t["batch"] < start]
    else:
        opt, start = init_opt(cfg), 0
        collector = Collector(cfg, spec, base)
        metrics, timings = [], []
    _write_jsonl(metrics_path, metrics)
    _write_jsonl(timings_path, timings)
    last = metrics[-1] if metrics else {}
    done_batches = 0
    try:
        for b in range(start, cfg.total_batches):
            t0 = time.perf_counter()
            pieces, episodes, discarded = collector.collect(opt.nets, opt.norms)
            t1 = time.perf_counter()
            buffer = build_buffer(pieces, opt.norms, cfg)
            collected = sum(len(p) for p in pieces)
            if buffer.valid_transitions() != collected:
                raise RuntimeError("transitions lost while building the replay buffer")
            opt, diag = optimize_batch(opt, buffer, cfg, batch_rng(cfg, b))
            t2 = time.perf_counter()
            rec = {"batch": b, "transitions": collected, "discarded_episodes": discarded, **summarize(episodes), **diag}
            if cfg.eval_every and (b + 1) % cfg.eval_every == 0:
                g = evaluate(opt.nets, opt.norms, spec, base, cfg.seed, cfg.eval_episodes)
                rec["eval_median_goals"] = float(np.median(g))
            metrics.append(rec)
            timings.append({"batch": b, "collect_s": t1 - t0, "optimize_s": t2 - t1,
                            "eval_s": time.perf_counter() - t2})
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            with open(timings_path, "a") as fh:
                fh.write(json.dumps(timings[-1], sort_keys=True) + "\n")
            if (b + 1) % cfg.checkpoint_every == 0 or b + 1 == cfg.total_batches:
                save_checkpoint(ckpt, opt, b + 1, collector)
            if progress is not None:
                progress(rec)
            last = rec
            done_batches += 1
            if stop_after is not None and done_batches >= stop_after:
                break
    finally:
        collector.close()
    return {"metrics": last, "opt": opt, "out_dir": str(out)}

