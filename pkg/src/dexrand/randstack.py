"""Domain-randomization layers wrapped around the toy environment.

Per-episode draws (physical parameters, correlated noise, marker misplacement,
delay flags, timing rate, force probability, backlash widths) live in an
:class:`EpisodeNoiseState`. Per-step layers (observation noise, marker
dropout and occlusion, action noise, action delay, substep timing, backlash,
random forces) are pure functions of that state plus a generator.

Every array in the noise state carries a leading batch axis so a group of
environments is perturbed together; random draws are taken per environment
from that environment's own stream so results do not depend on the group.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from dexrand import quat, toyenv
from dexrand.toyenv import N_FINGERS, N_SUBSTEPS, SUBSTEP, EnvParams

LAYERS = (
    "physics",
    "observation_noise",
    "marker_dropout",
    "marker_occlusion",
    "action_noise",
    "action_delay",
    "timing",
    "backlash",
    "random_force",
)
# stream ids; "policy" and "goal" are consumed by the trainer and environment
STREAM_IDS = {name: i for i, name in enumerate(LAYERS + ("policy", "goal", "reset"))}

BACKLASH_EPS = 1e-12
FORCE_DECAY_PERIOD = 0.08


class ConfigError(ValueError):
    pass


@dataclass
class Distribution:
    """One of: lognormal (multiplicative), gaussian (additive), uniform, loguniform."""

    kind: str
    a: float
    b: float = 0.0

    KINDS = ("lognormal", "gaussian", "uniform", "loguniform")

    def validate(self, path: str) -> None:
        if self.kind not in self.KINDS:
            raise ConfigError(f"{path}: unknown distribution kind {self.kind!r}")
        if self.kind in ("lognormal", "gaussian") and self.a < 0:
            raise ConfigError(f"{path}: standard deviation must be >= 0")
        if self.kind in ("uniform", "loguniform") and self.a > self.b:
            raise ConfigError(f"{path}: range lo > hi")
        if self.kind == "loguniform" and self.a <= 0:
            raise ConfigError(f"{path}: loguniform bounds must be positive")

    def sample(self, base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        shape = np.shape(base)
        if self.kind == "lognormal":
            return base * np.exp(self.a * rng.standard_normal(shape))
        if self.kind == "gaussian":
            return base + self.a * rng.standard_normal(shape)
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, shape)
        return np.exp(rng.uniform(math.log(self.a), math.log(self.b), shape))


def default_physics() -> dict[str, Distribution]:
    out = {name: Distribution("lognormal", 0.2) for name in (
        "damping", "stiffness", "gain", "coupling", "object_mass", "object_inertia", "joint_inertia")}
    out["finger_base"] = Distribution("gaussian", 0.001)
    return out


@dataclass
class PhysicsSpec:
    enabled: bool = True
    params: dict[str, Distribution] = field(default_factory=default_physics)


@dataclass
class ObservationNoiseSpec:
    enabled: bool = True
    fingertip_correlated: float = 0.001  # m
    fingertip_uncorrelated: float = 0.002  # m
    object_pos_correlated: float = 0.005  # m
    object_pos_uncorrelated: float = 0.001  # m
    orientation_correlated: float = 0.1  # rad
    orientation_uncorrelated: float = 0.1  # rad
    fingertip_marker: float = 0.003  # m
    base_marker: float = 0.001  # m


@dataclass
class MarkerDropoutSpec:
    enabled: bool = True
    rate: float = 0.2  # 1/s
    duration: float = 1.0  # s


@dataclass
class MarkerOcclusionSpec:
    enabled: bool = True
    distance: float = 0.015  # m


@dataclass
class ActionNoiseSpec:
    enabled: bool = True
    uncorrelated_additive: float = 0.05  # fraction of the action range
    correlated_additive: float = 0.015  # fraction of the action range
    uncorrelated_multiplicative: float = 0.015
    action_range: float = 2.0


@dataclass
class ActionDelaySpec:
    enabled: bool = True
    probability: float = 0.5


@dataclass
class TimingSpec:
    enabled: bool = True
    rate_min: float = 1250.0  # 1/s
    rate_max: float = 10000.0


@dataclass
class BacklashSpec:
    enabled: bool = True
    jitter_std: float = 0.1


@dataclass
class RandomForceSpec:
    enabled: bool = True
    prob_min: float = 0.001
    prob_max: float = 0.1
    accel_std: float = 1.0  # m/s^2, scaled by object mass
    decay: float = 0.99  # per 80 ms


@dataclass
class RandomizationSpec:
    physics: PhysicsSpec = field(default_factory=PhysicsSpec)
    observation_noise: ObservationNoiseSpec = field(default_factory=ObservationNoiseSpec)
    marker_dropout: MarkerDropoutSpec = field(default_factory=MarkerDropoutSpec)
    marker_occlusion: MarkerOcclusionSpec = field(default_factory=MarkerOcclusionSpec)
    action_noise: ActionNoiseSpec = field(default_factory=ActionNoiseSpec)
    action_delay: ActionDelaySpec = field(default_factory=ActionDelaySpec)
    timing: TimingSpec = field(default_factory=TimingSpec)
    backlash: BacklashSpec = field(default_factory=BacklashSpec)
    random_force: RandomForceSpec = field(default_factory=RandomForceSpec)

    def validate(self) -> "RandomizationSpec":
        for path, dist in self.physics.params.items():
            dist.validate(f"randomization.physics.params.{path}")
            try:
                resolve_path(path)
            except ConfigError as exc:
                raise ConfigError(f"randomization.physics.params.{path}: {exc}") from None
        o = self.observation_noise
        for f in fields(o):
            if f.name != "enabled" and getattr(o, f.name) < 0:
                raise ConfigError(f"randomization.observation_noise.{f.name}: must be >= 0")
        if self.marker_dropout.rate < 0 or self.marker_dropout.duration < 0:
            raise ConfigError("randomization.marker_dropout.rate/duration: must be >= 0")
        if self.marker_occlusion.distance < 0:
            raise ConfigError("randomization.marker_occlusion.distance: must be >= 0")
        a = self.action_noise
        if min(a.uncorrelated_additive, a.correlated_additive, a.uncorrelated_multiplicative) < 0:
            raise ConfigError("randomization.action_noise: noise stds must be >= 0")
        if not 0.0 <= self.action_delay.probability <= 1.0:
            raise ConfigError("randomization.action_delay.probability: must be in [0, 1]")
        if not 0 < self.timing.rate_min <= self.timing.rate_max:
            raise ConfigError("randomization.timing.rate_min/rate_max: need 0 < min <= max")
        if self.backlash.jitter_std < 0:
            raise ConfigError("randomization.backlash.jitter_std: must be >= 0")
        r = self.random_force
        if not 0.0 <= r.prob_min <= r.prob_max <= 1.0 or r.prob_min <= 0:
            raise ConfigError("randomization.random_force.prob_min/prob_max: need 0 < min <= max <= 1")
        if not 0.0 < r.decay <= 1.0:
            raise ConfigError("randomization.random_force.decay: must be in (0, 1]")
        if r.accel_std < 0:
            raise ConfigError("randomization.random_force.accel_std: must be >= 0")
        return self

    def layer(self, name: str):
        if name not in LAYERS:
            raise ConfigError(f"unknown randomization layer {name!r}")
        return getattr(self, name)

    def set_all(self, enabled: bool) -> "RandomizationSpec":
        for name in LAYERS:
            self.layer(name).enabled = enabled
        return self


_PATH = re.compile(r"^([a-z_]+)(?:\[(\d+)\])?$")


def resolve_path(path: str) -> tuple[str, int | None]:
    m = _PATH.match(path)
    names = {f.name for f in fields(EnvParams)} - {"finger_axis"}
    if not m or m.group(1) not in names:
        raise ConfigError(f"unknown parameter path {path!r}")
    index = None if m.group(2) is None else int(m.group(2))
    if index is not None and index >= np.shape(getattr(EnvParams(), m.group(1)))[0]:
        raise ConfigError(f"parameter path {path!r} index out of range")
    return m.group(1), index


def streams_for(master_seed: int, instance: int, episode: int) -> dict[str, np.random.Generator]:
    """Independent generator per layer, keyed by (seed, instance, episode, layer)."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(instance, episode, sid)))
        for name, sid in STREAM_IDS.items()
    }


@dataclass
class EpisodeNoiseState:
    params: EnvParams
    tip_correlated: np.ndarray  # (N, 5, 3)
    object_correlated: np.ndarray  # (N, 3)
    orientation_correlated: np.ndarray  # (N, 4)
    tip_marker_offset: np.ndarray  # (N, 5, 3)
    base_marker_offset: np.ndarray  # (N, 3)
    action_correlated: np.ndarray  # (N, 5)
    delay_flags: np.ndarray  # (N, 5) bool
    prev_action: np.ndarray  # (N, 5)
    slack: np.ndarray  # (N, 5)
    backlash_neg: np.ndarray  # (N, 5)
    backlash_pos: np.ndarray  # (N, 5)
    timing_rate: np.ndarray  # (N,)
    force_prob: np.ndarray  # (N,)
    force: np.ndarray  # (N, 3)
    dropout_timer: np.ndarray  # (N, 5) seconds of masking left
    last_reading: np.ndarray  # (N, 5, 3)
    has_reading: np.ndarray  # (N, 5) bool

    def take(self, i) -> "EpisodeNoiseState":
        kw = {f.name: np.array(getattr(self, f.name)[i]) for f in fields(self) if f.name != "params"}
        return EpisodeNoiseState(params=toyenv.take_params(self.params, i), **kw)

    def put(self, i, part: "EpisodeNoiseState") -> None:
        for f in fields(self):
            if f.name == "params":
                for pf in fields(EnvParams):
                    getattr(self.params, pf.name)[i] = getattr(part.params, pf.name)
            else:
                getattr(self, f.name)[i] = getattr(part, f.name)


def stack_noise(items: Sequence[EpisodeNoiseState]) -> EpisodeNoiseState:
    kw = {f.name: np.concatenate([getattr(s, f.name) for s in items]) for f in fields(EpisodeNoiseState)
          if f.name != "params"}
    params = EnvParams(**{f.name: np.concatenate([getattr(s.params, f.name) for s in items])
                          for f in fields(EnvParams)})
    return EpisodeNoiseState(params=params, **kw)


def _random_rotation(rng: np.random.Generator, std: float) -> np.ndarray:
    """Rotation by a Gaussian angle about a uniformly random axis."""
    axis = quat.random_axis(rng)
    angle = std * rng.standard_normal()
    return quat.from_axis_angle(axis, angle)


def sample_physics(spec: PhysicsSpec, base: EnvParams, rng: np.random.Generator) -> EnvParams:
    params = base.copy()
    if not spec.enabled:
        return params
    for path in sorted(spec.params):
        dist = spec.params[path]
        name, index = resolve_path(path)
        arr = getattr(params, name)
        if index is None:
            setattr(params, name, np.asarray(dist.sample(arr, rng), dtype=float))
        else:
            arr[index] = dist.sample(arr[index], rng)
    return params


def sample_episode(spec: RandomizationSpec, base: EnvParams, streams: dict[str, np.random.Generator]
                   ) -> EpisodeNoiseState:
    """Per-episode draws for one environment, returned with a batch axis of 1."""
    spec.validate()
    params = sample_physics(spec.physics, base, streams["physics"]).validate()

    o = spec.observation_noise
    g = streams["observation_noise"]
    if o.enabled:
        tip_corr = o.fingertip_correlated * g.standard_normal((N_FINGERS, 3))
        obj_corr = o.object_pos_correlated * g.standard_normal(3)
        orient_corr = _random_rotation(g, o.orientation_correlated)
        tip_marker = o.fingertip_marker * g.standard_normal((N_FINGERS, 3))
        base_marker = o.base_marker * g.standard_normal(3)
    else:
        tip_corr = np.zeros((N_FINGERS, 3))
        obj_corr = np.zeros(3)
        orient_corr = quat.IDENTITY.copy()
        tip_marker = np.zeros((N_FINGERS, 3))
        base_marker = np.zeros(3)

    a = spec.action_noise
    if a.enabled:
        act_corr = a.correlated_additive * a.action_range * streams["action_noise"].standard_normal(N_FINGERS)
    else:
        act_corr = np.zeros(N_FINGERS)

    d = spec.action_delay
    if d.enabled:
        flags = streams["action_delay"].random(N_FINGERS) < d.probability
    else:
        flags = np.zeros(N_FINGERS, dtype=bool)

    t = spec.timing
    rate = streams["timing"].uniform(t.rate_min, t.rate_max) if t.enabled else math.inf

    b = spec.backlash
    if b.enabled:
        gb = streams["backlash"]
        neg = np.maximum(params.backlash_neg + b.jitter_std * gb.standard_normal(N_FINGERS), 0.0)
        pos = np.maximum(params.backlash_pos + b.jitter_std * gb.standard_normal(N_FINGERS), 0.0)
    else:
        neg = params.backlash_neg.copy()
        pos = params.backlash_pos.copy()

    f = spec.random_force
    if f.enabled:
        p = math.exp(streams["random_force"].uniform(math.log(f.prob_min), math.log(f.prob_max)))
    else:
        p = 0.0

    one = EpisodeNoiseState(
        params=params,
        tip_correlated=tip_corr,
        object_correlated=obj_corr,
        orientation_correlated=orient_corr,
        tip_marker_offset=tip_marker,
        base_marker_offset=base_marker,
        action_correlated=act_corr,
        delay_flags=flags,
        prev_action=np.zeros(N_FINGERS),
        slack=np.zeros(N_FINGERS),
        backlash_neg=neg,
        backlash_pos=pos,
        timing_rate=np.array(rate, dtype=float),
        force_prob=np.array(p, dtype=float),
        force=np.zeros(3),
        dropout_timer=np.zeros(N_FINGERS),
        last_reading=np.zeros((N_FINGERS, 3)),
        has_reading=np.zeros(N_FINGERS, dtype=bool),
    )
    kw = {fl.name: np.asarray(getattr(one, fl.name))[None] for fl in fields(one) if fl.name != "params"}
    return EpisodeNoiseState(params=toyenv._expand_params(params), **kw)


# per-step layers ------------------------------------------------------------

def _normals(rngs: Sequence[np.random.Generator], shape) -> np.ndarray:
    return np.stack([g.standard_normal(shape) for g in rngs])


def marker_dropout(markers: np.ndarray, noise: EpisodeNoiseState, dt, rngs: Sequence[np.random.Generator],
                   spec: MarkerDropoutSpec) -> tuple[np.ndarray, np.ndarray]:
    """Mask fingertip markers for ``spec.duration`` seconds, triggered at ``rate * dt`` per step.

    Returns the readings (last available ones where masked) and the mask.
    A trigger during an active mask restarts its timer.
    """
    if not spec.enabled or spec.rate == 0.0:
        return markers, np.zeros(markers.shape[:-1], dtype=bool)
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (len(rngs),))
    if np.any(dt <= 0):
        raise ValueError("dt must be positive")
    u = np.stack([g.random(N_FINGERS) for g in rngs])
    trigger = u < spec.rate * dt[:, None]
    noise.dropout_timer = np.where(trigger, spec.duration, noise.dropout_timer)
    masked = (noise.dropout_timer > 1e-9) & noise.has_reading
    noise.dropout_timer = np.maximum(noise.dropout_timer - dt[:, None], 0.0)
    return np.where(masked[..., None], noise.last_reading, markers), masked


def occluded(tips: np.ndarray, object_pos: np.ndarray, distance: float) -> np.ndarray:
    """True where another fingertip or the object center is within ``distance`` of a fingertip."""
    if distance <= 0:
        return np.zeros(tips.shape[:-1], dtype=bool)
    diff = tips[..., :, None, :] - tips[..., None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    eye = np.eye(tips.shape[-2], dtype=bool)
    near_finger = np.any((dist < distance) & ~eye, axis=-1)
    d_obj = tips - object_pos[..., None, :]
    near_obj = np.sqrt(np.sum(d_obj**2, axis=-1)) < distance
    return near_finger | near_obj


def marker_occlusion(markers: np.ndarray, tips: np.ndarray, object_pos: np.ndarray, distance: float,
                     noise: EpisodeNoiseState) -> tuple[np.ndarray, np.ndarray]:
    if distance < 0:
        raise ValueError("occlusion distance must be >= 0")
    mask = occluded(tips, object_pos, distance) & noise.has_reading
    return np.where(mask[..., None], noise.last_reading, markers), mask


def perturb_observation(parts: dict[str, np.ndarray], noise: EpisodeNoiseState,
                        rngs: Sequence[np.random.Generator], dt, spec: RandomizationSpec) -> dict[str, np.ndarray]:
    """Noisy policy-side measurements from clean ones (batched dict).

    Fingertips are read through misplaced markers with correlated and fresh
    uncorrelated noise, then marker occlusion and dropout substitute the last
    available reading. The object position carries the hand-base marker
    misplacement plus correlated and uncorrelated noise; the relative goal is
    rotated by a per-episode and a per-step random rotation.
    """
    o = spec.observation_noise
    tips = parts["fingertip_pos"]
    out = dict(parts)
    n = len(rngs)
    if o.enabled:
        unc = _normals(rngs, (N_FINGERS + 1, 3))
        readings = tips + noise.tip_marker_offset + noise.tip_correlated + o.fingertip_uncorrelated * unc[:, :N_FINGERS]
        out["object_pos"] = (parts["object_pos"] + noise.base_marker_offset + noise.object_correlated
                             + o.object_pos_uncorrelated * unc[:, N_FINGERS])
        step_rot = np.stack([_random_rotation(g, o.orientation_uncorrelated) for g in rngs])
        rot = quat.mul(step_rot, noise.orientation_correlated)
        out["relative_goal"] = quat.canonical(quat.mul(rot, parts["relative_goal"]))
    else:
        readings = tips
    mask = np.zeros((n, N_FINGERS), dtype=bool)
    if spec.marker_occlusion.enabled:
        readings, m = marker_occlusion(readings, tips, parts["object_pos"], spec.marker_occlusion.distance, noise)
        mask |= m
    if spec.marker_dropout.enabled:
        readings, m = marker_dropout(readings, noise, dt, rngs, spec.marker_dropout)
        mask |= m
    if spec.marker_occlusion.enabled or spec.marker_dropout.enabled:
        noise.last_reading = np.where(mask[..., None], noise.last_reading, readings)
        noise.has_reading = np.ones_like(noise.has_reading)
    out["fingertip_pos"] = readings
    return out


def perturb_action(a: np.ndarray, noise: EpisodeNoiseState, rngs: Sequence[np.random.Generator],
                   spec: ActionNoiseSpec) -> np.ndarray:
    """``a (1 + g_m) + g_u + g_c`` clamped to [-1, 1]."""
    if not spec.enabled:
        return a
    z = _normals(rngs, (2, N_FINGERS))
    g_m = spec.uncorrelated_multiplicative * z[:, 0]
    g_u = spec.uncorrelated_additive * spec.action_range * z[:, 1]
    return np.clip(a * (1.0 + g_m) + g_u + noise.action_correlated, -1.0, 1.0)


def delay_action(a: np.ndarray, noise: EpisodeNoiseState) -> np.ndarray:
    """Flagged actuators get the previous step's input (zero on the first step)."""
    out = np.where(noise.delay_flags, noise.prev_action, a)
    noise.prev_action = np.array(a, dtype=float)
    return out


def sample_substeps(noise: EpisodeNoiseState, rngs: Sequence[np.random.Generator],
                    spec: TimingSpec) -> np.ndarray:
    """Ten substep lengths of ``8 ms + Exp(rate)`` per environment."""
    n = len(rngs)
    if not spec.enabled:
        return np.full((n, N_SUBSTEPS), SUBSTEP)
    return SUBSTEP + np.stack([g.exponential(1.0 / r, N_SUBSTEPS) for g, r in zip(rngs, noise.timing_rate)])


def backlash(a_in, slack, delta_neg, delta_pos, dt):
    """Slack-state backlash gate.

    ``s' = clip(s + a * delta_sgn(a) * dt, -1, 1)``,
    ``alpha = 1 - clip(|sgn(a) - s| / (|s' - s| + eps), 0, 1)``; returns
    ``(alpha * a, s')``. A zero input passes zero and leaves the slack alone.
    """
    a_in = np.asarray(a_in, dtype=float)
    slack = np.asarray(slack, dtype=float)
    sgn = np.sign(a_in)
    delta = np.where(a_in > 0, delta_pos, delta_neg)
    dt = np.asarray(dt, dtype=float)
    s_new = np.clip(slack + a_in * delta * dt, -1.0, 1.0)
    ratio = np.abs(sgn - slack) / (np.abs(s_new - slack) + BACKLASH_EPS)
    alpha = 1.0 - np.clip(ratio, 0.0, 1.0)
    zero = a_in == 0.0
    out = np.where(zero, 0.0, alpha * a_in)
    s_new = np.where(zero, slack, s_new)
    return out, s_new


def backlash_alpha(a_in, slack, delta_neg, delta_pos, dt) -> np.ndarray:
    a_in = np.asarray(a_in, dtype=float)
    sgn = np.sign(a_in)
    delta = np.where(a_in > 0, delta_pos, delta_neg)
    s_new = np.clip(slack + a_in * delta * dt, -1.0, 1.0)
    return 1.0 - np.clip(np.abs(sgn - slack) / (np.abs(s_new - slack) + BACKLASH_EPS), 0.0, 1.0)


def random_force(noise: EpisodeNoiseState, mass, dt_step, rngs: Sequence[np.random.Generator],
                 spec: RandomForceSpec) -> np.ndarray:
    """Decay the stored force and, with the episode's probability, replace it with a fresh draw."""
    mass = np.asarray(mass, dtype=float)
    if np.any(mass <= 0):
        raise ValueError("object mass must be positive")
    if not spec.enabled:
        return noise.force
    dt_step = np.broadcast_to(np.asarray(dt_step, dtype=float), (len(rngs),))
    noise.force = noise.force * (spec.decay ** (dt_step / FORCE_DECAY_PERIOD))[:, None]
    draws = np.stack([np.concatenate([[g.random()], g.standard_normal(3)]) for g in rngs])
    trigger = draws[:, 0] < noise.force_prob
    fresh = spec.accel_std * np.broadcast_to(mass, (len(rngs),))[:, None] * draws[:, 1:]
    noise.force = np.where(trigger[:, None], fresh, noise.force)
    return noise.force


class RandomizedEnvs:
    """A fixed set of environment slots stepped through every enabled layer.

    Slot ``i`` has instance id ``instances[i]``; its ``k``-th episode draws
    every random number from streams keyed by (seed, instance, k), so the
    trajectories do not depend on how slots are grouped or scheduled.
    """

    def __init__(self, spec: RandomizationSpec, base: EnvParams, seed: int, instances: Sequence[int],
                 prefetch: int = 2):
        self.spec = spec.validate()
        self.base = base.copy().validate()
        self.seed = int(seed)
        self.instances = [int(i) for i in instances]
        self.prefetch = max(int(prefetch), 1)
        self.episodes = np.full(len(self.instances), -1, dtype=np.int64)
        self.next_episode = np.zeros(len(self.instances), dtype=np.int64)
        self.pool: list[list] = [[] for _ in self.instances]
        self.streams: list[dict[str, np.random.Generator]] = [{} for _ in self.instances]
        self.noise: EpisodeNoiseState | None = None
        self.state: toyenv.EnvState | None = None
        self.last_dt = np.full(len(self.instances), toyenv.STEP_DURATION)

    def __len__(self) -> int:
        return len(self.instances)

    def _refill(self) -> None:
        """Prepare upcoming episodes for every slot below the prefetch depth in one batched warm-up.

        An episode's draws depend only on its own streams, so preparing it
        early or alongside others does not change it.
        """
        jobs = []
        for i in range(len(self)):
            while len(self.pool[i]) + sum(1 for j, _, _ in jobs if j == i) < self.prefetch:
                k = int(self.next_episode[i])
                self.next_episode[i] += 1
                streams = streams_for(self.seed, self.instances[i], k)
                jobs.append((i, k, streams))
        if not jobs:
            return
        noises = [sample_episode(self.spec, self.base, st) for _, _, st in jobs]
        fresh = stack_noise(noises)
        env = toyenv.reset_batch(fresh.params, [st["reset"] for _, _, st in jobs])
        for j, (i, k, st) in enumerate(jobs):
            self.pool[i].append((k, st, noises[j], toyenv.take_state(env, slice(j, j + 1))))

    def reset(self, slots: Sequence[int] | None = None) -> None:
        """Start the next episode in each listed slot (all slots by default)."""
        slots = list(range(len(self))) if slots is None else [int(i) for i in slots]
        if not slots:
            return
        if any(not self.pool[i] for i in slots):
            self._refill()
        parts, envs = [], []
        for i in slots:
            k, st, noise, env = self.pool[i].pop(0)
            self.episodes[i] = k
            self.streams[i] = st
            parts.append(noise)
            envs.append(env)
        fresh = stack_noise(parts)
        env = toyenv.EnvState(**{f.name: np.concatenate([getattr(e, f.name) for e in envs])
                                 for f in fields(toyenv.EnvState)})
        if self.noise is None or self.state is None:
            if slots != list(range(len(self))):
                raise RuntimeError("the first reset must cover every slot")
            self.noise, self.state = fresh, env
        else:
            idx = np.array(slots)
            self.noise.put(idx, fresh)
            toyenv.put_state(self.state, idx, env)
        self.last_dt[slots] = toyenv.STEP_DURATION

    def _rngs(self, layer: str) -> list[np.random.Generator]:
        return [s[layer] for s in self.streams]

    def observe(self) -> toyenv.ObservationPair:
        def noise_fn(parts):
            return perturb_observation(parts, self.noise, self._rngs("observation_noise"), self.last_dt, self.spec)

        return toyenv.build_observations(self.state, self.noise.params, noise=noise_fn)

    def observe_slots(self, slots: Sequence[int]) -> toyenv.ObservationPair:
        """Observe only the listed slots; other slots' streams are untouched."""
        idx = np.asarray(slots, dtype=np.int64)
        noise = self.noise.take(idx)
        state = toyenv.take_state(self.state, idx)
        rngs = [self.streams[i]["observation_noise"] for i in idx]

        def noise_fn(parts):
            return perturb_observation(parts, noise, rngs, self.last_dt[idx], self.spec)

        obs = toyenv.build_observations(state, noise.params, noise=noise_fn)
        self.noise.put(idx, noise)
        return obs

    def step(self, bins: np.ndarray):
        """Advance every slot; returns ``(reward, done, reasons, blowup)``."""
        spec, noise = self.spec, self.noise
        a = toyenv.BIN_CENTERS[np.asarray(bins, dtype=np.int64)]
        a = perturb_action(a, noise, self._rngs("action_noise"), spec.action_noise)
        if spec.action_delay.enabled:
            a = delay_action(a, noise)
        durations = sample_substeps(noise, self._rngs("timing"), spec.timing)
        dt = np.sum(durations, axis=-1)
        if spec.backlash.enabled:
            a, noise.slack = backlash(a, noise.slack, noise.backlash_neg, noise.backlash_pos, dt[:, None])
        force = None
        if spec.random_force.enabled:
            force = random_force(noise, noise.params.object_mass, dt, self._rngs("random_force"), spec.random_force)
        self.state, r, done, reasons, bad = toyenv.step_batch(
            self.state, noise.params, a, durations, self._rngs("goal"), force)
        self.last_dt = dt
        return r, done, reasons, bad
