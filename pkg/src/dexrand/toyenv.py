"""Deterministic stand-in for the in-hand reorientation environment.

Five single-DOF fingers pivot around a palm and drag a free-floating object by
viscous contact coupling. Task semantics follow the original environment:
quaternion goals with a 0.4 rad tolerance, relative actions discretized into 11
bins, exponential smoothing of actions, ``d_t - d_{t+1}`` shaped reward with a
+5 goal bonus and a -20 drop penalty, and the three termination rules.

All physics functions broadcast over leading batch axes so a group of
environments can be stepped as one set of arrays. Single-environment entry
points (:func:`reset`, :func:`step`) wrap the batched core with a batch of one.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from typing import IO, Sequence

import numpy as np

from dexrand import quat

N_FINGERS = 5
N_BINS = 11
N_SUBSTEPS = 10
SUBSTEP = 0.008
STEP_DURATION = N_SUBSTEPS * SUBSTEP
SMOOTHING = 0.3
GOAL_TOLERANCE = 0.4
GOAL_BONUS = 5.0
DROP_PENALTY = -20.0
GOAL_TIMEOUT = 8.0
MAX_GOALS = 50
WARMUP_STEPS = 100
WARMUP_ATTEMPTS = 100
LIMIT_GAIN_RATIO = 10.0

DONE_NONE = ""
DONE_DROP = "drop"
DONE_TIMEOUT = "timeout"
DONE_GOAL_LIMIT = "goal-limit"

POLICY_FIELDS = (("relative_goal", 4), ("fingertip_pos", 15), ("object_pos", 3))
VALUE_FIELDS = (
    ("relative_goal", 4),
    ("absolute_goal", 4),
    ("fingertip_pos", 15),
    ("object_pos", 3),
    ("object_quat", 4),
    ("joint_pos", 5),
    ("joint_vel", 5),
    ("object_vel", 3),
    ("object_angvel", 3),
)
POLICY_DIM = sum(n for _, n in POLICY_FIELDS)
VALUE_DIM = sum(n for _, n in VALUE_FIELDS)
PRIVILEGED_FIELDS = frozenset(name for name, _ in VALUE_FIELDS) - frozenset(name for name, _ in POLICY_FIELDS)


class InitializationError(RuntimeError):
    pass


class NumericalBlowupError(FloatingPointError):
    def __init__(self, substep: int, message: str = ""):
        super().__init__(message or f"non-finite state after substep {substep}")
        self.substep = substep


class InvalidParamsError(ValueError):
    pass


def bin_centers() -> np.ndarray:
    k = np.arange(N_BINS)
    return -1.0 + (2.0 * k + 1.0) / N_BINS


BIN_CENTERS = bin_centers()


def _finger_geometry() -> tuple[np.ndarray, np.ndarray]:
    az = 2.0 * np.pi * np.arange(N_FINGERS) / N_FINGERS
    radial = np.stack([np.cos(az), np.sin(az), np.zeros(N_FINGERS)], axis=-1)
    tangent = np.stack([-np.sin(az), np.cos(az), np.zeros(N_FINGERS)], axis=-1)
    tilt = np.deg2rad(np.array([50.0, -50.0, 50.0, -50.0, 50.0]))
    axis = np.cos(tilt)[:, None] * tangent + np.sin(tilt)[:, None] * np.array([0.0, 0.0, 1.0])
    return 0.07 * radial, axis / np.linalg.norm(axis, axis=-1, keepdims=True)


@dataclass
class EnvParams:
    """Physical parameters. Per-joint fields have shape (5,); batched copies add leading axes."""

    damping: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, 0.045))  # N m s/rad
    equilibrium: np.ndarray = field(default_factory=lambda: np.zeros(N_FINGERS))  # rad
    friction: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, 0.01))  # N m
    stiffness: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, 0.75))  # N m/rad
    range_min: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, -0.8))  # rad
    range_max: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, 0.8))  # rad
    joint_inertia: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, 1e-3))  # kg m^2
    gain: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, 1.0))  # N m/rad
    force_range: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, 1.0))  # N m
    backlash_neg: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, 20.0))  # 1/s
    backlash_pos: np.ndarray = field(default_factory=lambda: np.full(N_FINGERS, 20.0))  # 1/s
    object_mass: np.ndarray = field(default_factory=lambda: np.array(0.05))  # kg
    object_inertia: np.ndarray = field(default_factory=lambda: np.array(1e-4))  # kg m^2
    contact_radius: np.ndarray = field(default_factory=lambda: np.array(0.052))  # m
    coupling: np.ndarray = field(default_factory=lambda: np.array(6e-4))  # N m s
    centering_stiffness: np.ndarray = field(default_factory=lambda: np.array(20.0))  # N/m
    gravity: np.ndarray = field(default_factory=lambda: np.array(9.81))  # m/s^2
    drop_height: np.ndarray = field(default_factory=lambda: np.array(-0.04))  # m
    link_length: np.ndarray = field(default_factory=lambda: np.array(0.05))  # m
    palm_center: np.ndarray = field(default_factory=lambda: np.zeros(3))  # m
    finger_base: np.ndarray = field(default_factory=lambda: _finger_geometry()[0])  # m, (5, 3)
    finger_axis: np.ndarray = field(default_factory=lambda: _finger_geometry()[1])  # unit, (5, 3)

    def copy(self) -> "EnvParams":
        return EnvParams(**{f.name: np.array(getattr(self, f.name), dtype=float) for f in fields(self)})

    def validate(self) -> "EnvParams":
        if np.any(self.range_min >= self.range_max):
            raise InvalidParamsError("joint range min must be below max")
        positive = ("gain", "force_range", "joint_inertia", "object_mass", "object_inertia",
                    "contact_radius", "link_length")
        for name in positive:
            if np.any(getattr(self, name) <= 0):
                raise InvalidParamsError(f"{name} must be strictly positive")
        nonneg = ("damping", "friction", "stiffness", "backlash_neg", "backlash_pos", "coupling",
                  "centering_stiffness", "gravity")
        for name in nonneg:
            if np.any(getattr(self, name) < 0):
                raise InvalidParamsError(f"{name} must be non-negative")
        axis_norm = np.sqrt(np.sum(self.finger_axis**2, axis=-1))
        if np.any(np.abs(axis_norm - 1.0) > 1e-9):
            raise InvalidParamsError("finger axes must be unit vectors")
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise InvalidParamsError(f"{f.name} is not finite")
        return self

    def to_dict(self) -> dict:
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown EnvParams fields: {sorted(unknown)}")
        base = cls()
        for k, v in d.items():
            ref = np.asarray(getattr(base, k))
            arr = np.array(v, dtype=float)
            if arr.shape != ref.shape:
                raise ValueError(f"EnvParams.{k}: expected shape {ref.shape}, got {arr.shape}")
            setattr(base, k, arr)
        return base


def stack_params(items: Sequence[EnvParams]) -> EnvParams:
    return EnvParams(**{f.name: np.stack([np.asarray(getattr(p, f.name)) for p in items]) for f in fields(EnvParams)})


def take_params(params: EnvParams, i) -> EnvParams:
    return EnvParams(**{f.name: np.array(getattr(params, f.name)[i]) for f in fields(EnvParams)})


@dataclass
class EnvState:
    """Environment state; every field carries the batch axes first."""

    q: np.ndarray
    qd: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    quat: np.ndarray
    omega: np.ndarray
    goal: np.ndarray
    goal_count: np.ndarray
    time_since_goal: np.ndarray
    smoothed_action: np.ndarray
    contact_loss_time: np.ndarray
    time: np.ndarray
    steps: np.ndarray

    def copy(self) -> "EnvState":
        return EnvState(**{f.name: np.array(getattr(self, f.name)) for f in fields(self)})


def take_state(state: EnvState, i) -> EnvState:
    return EnvState(**{f.name: np.array(getattr(state, f.name)[i]) for f in fields(EnvState)})


def put_state(state: EnvState, i, part: EnvState) -> None:
    for f in fields(EnvState):
        getattr(state, f.name)[i] = getattr(part, f.name)


def stack_states(items: Sequence[EnvState]) -> EnvState:
    return EnvState(**{f.name: np.stack([getattr(s, f.name) for s in items]) for f in fields(EnvState)})


def _initial_state(params: EnvParams, orientation: np.ndarray) -> EnvState:
    batch = orientation.shape[:-1]
    zeros5 = np.zeros(batch + (N_FINGERS,))
    return EnvState(
        q=np.broadcast_to(params.equilibrium, batch + (N_FINGERS,)).copy(),
        qd=zeros5.copy(),
        pos=np.broadcast_to(params.palm_center, batch + (3,)).copy(),
        vel=np.zeros(batch + (3,)),
        quat=orientation.copy(),
        omega=np.zeros(batch + (3,)),
        goal=np.broadcast_to(quat.IDENTITY, batch + (4,)).copy(),
        goal_count=np.zeros(batch, dtype=np.int64),
        time_since_goal=np.zeros(batch),
        smoothed_action=zeros5.copy(),
        contact_loss_time=np.zeros(batch),
        time=np.zeros(batch),
        steps=np.zeros(batch, dtype=np.int64),
    )


def _dot3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def finger_frames(params: EnvParams) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors spanning each finger's swing plane: toward the palm, and its right-handed partner."""
    to_palm = params.palm_center[..., None, :] - params.finger_base
    u = params.finger_axis
    inplane = to_palm - _dot3(to_palm, u)[..., None] * u
    inward = inplane / np.sqrt(_dot3(inplane, inplane))[..., None]
    return inward, _cross(u, inward)


def fingertips(q: np.ndarray, params: EnvParams, frames=None) -> np.ndarray:
    inward, side = finger_frames(params) if frames is None else frames
    L = params.link_length[..., None, None]
    return params.finger_base + L * (np.cos(q)[..., None] * inward + np.sin(q)[..., None] * side)


def joint_substep(q, qd, target, params: EnvParams, h):
    """One linearly-implicit Euler substep of the joint dynamics.

    Stiff terms (position gain, passive stiffness, limit spring, damping) are
    integrated implicitly, which makes the linear regime unconditionally
    stable and energy-dissipative. Friction loss is applied as a stick-slip
    impulse bounded by the free velocity.
    """
    h = np.asarray(h)[..., None] if np.ndim(h) else h
    J = params.joint_inertia
    raw = params.gain * (target - q)
    tau_p = np.clip(raw, -params.force_range, params.force_range)
    k_p = np.where(np.abs(raw) < params.force_range, params.gain, 0.0)
    k_lim = LIMIT_GAIN_RATIO * params.gain
    over = q - params.range_max
    under = q - params.range_min
    tau_lim = np.where(over > 0, -k_lim * over, 0.0) + np.where(under < 0, -k_lim * under, 0.0)
    k_l = np.where((over > 0) | (under < 0), k_lim, 0.0)
    tau = tau_p - params.stiffness * (q - params.equilibrium) + tau_lim - params.damping * qd
    k_eff = k_p + params.stiffness + k_l
    m_eff = J + h * params.damping + h * h * k_eff
    v_free = (J * qd + h * (tau + params.damping * qd)) / m_eff
    slip = h * params.friction / m_eff
    # written so a NaN velocity propagates instead of sticking at zero
    v_new = np.where(np.abs(v_free) <= slip, 0.0, v_free - np.sign(v_free) * slip)
    return q + h * v_new, v_new


def object_substep(state_q, state_qd, pos, vel, quat_, omega, params: EnvParams, h, ext_force, frames):
    tips = fingertips(state_q, params, frames)
    d = tips - pos[..., None, :]
    contact = _dot3(d, d) < (params.contact_radius**2)[..., None]
    n = np.sum(contact, axis=-1).astype(float)
    cq = np.where(contact, params.coupling[..., None] * state_qd, 0.0)
    torque = np.sum(cq[..., None] * params.finger_axis, axis=-2)
    hh = h if np.ndim(h) == 0 else np.asarray(h)[..., None]
    omega = omega + hh * torque / params.object_inertia[..., None]
    quat_ = quat.normalize(quat.mul(quat.from_rotvec(omega * hh), quat_))
    m = params.object_mass[..., None]
    spring = (n * params.centering_stiffness)[..., None] * (params.palm_center - pos)
    grav = np.zeros_like(pos)
    grav[..., 2] = -params.object_mass * params.gravity
    b = (n * np.sqrt(params.centering_stiffness * params.object_mass))[..., None]
    vel = (m * vel + hh * (spring + grav + ext_force)) / (m + hh * b)
    pos = pos + hh * vel
    return pos, vel, quat_, omega, n


def goal_distance(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Rotation angle (rad) between two unit quaternions."""
    quat.check_unit(qa)
    quat.check_unit(qb)
    return quat.angle_between(np.asarray(qa, dtype=float), np.asarray(qb, dtype=float))


def reward(d_t, d_t1, dropped, achieved=None):
    """Shaped reward ``d_t - d_t1`` plus goal bonus and drop penalty.

    ``achieved`` defaults to ``d_t1 < 0.4``.
    """
    d_t = np.asarray(d_t, dtype=float)
    d_t1 = np.asarray(d_t1, dtype=float)
    if achieved is None:
        achieved = d_t1 < GOAL_TOLERANCE
    r = (d_t - d_t1) + GOAL_BONUS * np.asarray(achieved, dtype=float) + DROP_PENALTY * np.asarray(dropped, dtype=float)
    return r if r.ndim else float(r)


def sample_goal(rng: np.random.Generator) -> np.ndarray:
    return quat.random_unit(rng)


def _finite(s: EnvState) -> np.ndarray:
    total = (np.sum(s.q, axis=-1) + np.sum(s.qd, axis=-1) + np.sum(s.pos, axis=-1) + np.sum(s.vel, axis=-1)
             + np.sum(s.quat, axis=-1) + np.sum(s.omega, axis=-1))
    return np.isfinite(total)


def _flatten_state(state: EnvState) -> EnvState:
    batch = state.q.shape[:-1]
    out = {}
    for f in fields(EnvState):
        v = np.asarray(getattr(state, f.name))
        out[f.name] = v.reshape((-1,) + v.shape[len(batch):])
    return EnvState(**out)


def _flatten_params(params: EnvParams, batch: tuple) -> EnvParams:
    ref = EnvParams()
    out = {}
    for f in fields(EnvParams):
        tail = np.shape(getattr(ref, f.name))
        v = np.broadcast_to(getattr(params, f.name), batch + tail)
        out[f.name] = v.reshape((-1,) + tail)
    return EnvParams(**out)


def _integrate(s: EnvState, target, params: EnvParams, durations, ext_force, frames, locate: bool = False):
    """Run the ten substeps in place; with ``locate`` return the first non-finite substep per env."""
    first = np.full(s.q.shape[:-1], -1, dtype=np.int64)
    for k in range(N_SUBSTEPS):
        h = durations[..., k]
        s.q, s.qd = joint_substep(s.q, s.qd, target, params, h)
        s.pos, s.vel, s.quat, s.omega, n = object_substep(
            s.q, s.qd, s.pos, s.vel, s.quat, s.omega, params, h, ext_force, frames
        )
        s.contact_loss_time = np.where(n > 0, 0.0, s.contact_loss_time + h)
        if locate:
            first = np.where((first < 0) & ~_finite(s), k, first)
    return first


def smooth_and_target(smoothed, q, action, params: EnvParams):
    """EMA update of the action and the step's joint targets (relative to the current angles)."""
    smoothed = (1.0 - SMOOTHING) * smoothed + SMOOTHING * action
    return smoothed, q + smoothed * (0.5 * (params.range_max - params.range_min))


def joint_step(q, qd, smoothed, action, params: EnvParams, durations):
    """Joint-only environment step; matches the joints of :func:`physics_step` bit for bit.

    The object never acts on the fingers, so joint trajectories can be
    replayed without it.
    """
    smoothed, target = smooth_and_target(smoothed, q, action, params)
    for k in range(N_SUBSTEPS):
        q, qd = joint_substep(q, qd, target, params, durations[..., k])
    return q, qd, smoothed


def physics_step(state: EnvState, params: EnvParams, action: np.ndarray, durations: np.ndarray,
                 ext_force: np.ndarray | None = None):
    """Advance joints and object by one environment step (no goal logic).

    ``action`` is continuous in [-1, 1]; ``durations`` has the 10 substep
    lengths on its last axis. Returns the new state and a per-env array with
    the first substep index that produced non-finite values (-1 if none).
    """
    s = state.copy()
    durations = np.asarray(durations, dtype=float)
    if durations.shape[-1] != N_SUBSTEPS:
        raise ValueError(f"expected {N_SUBSTEPS} substep durations, got {durations.shape[-1]}")
    if ext_force is None:
        ext_force = np.zeros_like(s.pos)
    s.smoothed_action, target = smooth_and_target(s.smoothed_action, s.q, action, params)
    frames = finger_frames(params)
    _integrate(s, target, params, durations, ext_force, frames)
    bad = np.full(s.q.shape[:-1], -1, dtype=np.int64)
    finite = _finite(s)
    if not np.all(finite):
        # re-run the failing environments substep by substep to locate the blowup
        idx = np.flatnonzero(~finite.reshape(-1))
        flat = take_state(_flatten_state(state), idx)
        flat.smoothed_action = s.smoothed_action.reshape(-1, N_FINGERS)[idx]
        fp = take_params(_flatten_params(params, state.q.shape[:-1]), idx)
        fd = np.broadcast_to(durations, state.q.shape[:-1] + (N_SUBSTEPS,)).reshape(-1, N_SUBSTEPS)[idx]
        ff = np.broadcast_to(ext_force, state.pos.shape).reshape(-1, 3)[idx]
        ft = np.broadcast_to(target, state.q.shape).reshape(-1, N_FINGERS)[idx]
        first = _integrate(flat, ft, fp, fd, ff, finger_frames(fp), locate=True)
        flat_bad = bad.reshape(-1)
        flat_bad[idx] = first
    dt = np.sum(durations, axis=-1)
    s.time = s.time + dt
    s.steps = s.steps + 1
    return s, bad


def step_batch(state: EnvState, params: EnvParams, action: np.ndarray, durations: np.ndarray,
               rngs: Sequence[np.random.Generator], ext_force: np.ndarray | None = None):
    """Batched environment step on continuous actions with goal bookkeeping.

    Returns ``(state, reward, done, reasons, blowup)`` where ``reasons`` is a
    list of done-reason strings and ``blowup`` the offending substep (-1 none).
    """
    d_prev = quat.angle_between(state.goal, state.quat)
    s, bad = physics_step(state, params, action, durations, ext_force)
    d_new = quat.angle_between(s.goal, s.quat)
    dropped = s.pos[..., 2] < params.drop_height
    achieved = d_new < GOAL_TOLERANCE
    r = reward(d_prev, d_new, dropped, achieved)
    dt = np.sum(durations, axis=-1)
    s.goal_count = s.goal_count + achieved.astype(np.int64)
    s.time_since_goal = np.where(achieved, 0.0, s.time_since_goal + dt)
    n = len(rngs)
    reasons = [DONE_NONE] * n
    done = np.zeros(n, dtype=bool)
    for i in range(n):
        if dropped[i]:
            reasons[i] = DONE_DROP
        elif s.goal_count[i] >= MAX_GOALS:
            reasons[i] = DONE_GOAL_LIMIT
        elif s.time_since_goal[i] > GOAL_TIMEOUT:
            reasons[i] = DONE_TIMEOUT
        done[i] = reasons[i] != DONE_NONE
        if achieved[i] and not done[i]:
            s.goal[i] = sample_goal(rngs[i])
    return s, r, done, reasons, bad


def step(state: EnvState, params: EnvParams, action, substep_durations, rng: np.random.Generator,
         ext_force: np.ndarray | None = None, continuous: bool = False):
    """Single-environment step.

    ``action`` holds bin indices in [0, 10] unless ``continuous`` is set.
    ``rng`` draws the next goal when the current one is achieved.
    """
    action = np.asarray(action)
    if not continuous:
        if action.shape != (N_FINGERS,) or np.any(action < 0) or np.any(action >= N_BINS):
            raise ValueError(f"action must be {N_FINGERS} bin indices in [0, {N_BINS - 1}]")
        action = BIN_CENTERS[action.astype(np.int64)]
    durations = np.asarray(substep_durations, dtype=float)
    if durations.shape != (N_SUBSTEPS,):
        raise ValueError(f"exactly {N_SUBSTEPS} substep durations required")
    batch = _expand_state(state)
    p = _expand_params(params)
    f = None if ext_force is None else np.asarray(ext_force, dtype=float)[None]
    out, r, done, reasons, bad = step_batch(batch, p, action[None], durations[None], [rng], f)
    if bad[0] >= 0:
        raise NumericalBlowupError(int(bad[0]))
    return take_state(out, 0), float(r[0]), bool(done[0]), reasons[0]


def _expand_state(state: EnvState) -> EnvState:
    return EnvState(**{f.name: np.asarray(getattr(state, f.name))[None] for f in fields(EnvState)})


def _expand_params(params: EnvParams) -> EnvParams:
    return EnvParams(**{f.name: np.asarray(getattr(params, f.name))[None] for f in fields(EnvParams)})


def reset_batch(params: EnvParams, rngs: Sequence[np.random.Generator]) -> EnvState:
    """Warm-start each environment with 100 steps of uniformly random actions.

    An environment whose object drops during warm-up restarts its attempt with
    fresh draws from its own generator. Each environment consumes its
    generator in the same order whatever the batch size.
    """
    n = len(rngs)
    orient = np.stack([quat.random_unit(g) for g in rngs])
    state = _initial_state(params, orient)
    fresh = take_state(state, slice(None))
    attempts = np.ones(n, dtype=np.int64)
    progress = np.zeros(n, dtype=np.int64)
    durations = np.full((n, N_SUBSTEPS), SUBSTEP)
    active = np.ones(n, dtype=bool)
    while np.any(active):
        idx = np.flatnonzero(active)
        bins = np.stack([rngs[i].integers(0, N_BINS, N_FINGERS) for i in idx])
        sub = take_state(state, idx)
        p = take_params(params, idx)
        sub, bad = physics_step(sub, p, BIN_CENTERS[bins], durations[idx])
        put_state(state, idx, sub)
        progress[idx] += 1
        failed = (sub.pos[:, 2] < p.drop_height) | (bad >= 0)
        for j, i in enumerate(idx):
            if failed[j]:
                if attempts[i] >= WARMUP_ATTEMPTS:
                    raise InitializationError(f"warm-up dropped the object {WARMUP_ATTEMPTS} times")
                attempts[i] += 1
                progress[i] = 0
                put_state(state, i, take_state(fresh, i))
                state.quat[i] = quat.random_unit(rngs[i])
            elif progress[i] >= WARMUP_STEPS:
                active[i] = False
    for i in range(n):
        state.goal[i] = sample_goal(rngs[i])
    state.goal_count[:] = 0
    state.time_since_goal[:] = 0.0
    state.contact_loss_time[:] = 0.0
    state.time[:] = 0.0
    state.steps[:] = 0
    return state


def reset(params: EnvParams, rng: np.random.Generator) -> EnvState:
    params.validate()
    return take_state(reset_batch(_expand_params(params), [rng]), 0)


def relative_goal(goal: np.ndarray, orientation: np.ndarray) -> np.ndarray:
    return quat.canonical(quat.mul(goal, quat.conj(orientation)))


def observation_parts(state: EnvState, params: EnvParams) -> dict[str, np.ndarray]:
    """Noise-free measurements keyed by field name (batched)."""
    tips = fingertips(state.q, params)
    return {
        "relative_goal": relative_goal(state.goal, state.quat),
        "absolute_goal": state.goal,
        "fingertip_pos": tips,
        "object_pos": state.pos,
        "object_quat": state.quat,
        "joint_pos": state.q,
        "joint_vel": state.qd,
        "object_vel": state.vel,
        "object_angvel": state.omega,
    }


@dataclass
class ObservationPair:
    policy: np.ndarray
    value: np.ndarray


def assemble(parts: dict[str, np.ndarray], layout) -> np.ndarray:
    batch = parts["object_pos"].shape[:-1]
    return np.concatenate([np.reshape(parts[name], batch + (size,)) for name, size in layout], axis=-1)


def build_observations(state: EnvState, params: EnvParams, noise=None) -> ObservationPair:
    """Policy view (22 numbers) and privileged value view (46 numbers).

    ``noise`` is a callable mapping the clean policy-side measurements to
    noisy ones; the value view is always built from clean measurements.
    """
    parts = observation_parts(state, params)
    value = assemble(parts, VALUE_FIELDS)
    policy_parts = {name: parts[name] for name, _ in POLICY_FIELDS}
    if noise is not None:
        policy_parts = noise(policy_parts)
    return ObservationPair(policy=assemble(policy_parts, POLICY_FIELDS), value=value)


def joint_energy(state: EnvState, params: EnvParams) -> np.ndarray:
    """Joint kinetic energy plus passive-spring and limit-spring potential."""
    k_lim = LIMIT_GAIN_RATIO * params.gain
    over = np.maximum(state.q - params.range_max, 0.0)
    under = np.minimum(state.q - params.range_min, 0.0)
    e = (0.5 * params.joint_inertia * state.qd**2 + 0.5 * params.stiffness * (state.q - params.equilibrium) ** 2
         + 0.5 * k_lim * (over**2 + under**2))
    return np.sum(e, axis=-1)


# trajectory recording -------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ",".join(_fmt(v) for v in np.asarray(x).tolist()) + "]"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    v = float(x)
    if not math.isfinite(v):
        raise ValueError("non-finite value in trajectory record")
    return format(v, ".17g")


def format_record(record: dict) -> str:
    """One JSON object; floats rendered with 17 significant digits."""
    return "{" + ",".join(f"{json.dumps(k)}:{_fmt(v)}" for k, v in record.items()) + "}"


def state_record(step_index: int, state: EnvState, durations=None, bins=None, reward_=None,
                 done_reason: str = DONE_NONE, slack=None) -> dict:
    rec = {
        "step": int(step_index),
        "durations": [] if durations is None else list(np.asarray(durations, dtype=float)),
        "action_bins": [] if bins is None else [int(b) for b in bins],
        "smoothed_action": state.smoothed_action,
        "joint_pos": state.q,
        "joint_vel": state.qd,
        "object_pos": state.pos,
        "object_quat": state.quat,
        "reward": 0.0 if reward_ is None else reward_,
        "done_reason": done_reason,
    }
    if slack is not None:
        rec["slack"] = np.asarray(slack, dtype=float)
    return rec


def write_records(fh: IO[str], records) -> None:
    for rec in records:
        fh.write(format_record(rec) + "\n")


def read_records(fh: IO[str]) -> list[dict]:
    out = []
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed trajectory record on line {lineno}: {exc}") from exc
    return out


def params_replace(params: EnvParams, **changes) -> EnvParams:
    return dataclasses.replace(params.copy(), **{k: np.array(v, dtype=float) for k, v in changes.items()})
