"""Simulator calibration against recorded joint trajectories.

A hidden "robot" (the toy environment under ground-truth parameters) runs
scripted limit sweeps and sinusoidal oscillations. Candidate parameters are
scored by restarting the simulator from the recorded state at every 1 s
segment boundary, replaying the recorded actions open loop, and comparing
joint angles at the segment end. Coordinate descent then adjusts one
parameter at a time.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
from scipy import optimize

from dexrand import toyenv
from dexrand.randstack import backlash, resolve_path
from dexrand.toyenv import BIN_CENTERS, N_BINS, N_FINGERS, N_SUBSTEPS, SUBSTEP, STEP_DURATION, EnvParams

SEGMENT_STEPS = math.ceil(1.0 / STEP_DURATION)  # 13 steps = 1.04 s
BLOWUP_PENALTY = 1e6
ACCEPT_RATIO = 1e-3
MULT_PROBES = (0.5, 0.8, 0.95, 1.05, 1.25, 2.0)
ADD_PROBES = (-0.2, -0.05, 0.05, 0.2)
SIGNED = {"equilibrium": 0.1, "range_min": 0.1, "range_max": 0.1}  # additive probe scale (rad)
STOP_SPEED = 1e-3  # rad/s
STOP_TIME = 0.5  # s
OSC_FREQS = (0.2, 0.5, 1.0)  # Hz
OSC_DURATION = 20.0  # s per frequency


@dataclass
class RecordedTrajectory:
    """Per-step actions and measured angles plus full joint snapshots at segment starts."""

    times: np.ndarray  # (N,) time at the end of each step
    bins: np.ndarray  # (N, 5)
    durations: np.ndarray  # (N, 10)
    q: np.ndarray  # (N, 5) joint angles after each step
    q0: np.ndarray  # (5,) initial angles
    snapshots: dict[str, np.ndarray]  # q, qd, smoothed, slack at each segment start, (S, 5)
    segment_steps: int = SEGMENT_STEPS
    label: str = ""

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @property
    def n_segments(self) -> int:
        return len(self.bins) // self.segment_steps

    @property
    def duration(self) -> float:
        return float(np.sum(self.durations))


# recording ------------------------------------------------------------------

class _Robot:
    """Toy robot under hidden parameters; actions pass through backlash before the joints."""

    def __init__(self, params: EnvParams, rng: np.random.Generator):
        self.params = params
        self.p = toyenv._expand_params(params)
        self.state = toyenv._initial_state(self.p, toyenv.quat.random_unit(rng)[None])
        self.slack = np.zeros((1, N_FINGERS))
        self.steps: list[dict] = []
        self.records: list[dict] = [toyenv.state_record(0, toyenv.take_state(self.state, 0), slack=self.slack[0])]
        self.time = 0.0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {"q": self.state.q[0].copy(), "qd": self.state.qd[0].copy(),
                "smoothed": self.state.smoothed_action[0].copy(), "slack": self.slack[0].copy()}

    def act(self, bins: np.ndarray) -> None:
        durations = np.full((1, N_SUBSTEPS), SUBSTEP)
        a, self.slack = backlash(BIN_CENTERS[bins][None], self.slack, self.p.backlash_neg, self.p.backlash_pos,
                                 np.sum(durations, axis=-1)[:, None])
        self.state, _ = toyenv.physics_step(self.state, self.p, a, durations)
        self.time += STEP_DURATION
        self.steps.append({"bins": np.array(bins), "q": self.state.q[0].copy(), "time": self.time,
                           "durations": durations[0].copy()})
        self.records.append(toyenv.state_record(len(self.steps), toyenv.take_state(self.state, 0), durations[0],
                                                bins, slack=self.slack[0]))


def _bins_toward(q: np.ndarray, target: np.ndarray, params: EnvParams, smoothed: np.ndarray) -> np.ndarray:
    """Bin whose center, after smoothing, moves the joints' targets closest to ``target``."""
    half = 0.5 * (params.range_max - params.range_min)
    desired = ((target - q) / half - (1.0 - toyenv.SMOOTHING) * smoothed) / toyenv.SMOOTHING
    return np.argmin(np.abs(BIN_CENTERS[None, :] - np.clip(desired, -1, 1)[:, None]), axis=1)


def limit_sweep(robot: _Robot, max_time: float = 6.0) -> None:
    """Drive every joint inward until motion stops, then outward until it stops again."""
    for b in (N_BINS - 1, 0):
        still = 0.0
        start = robot.time
        while robot.time - start < max_time:
            robot.act(np.full(N_FINGERS, b))
            if np.all(np.abs(robot.state.qd[0]) < STOP_SPEED):
                still += STEP_DURATION
                if still >= STOP_TIME:
                    break
            else:
                still = 0.0


def oscillate(robot: _Robot, freq: float, duration: float, amplitude: float = 0.6) -> None:
    """Track a sinusoid of the given frequency (joints phase-shifted per finger)."""
    p = robot.params
    center = 0.5 * (p.range_min + p.range_max)
    phase = np.arange(N_FINGERS) * (2 * np.pi / N_FINGERS)
    start = robot.time
    while robot.time - start < duration - 1e-9:
        t_next = robot.time - start + STEP_DURATION
        target = center + amplitude * np.sin(2 * np.pi * freq * t_next + phase)
        robot.act(_bins_toward(robot.state.q[0], target, p, robot.state.smoothed_action[0]))


def record(robot: _Robot, label: str, first_step: int, segment_steps: int = SEGMENT_STEPS,
           snapshots: list | None = None) -> RecordedTrajectory:
    steps = robot.steps[first_step:]
    snaps = snapshots[: len(steps) // segment_steps] if snapshots else []
    return RecordedTrajectory(
        times=np.array([s["time"] for s in steps]),
        bins=np.array([s["bins"] for s in steps], dtype=np.int64),
        durations=np.array([s["durations"] for s in steps]),
        q=np.array([s["q"] for s in steps]),
        q0=snaps[0]["q"] if snaps else robot.steps[first_step]["q"],
        snapshots={k: np.array([s[k] for s in snaps]) for k in ("q", "qd", "smoothed", "slack")},
        segment_steps=segment_steps,
        label=label,
    )


def _run_phase(robot: _Robot, fn, *args) -> list[dict]:
    """Run a scripted phase while capturing a snapshot at every segment boundary."""
    snaps = []
    first = len(robot.steps)
    orig_act = robot.act

    def act(bins):
        if (len(robot.steps) - first) % SEGMENT_STEPS == 0:
            snaps.append(robot.snapshot())
        orig_act(bins)

    robot.act = act
    try:
        fn(robot, *args)
    finally:
        robot.act = orig_act
    return snaps


def generate_calibration_trajectories(params: EnvParams, seed: int = 0) -> tuple[list[RecordedTrajectory], list[dict]]:
    """Limit sweep plus oscillations at three frequencies (>= 60 s in total).

    Returns the trajectories and the per-step records (toyenv record format).
    """
    params = params.copy().validate()
    robot = _Robot(params, np.random.default_rng(seed))
    trajs = []
    phases = [("limit-sweep", limit_sweep, ())] + [
        (f"oscillation-{f:g}Hz", oscillate, (f, OSC_DURATION)) for f in OSC_FREQS]
    for label, fn, args in phases:
        first = len(robot.steps)
        snaps = _run_phase(robot, fn, *args)
        trajs.append(record(robot, label, first, snapshots=snaps))
    return trajs, robot.records


def trajectories_from_records(records: Sequence[dict], segment_steps: int = SEGMENT_STEPS) -> RecordedTrajectory:
    """Rebuild one segmented trajectory from per-step records (first record = initial state)."""
    if len(records) < 2:
        raise ValueError("trajectory file needs an initial record and at least one step")
    try:
        steps = records[1:]
        q_all = np.array([r["joint_pos"] for r in records], dtype=float)
        qd_all = np.array([r["joint_vel"] for r in records], dtype=float)
        sm_all = np.array([r["smoothed_action"] for r in records], dtype=float)
        slack_all = np.array([r.get("slack", [0.0] * N_FINGERS) for r in records], dtype=float)
        bins = np.array([r["action_bins"] for r in steps], dtype=np.int64)
        durations = np.array([r["durations"] for r in steps], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed trajectory records: {exc}") from exc
    if bins.shape != (len(steps), N_FINGERS) or durations.shape != (len(steps), N_SUBSTEPS):
        raise ValueError("malformed trajectory records: wrong action or duration shape")
    if np.any(bins < 0) or np.any(bins >= N_BINS):
        raise ValueError("malformed trajectory records: action bins out of range")
    n_seg = len(steps) // segment_steps
    starts = np.arange(n_seg) * segment_steps
    return RecordedTrajectory(
        times=np.cumsum(np.sum(durations, axis=1)),
        bins=bins,
        durations=durations,
        q=q_all[1:],
        q0=q_all[0],
        snapshots={"q": q_all[starts], "qd": qd_all[starts], "smoothed": sm_all[starts], "slack": slack_all[starts]},
        segment_steps=segment_steps,
        label="file",
    )


def write_trajectory(fh: IO[str], records) -> None:
    toyenv.write_records(fh, records)


def read_trajectory(fh: IO[str]) -> RecordedTrajectory:
    return trajectories_from_records(toyenv.read_records(fh))


# objective ------------------------------------------------------------------

def _segments(trajs: Sequence[RecordedTrajectory]):
    """Stack every segment of every trajectory: start states, actions, durations, end angles."""
    q, qd, sm, sl, bins, dur, end = [], [], [], [], [], [], []
    for tr in trajs:
        n, m = tr.n_segments, tr.segment_steps
        if n == 0:
            continue
        q.append(tr.snapshots["q"][:n])
        qd.append(tr.snapshots["qd"][:n])
        sm.append(tr.snapshots["smoothed"][:n])
        sl.append(tr.snapshots["slack"][:n])
        bins.append(tr.bins[: n * m].reshape(n, m, N_FINGERS))
        dur.append(tr.durations[: n * m].reshape(n, m, N_SUBSTEPS))
        end.append(tr.q[m - 1: n * m: m])
    if not q:
        raise ValueError("no complete 1 s segment in the trajectories")
    return tuple(np.concatenate(x) for x in (q, qd, sm, sl, bins, dur, end))


@dataclass
class ReplayResult:
    error: float
    per_segment: np.ndarray
    flagged: np.ndarray


def replay_segments(candidate: EnvParams, trajs: Sequence[RecordedTrajectory]) -> ReplayResult:
    """Open-loop replay of all segments at once under ``candidate``."""
    q, qd, sm, slack, bins, dur, end = _segments(trajs)
    p = candidate
    with np.errstate(all="ignore"):
        for k in range(bins.shape[1]):
            a, slack = backlash(BIN_CENTERS[bins[:, k]], slack, p.backlash_neg, p.backlash_pos,
                                np.sum(dur[:, k], axis=-1)[:, None])
            q, qd, sm = toyenv.joint_step(q, qd, sm, a, p, dur[:, k])
        sq = np.mean((q - end) ** 2, axis=-1)
    flagged = ~np.isfinite(sq)
    sq = np.where(flagged, BLOWUP_PENALTY, sq)
    return ReplayResult(float(np.mean(sq)), sq, flagged)


def replay_error(candidate: EnvParams, traj: RecordedTrajectory | Sequence[RecordedTrajectory]) -> float:
    """Mean squared joint-angle error (rad^2) at the end of every 1 s segment."""
    trajs = [traj] if isinstance(traj, RecordedTrajectory) else list(traj)
    return replay_segments(candidate, trajs).error


# coordinate descent ---------------------------------------------------------

def get_value(params: EnvParams, path: str):
    name, index = resolve_path(path)
    arr = getattr(params, name)
    return np.array(arr if index is None else arr[index], dtype=float)


def set_value(params: EnvParams, path: str, value) -> EnvParams:
    out = params.copy()
    name, index = resolve_path(path)
    if index is None:
        setattr(out, name, np.array(np.broadcast_to(value, np.shape(getattr(out, name))), dtype=float))
    else:
        getattr(out, name)[index] = value
    return out


def probes(params: EnvParams, path: str) -> list[EnvParams]:
    name, _ = resolve_path(path)
    v = get_value(params, path)
    if name in SIGNED:
        return [set_value(params, path, v + d * SIGNED[name]) for d in ADD_PROBES]
    return [set_value(params, path, v * f) for f in MULT_PROBES]


def perturb(params: EnvParams, param_list: Sequence[str], low: float, high: float,
            rng: np.random.Generator) -> EnvParams:
    """Scale each listed parameter by one loguniform factor in [low, high]."""
    out = params.copy()
    for path in param_list:
        factor = math.exp(rng.uniform(math.log(low), math.log(high)))
        out = set_value(out, path, get_value(out, path) * factor)
    return out


@dataclass
class CalibrationResult:
    params: EnvParams
    start_error: float
    final_error: float
    history: list[dict] = field(default_factory=list)  # one entry per accepted step
    passes: list[float] = field(default_factory=list)  # objective after each pass
    accepted: int = 0


def coordinate_descent(start: EnvParams, trajectories: Sequence[RecordedTrajectory], param_list: Sequence[str],
                       max_passes: int = 100) -> CalibrationResult:
    """Greedy per-parameter probing; a probe is kept only if it improves the error by more than 0.1%."""
    if not param_list:
        raise ValueError("parameter list is empty")
    if not trajectories:
        raise ValueError("need at least one trajectory")
    for path in param_list:
        resolve_path(path)
    current = start.copy()
    err = replay_error(current, trajectories)
    res = CalibrationResult(current, err, err)
    for _ in range(max_passes):
        accepted = 0
        for path in param_list:
            best, best_err = None, err
            for cand in probes(current, path):
                try:
                    cand.validate()
                except toyenv.InvalidParamsError:
                    continue
                e = replay_error(cand, trajectories)
                if e < best_err:
                    best, best_err = cand, e
            if best is not None and best_err < err * (1.0 - ACCEPT_RATIO):
                res.history.append({"param": path, "old": get_value(current, path).tolist(),
                                    "new": get_value(best, path).tolist(), "error": best_err})
                current, err = best, best_err
                accepted += 1
        res.passes.append(err)
        res.accepted += accepted
        if accepted == 0:
            break
    res.params, res.final_error = current, err
    return res


def report(result: CalibrationResult, param_list: Sequence[str], truth: EnvParams | None = None) -> dict:
    """Structured diff of start vs final parameters with the objective history."""
    rows = {}
    for path in param_list:
        entry = {"final": get_value(result.params, path).tolist()}
        firsts = [h for h in result.history if h["param"] == path]
        entry["start"] = firsts[0]["old"] if firsts else entry["final"]
        if truth is not None:
            entry["truth"] = get_value(truth, path).tolist()
        rows[path] = entry
    reduction = 0.0 if result.start_error == 0 else 1.0 - result.final_error / result.start_error
    return {
        "start_error": result.start_error,
        "final_error": result.final_error,
        "relative_reduction": reduction,
        "accepted_steps": result.accepted,
        "pass_errors": result.passes,
        "history": result.history,
        "params": rows,
    }


def write_report(fh: IO[str], rep: dict) -> None:
    json.dump(rep, fh, indent=2, sort_keys=True)
    fh.write("\n")


# sensor maps ----------------------------------------------------------------

@dataclass
class SensorMap:
    """Piecewise-linear raw-reading -> angle map, extrapolated linearly past the end knots."""

    raw: np.ndarray
    angle: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        self.angle = np.asarray(self.angle, dtype=float)
        if not 3 <= len(self.raw) <= 5 or self.raw.shape != self.angle.shape:
            raise ValueError("a sensor map has 3 to 5 knots")
        if np.any(np.diff(self.raw) <= 0):
            raise ValueError("knot raw positions must be strictly increasing")

    def __call__(self, x) -> np.ndarray:
        return _hat_basis(np.asarray(x, dtype=float), self.raw) @ self.angle

    def monotone(self) -> bool:
        d = np.diff(self.angle)
        return bool(np.all(d >= 0) or np.all(d <= 0))


def _hat_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Interpolation weights of each knot at ``x`` (linear extrapolation beyond the ends)."""
    k = len(knots)
    seg = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, k - 2)
    lo, hi = knots[seg], knots[seg + 1]
    t = (x - lo) / (hi - lo)
    B = np.zeros(x.shape + (k,))
    rows = np.arange(x.size).reshape(x.shape)
    B.reshape(-1, k)[rows.ravel(), seg.ravel()] = (1.0 - t).ravel()
    B.reshape(-1, k)[rows.ravel(), seg.ravel() + 1] = t.ravel()
    return B


def fit_sensor_map(raw_samples, truth_samples, knot_count: int = 4) -> SensorMap:
    """Knots at raw-sample quantiles; knot angles by linear least squares.

    When the truth samples are monotone in the raw reading, the knot angles
    are constrained to be monotone in the same direction.
    """
    raw = np.asarray(raw_samples, dtype=float).ravel()
    truth = np.asarray(truth_samples, dtype=float).ravel()
    if raw.shape != truth.shape:
        raise ValueError("raw and truth samples must pair up")
    if not 3 <= knot_count <= 5:
        raise ValueError("knot_count must be in [3, 5]")
    if len(np.unique(raw)) < knot_count:
        raise ValueError("degenerate raw spread: fewer distinct readings than knots")
    knots = np.quantile(raw, np.linspace(0.0, 1.0, knot_count))
    if np.any(np.diff(knots) <= 0):
        knots = np.unique(raw)[np.round(np.linspace(0, len(np.unique(raw)) - 1, knot_count)).astype(int)]
    B = _hat_basis(raw, knots)
    angles, *_ = np.linalg.lstsq(B, truth, rcond=None)
    order = np.argsort(raw, kind="stable")
    steps = np.diff(truth[order])
    direction = 1.0 if np.all(steps >= 0) else -1.0 if np.all(steps <= 0) else 0.0
    if direction and not SensorMap(knots, angles).monotone():
        # monotone samples: refit with the knot increments constrained to the samples' direction
        L = np.tril(np.ones((knot_count, knot_count)))
        inc_lo, inc_hi = (0.0, np.inf) if direction > 0 else (-np.inf, 0.0)
        lo = np.r_[-np.inf, np.full(knot_count - 1, inc_lo)]
        hi = np.r_[np.inf, np.full(knot_count - 1, inc_hi)]
        sol = optimize.lsq_linear(B @ L, truth, bounds=(lo, hi), method="bvls", tol=1e-14)
        angles = L @ sol.x
    return SensorMap(knots, angles)
