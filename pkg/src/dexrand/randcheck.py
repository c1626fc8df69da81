"""Monte-Carlo self-checks of the randomization samplers.

Each check samples through the configured spec and compares the measured
statistic with the reference value (the default spec), so a misconfigured
or broken sampler shows up as a failed check with both numbers printed.
"""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from dexrand import quat, randstack, toyenv, visrand
from dexrand.randstack import RandomizationSpec


@dataclass
class Check:
    name: str
    measured: float
    expected: float
    tolerance: str
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: measured {self.measured:.6g}, expected {self.expected:.6g} "
                f"({self.tolerance}) [{self.seconds:.1f}s]")


def _rel(name, measured, expected, tol) -> Check:
    ok = bool(abs(measured - expected) <= tol * abs(expected))
    return Check(name, float(measured), float(expected), f"within {tol:.0%}", ok)


def _enabled(spec: RandomizationSpec) -> RandomizationSpec:
    spec = copy.deepcopy(spec)
    spec.set_all(True)
    spec.physics.enabled = False  # physical parameters are irrelevant to these samplers
    return spec


def _episodes(spec, n, seed):
    base = toyenv.EnvParams()
    return randstack.stack_noise([randstack.sample_episode(spec, base, randstack.streams_for(seed, i, 0))
                                  for i in range(n)])


def _angle(q):
    return quat.angle_between(q, np.broadcast_to(quat.IDENTITY, q.shape))


def observation_checks(spec, ref, episodes, steps, seed) -> list[Check]:
    o, r = spec.observation_noise, ref.observation_noise
    out = [
        _rel("obs fingertip correlated std [m]", np.std(episodes.tip_correlated), r.fingertip_correlated, 0.03),
        _rel("obs object position correlated std [m]", np.std(episodes.object_correlated), r.object_pos_correlated, 0.03),
        _rel("obs orientation correlated rms angle [rad]", np.sqrt(np.mean(_angle(episodes.orientation_correlated) ** 2)),
             r.orientation_correlated, 0.03),
        _rel("obs fingertip marker misplacement std [m]", np.std(episodes.tip_marker_offset), r.fingertip_marker, 0.03),
        _rel("obs hand-base marker misplacement std [m]", np.std(episodes.base_marker_offset), r.base_marker, 0.03),
    ]
    # uncorrelated parts: zero the per-episode offsets and perturb a clean state repeatedly
    only = copy.deepcopy(spec)
    only.marker_dropout.enabled = False
    only.marker_occlusion.enabled = False
    B = 100
    n = max(steps // B, 1)
    noise = randstack.stack_noise([randstack.sample_episode(only, toyenv.EnvParams(), randstack.streams_for(seed, i, 1))
                                   for i in range(B)])
    noise.tip_correlated[:] = 0.0
    noise.object_correlated[:] = 0.0
    noise.tip_marker_offset[:] = 0.0
    noise.base_marker_offset[:] = 0.0
    noise.orientation_correlated[:] = quat.IDENTITY
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, i))) for i in range(B)]
    parts = {"fingertip_pos": np.zeros((B, toyenv.N_FINGERS, 3)), "object_pos": np.zeros((B, 3)),
             "relative_goal": np.tile(quat.IDENTITY, (B, 1))}
    tips, objs, angles = [], [], []
    for _ in range(n):
        res = randstack.perturb_observation(parts, noise, rngs, toyenv.STEP_DURATION, only)
        tips.append(res["fingertip_pos"])
        objs.append(res["object_pos"])
        angles.append(_angle(res["relative_goal"]))
    out += [
        _rel("obs fingertip uncorrelated std [m]", np.std(tips), r.fingertip_uncorrelated, 0.03),
        _rel("obs object position uncorrelated std [m]", np.std(objs), r.object_pos_uncorrelated, 0.03),
        _rel("obs orientation uncorrelated rms angle [rad]", np.sqrt(np.mean(np.square(angles))),
             r.orientation_uncorrelated, 0.03),
    ]
    return out


def action_checks(spec, ref, episodes, steps, seed) -> list[Check]:
    """Composite std of ``a (1 + g_m) + g_u + g_c`` at a = 0.5 (far from the clamp)."""
    r = ref.action_noise
    a0 = 0.5
    expected = math.sqrt((a0 * r.uncorrelated_multiplicative) ** 2 + (r.uncorrelated_additive * r.action_range) ** 2
                         + (r.correlated_additive * r.action_range) ** 2)
    N = len(episodes.action_correlated)
    per = max(steps // N, 1)
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3, i))) for i in range(N)]
    a = np.full((N, toyenv.N_FINGERS), a0)
    samples = [randstack.perturb_action(a, episodes, rngs, spec.action_noise) for _ in range(per)]
    return [_rel("action noise composite std", np.std(np.stack(samples)), expected, 0.02)]


def dropout_checks(spec, ref, steps, seed) -> list[Check]:
    d = spec.marker_dropout
    B = 100
    n = max(steps // B, 1)
    noise = randstack.stack_noise([randstack.sample_episode(spec, toyenv.EnvParams(), randstack.streams_for(seed, i, 2))
                                   for i in range(B)])
    noise.has_reading[:] = True
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, i))) for i in range(B)]
    dt = toyenv.STEP_DURATION
    markers = np.zeros((B, toyenv.N_FINGERS, 3))
    starts = 0
    for _ in range(n):
        randstack.marker_dropout(markers, noise, dt, rngs, d)
        starts += int(np.sum(noise.dropout_timer == max(d.duration - dt, 0.0)))
    rate = starts / (n * B * toyenv.N_FINGERS * dt)
    return [_rel("marker dropout initiation rate [1/s]", rate, ref.marker_dropout.rate, 0.05)]


def timing_checks(spec, ref, episodes, repeats, seed) -> list[Check]:
    t, rt = spec.timing, ref.timing
    lam = episodes.timing_rate
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(5, i))) for i in range(len(lam))]
    durations = np.concatenate([randstack.sample_substeps(episodes, rngs, t) for _ in range(repeats)], axis=1)
    jitter = durations - toyenv.SUBSTEP
    implied = np.mean(1.0 / lam)  # conditional on the drawn rates
    out = [_rel("substep mean [s] vs 8 ms + 1/lambda", np.mean(durations), toyenv.SUBSTEP + implied, 0.01),
           _rel("substep jitter mean vs mean of 1/lambda", np.mean(jitter), implied, 0.01)]
    ks = stats.kstest(lam, "uniform", args=(rt.rate_min, rt.rate_max - rt.rate_min))
    out.append(Check("timing rate lambda ~ U[rate_min, rate_max] (KS p-value)", ks.pvalue, 0.01, "p > 0.01",
                     bool(ks.pvalue > 0.01)))
    return out


def force_checks(spec, ref, episodes, steps, seed) -> list[Check]:
    f, rf = spec.random_force, ref.random_force
    lo, hi = math.log(rf.prob_min), math.log(rf.prob_max)
    ks = stats.kstest(np.log(episodes.force_prob), "uniform", args=(lo, hi - lo))
    out = [Check("force probability loguniform on [prob_min, prob_max] (KS p-value)", ks.pvalue, 0.01, "p > 0.01",
                 bool(ks.pvalue > 0.01))]

    # decay: with triggering switched off the force shrinks by exactly `decay` per 80 ms
    B = 8
    noise = randstack.stack_noise([randstack.sample_episode(spec, toyenv.EnvParams(), randstack.streams_for(seed, i, 3))
                                   for i in range(B)])
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(6, i))) for i in range(B)]
    noise.force_prob[:] = 0.0
    noise.force = np.ones((B, 3))
    randstack.random_force(noise, np.ones(B), 0.08, rngs, f)
    ratio = float(noise.force[0, 0])
    out.append(Check("force decay per 80 ms", ratio, rf.decay, "exact within 1e-12",
                     bool(abs(ratio - rf.decay) <= 1e-12)))

    # fresh draws: trigger every step and compare the per-axis std with accel_std * mass
    mass = 0.05
    B = 100
    n = max(steps // (3 * B), 1)
    noise = randstack.stack_noise([randstack.sample_episode(spec, toyenv.EnvParams(), randstack.streams_for(seed, i, 4))
                                   for i in range(B)])
    noise.force_prob[:] = 1.0
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7, i))) for i in range(B)]
    draws = np.stack([randstack.random_force(noise, np.full(B, mass), 0.08, rngs, f).copy() for _ in range(n)])
    out.append(_rel("random force std / mass [m/s^2]", np.std(draws) / mass, rf.accel_std, 0.01))
    return out


def vision_checks(calibrated: visrand.CalibratedColor, pose_cfg: visrand.PoseAugmentConfig, draws: int,
                  pose_draws: int, seed: int) -> list[Check]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(8,)))
    out = []
    chunk = 250_000
    violations: dict[str, int] = {}
    offsets, counts = [], np.zeros(visrand.MAX_LIGHTS + 1, dtype=np.int64)
    left = draws
    while left > 0:
        d = visrand.sample_scene_draw(calibrated, rng, min(chunk, left))
        for k, v in visrand.range_violations(d).items():
            violations[k] = violations.get(k, 0) + v
        offsets.append(d.camera_offset[:, 0, 0])
        counts += np.bincount(d.light_count, minlength=visrand.MAX_LIGHTS + 1)
        left -= len(d)
    total = sum(violations.values())
    out.append(Check(f"scene draw range violations over {draws} draws", total, 0, "exactly 0", total == 0))
    lim = visrand.CAMERA_POS_MM * 1e-3
    ks = stats.kstest(np.concatenate(offsets), "uniform", args=(-lim, 2 * lim))
    out.append(Check("camera offset uniform on +-1.5 mm (KS p-value)", ks.pvalue, 0.01, "p > 0.01", bool(ks.pvalue > 0.01)))
    freq = counts[visrand.MIN_LIGHTS:] / draws
    worst = float(np.max(np.abs(freq - 1 / 3)))
    out.append(Check("light count frequency max deviation from 1/3", worst, 0.0, "<= 0.02 absolute", worst <= 0.02))

    branches = visrand.pose_branch(rng, pose_cfg, pose_draws)
    freq = np.bincount(branches, minlength=3) / pose_draws
    target = np.array([pose_cfg.p_identity, pose_cfg.p_flip, 1 - pose_cfg.p_identity - pose_cfg.p_flip])
    ref = np.array([0.2, 0.4, 0.4])
    worst = float(np.max(np.abs(freq - ref)))
    out.append(Check("pose augmentation branch frequency max deviation from 0.2/0.4/0.4", worst, 0.0,
                     "<= 0.01 absolute", worst <= 0.01 and np.allclose(target, ref)))

    img = visrand.ImageBuffer(rng.uniform(0.0, 255.0, (64, 64, 3)))
    x = visrand.augment_trace(img, rng, contrast=1.0, noise_sigma=0.0).output
    dev = max(abs(float(x.mean())), abs(float(x.std()) - 1.0))
    out.append(Check("image normalization |mean| and |std - 1|", dev, 0.0, "< 1e-9", dev < 1e-9))
    return out


def run_checks(spec: RandomizationSpec, rc, calibrated: visrand.CalibratedColor,
               pose_cfg: visrand.PoseAugmentConfig, progress=None) -> list[Check]:
    """All suites; ``rc`` carries the sample counts (a RandcheckConfig)."""
    ref = RandomizationSpec()
    spec = _enabled(spec)
    results: list[Check] = []

    def timed(fn, *args):
        t = time.perf_counter()
        checks = fn(*args)
        dt = (time.perf_counter() - t) / max(len(checks), 1)
        for c in checks:
            c.seconds = dt
            if progress is not None:
                progress(c)
        results.extend(checks)

    t = time.perf_counter()
    episodes = _episodes(spec, rc.episodes, rc.seed)
    setup = time.perf_counter() - t
    timed(observation_checks, spec, ref, episodes, rc.noise_steps, rc.seed)
    timed(action_checks, spec, ref, episodes, rc.action_samples, rc.seed)
    timed(dropout_checks, spec, ref, rc.dropout_steps, rc.seed)
    timed(timing_checks, spec, ref, episodes, rc.timing_repeats, rc.seed)
    timed(force_checks, spec, ref, episodes, rc.force_steps, rc.seed)
    timed(vision_checks, calibrated, pose_cfg, rc.vision_draws, rc.pose_draws, rc.seed)
    if results:
        results[0].seconds += setup
    return results
