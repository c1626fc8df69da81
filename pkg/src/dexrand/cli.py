"""Command-line entry point: ``dexrand {train,calibrate,randcheck,eval,config}``.

Exit codes: 0 success, 2 configuration or input-file error, 3 a check
failed, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from dexrand import config as C
from dexrand import randcheck, sysid, trainer
from dexrand.randstack import LAYERS, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_RUNTIME = 0, 2, 3, 4
SNAPSHOT_NAME = "resolved_config.yaml"


class InputError(Exception):
    """A data file named on the command line is missing or malformed."""


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = (yaml.safe_load(raw), "--set")
    return out


def resolve(args) -> tuple[C.RunConfig, dict]:
    """Defaults <- --config file <- DEXRAND_OUT <- flags."""
    overrides = _parse_set(args.set or [])
    if args.seed is not None:
        overrides["seed"] = (args.seed, "--seed")
    if args.workers is not None:
        overrides["train.workers"] = (args.workers, "--workers")
    if args.out is not None:
        overrides["out_dir"] = (args.out, "--out")
    cfg, prov = C.load_config(args.config, overrides)
    if args.disable_layer:
        names = list(dict.fromkeys(cfg.disable_layers + args.disable_layer))
        overrides["disable_layers"] = (names, "--disable-layer")
        cfg, prov = C.load_config(args.config, overrides)
    return cfg, prov


def _out_dir(cfg: C.RunConfig, prov: dict) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    C.write_snapshot(out / SNAPSHOT_NAME, cfg, prov)
    return out


def _goal_stats(goals: list[int]) -> dict:
    g = np.asarray(goals)
    return {"goals": g.tolist(), "median": float(np.median(g)), "mean": float(g.mean()),
            "min": int(g.min()), "max": int(g.max())}


# subcommands ----------------------------------------------------------------

def cmd_train(cfg: C.RunConfig, prov: dict, args) -> int:
    out = _out_dir(cfg, prov)
    spec, base, tcfg = cfg.effective_spec(), cfg.env, cfg.train_config()

    def progress(rec):
        if not args.quiet:
            goals = rec["mean_goals"]
            print(f"batch {rec['batch']:4d}  episodes {rec['episodes']:3d}  mean goals "
                  f"{'-' if goals is None else f'{goals:.2f}'}  entropy {rec['entropy']:.3f}  "
                  f"value loss {rec['value_loss']:.4f}", flush=True)

    t = time.perf_counter()
    res = trainer.train(tcfg, spec, base, out, resume=not args.fresh, progress=progress)
    stats = _goal_stats(trainer.evaluate(res["opt"].nets, res["opt"].norms, spec, base, cfg.seed,
                                         cfg.eval.episodes, greedy=cfg.eval.greedy))
    stats["train_seconds"] = time.perf_counter() - t
    (out / "eval.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"eval: median consecutive goals {stats['median']:g} over {len(stats['goals'])} episodes")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(cfg: C.RunConfig, prov: dict, args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "checkpoint.npz"
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    try:
        opt, batch, _ = trainer.load_checkpoint(ckpt)
    except (KeyError, ValueError, OSError) as exc:
        raise InputError(f"{ckpt}: unreadable checkpoint ({exc})") from None
    goals = trainer.evaluate(opt.nets, opt.norms, cfg.effective_spec(), cfg.env, cfg.seed,
                             cfg.eval.episodes, greedy=cfg.eval.greedy)
    stats = {"checkpoint": str(ckpt), "batch": batch, **_goal_stats(goals)}
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_calibrate(cfg: C.RunConfig, prov: dict, args) -> int:
    cal = cfg.calibration
    if args.self_generate == (args.trajectory is not None):
        raise ConfigError("calibrate needs exactly one of --self-generate or a trajectory file")
    out = _out_dir(cfg, prov)
    if args.self_generate:
        truth = cfg.env
        trajs, records = sysid.generate_calibration_trajectories(truth, cal.trajectory_seed)
        with open(out / "trajectory.jsonl", "w") as fh:
            sysid.write_trajectory(fh, records)
        if args.from_truth:
            start = truth.copy()
        else:
            start = sysid.perturb(truth, cal.params, cal.perturb_low, cal.perturb_high,
                                  np.random.default_rng(cal.perturb_seed))
    else:
        path = Path(args.trajectory)
        if not path.is_file():
            raise InputError(f"trajectory file not found: {path}")
        try:
            with open(path) as fh:
                trajs = [sysid.read_trajectory(fh)]
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}: malformed trajectory file ({exc})") from None
        truth, start = None, cfg.env
    t = time.perf_counter()
    result = sysid.coordinate_descent(start, trajs, cal.params, cal.max_passes)
    rep = sysid.report(result, cal.params, truth)
    rep["seconds"] = time.perf_counter() - t
    with open(out / "calibration.json", "w") as fh:
        sysid.write_report(fh, rep)
    print(f"replay error {rep['start_error']:.6g} -> {rep['final_error']:.6g} "
          f"({100 * rep['relative_reduction']:.2f}% reduction, {rep['accepted_steps']} accepted steps)")
    print(f"wrote {out / 'calibration.json'}")
    if args.min_reduction is not None and rep["relative_reduction"] < args.min_reduction:
        print(f"FAIL: reduction below {args.min_reduction:g}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_randcheck(cfg: C.RunConfig, prov: dict, args) -> int:
    checks = randcheck.run_checks(cfg.randomization, cfg.randcheck, cfg.vision.calibrated(), cfg.vision.pose,
                                  progress=lambda ch: print(ch.line(), flush=True))
    failed = [c.name for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_config(cfg: C.RunConfig, prov: dict, args) -> int:
    data = C.snapshot(cfg, prov) if args.provenance else C.to_dict(cfg)
    sys.stdout.write(yaml.safe_dump(data, sort_keys=False))
    return EXIT_OK


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="rollout worker processes")
    common.add_argument("--out", help="output directory (overrides DEXRAND_OUT)")
    common.add_argument("--disable-layer", action="append", default=[], metavar="NAME",
                        help=f"turn a randomization layer off; repeatable ({', '.join(LAYERS)})")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key by dotted path, e.g. train.lr=1e-3")

    p = argparse.ArgumentParser(prog="dexrand", description="Domain-randomized in-hand reorientation on a toy hand.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a policy")
    t.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint in the output directory")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="roll out a checkpoint and report consecutive goals")
    e.add_argument("--checkpoint", help="defaults to <out>/checkpoint.npz")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate", parents=[common], help="fit simulator parameters to recorded trajectories")
    c.add_argument("trajectory", nargs="?", help="JSON-lines trajectory file")
    c.add_argument("--self-generate", action="store_true",
                   help="record trajectories from the configured env (hidden truth) and start from a perturbed copy")
    c.add_argument("--from-truth", action="store_true", help="with --self-generate, start at the hidden truth")
    c.add_argument("--min-reduction", type=float, help="exit 3 if the relative error reduction is below this")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("randcheck", parents=[common], help="Monte-Carlo checks of the randomization samplers")
    r.set_defaults(func=cmd_randcheck)

    s = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    s.add_argument("--provenance", action="store_true", help="include where each value came from")
    s.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, prov = resolve(args)
        return args.func(cfg, prov, args)
    except (ConfigError, FileNotFoundError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
