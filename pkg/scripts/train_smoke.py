"""Train the toy hand with every randomization layer off, then on, and report eval goals.

    python scripts/train_smoke.py --out runs/smoke [--seed 0] [--batches 300]
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from dexrand import toyenv, trainer
from dexrand.randstack import RandomizationSpec


def run(name, on, args):
    cfg = trainer.TrainConfig(seed=args.seed, total_batches=args.batches, workers=args.workers)
    spec = RandomizationSpec().set_all(on)
    t = time.perf_counter()

    def progress(rec):
        if rec["batch"] % 25 == 24:
            g = rec["mean_goals"]
            print(f"  [{name}] batch {rec['batch'] + 1}: mean goals {'-' if g is None else f'{g:.2f}'}", flush=True)

    res = trainer.train(cfg, spec, toyenv.EnvParams(), Path(args.out) / name, resume=False, progress=progress)
    goals = trainer.evaluate(res["opt"].nets, res["opt"].norms, spec, toyenv.EnvParams(), cfg.seed, 20)
    return {"median": float(np.median(goals)), "goals": goals, "seconds": round(time.perf_counter() - t, 1)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/smoke")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=300)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    summary = {}
    for name, on, need in (("layers_off", False, 5), ("layers_on", True, 2)):
        summary[name] = run(name, on, args)
        s = summary[name]
        print(f"{name}: median goals {s['median']:g} (need >= {need}) in {s['seconds']} s")
    Path(args.out, "smoke.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
