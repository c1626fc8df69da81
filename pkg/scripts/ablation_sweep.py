"""Single-layer ablations: train with exactly one randomization layer on and report eval goals.

    python scripts/ablation_sweep.py --out runs/ablation --batches 100 [--layers timing backlash]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from dexrand import toyenv, trainer
from dexrand.randstack import LAYERS, RandomizationSpec


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--layers", nargs="*", default=list(LAYERS), choices=LAYERS)
    args = p.parse_args()
    out = Path(args.out)
    results = {}
    for layer in args.layers:
        spec = RandomizationSpec().set_all(False)
        spec.layer(layer).enabled = True
        cfg = trainer.TrainConfig(seed=args.seed, total_batches=args.batches)
        res = trainer.train(cfg, spec, toyenv.EnvParams(), out / layer, resume=False)
        goals = trainer.evaluate(res["opt"].nets, res["opt"].norms, spec, toyenv.EnvParams(), args.seed, 20)
        results[layer] = {"median": float(np.median(goals)), "goals": goals}
        print(f"{layer:18s} median goals {results[layer]['median']:g}", flush=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
