"""Desk-scale end-to-end run: phantoms -> split -> train -> sliding-window test Dice.

    python3 scripts/desk_experiment.py --out runs/desk
    python3 scripts/desk_experiment.py --out runs/desk_xi0 --xi 0 --data runs/desk/data
"""
import argparse
import json
import time
from pathlib import Path

from swdl import experiment, trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--data", default=None, help="dataset dir (default OUT/data, generated if missing)")
    ap.add_argument("--cases", type=int, default=60)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--xi", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=1337)
    ap.add_argument("--log-every", type=int, default=100)
    args = ap.parse_args()

    out = Path(args.out)
    data = experiment.ensure_dataset(args.data or out / "data", args.cases)
    cfg = trainer.TrainConfig.toy(max_steps=args.steps, xi=args.xi, seed=args.seed,
                                  checkpoint_every=max(args.steps, 1))
    t0 = time.time()

    def log(step, rep):
        if step % args.log_every == 0:
            print(f"step {step:5d}  total {rep.total:.4f}  {time.time() - t0:.0f}s", flush=True)

    summary = experiment.run_desk(out, data, cfg, log=log)
    for r in json.loads((out / "metrics.json").read_text())["cases"]:
        print(r["case_id"], f"dice={r['dice']:.4f}")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
