"""Desk-scale end-to-end experiment: phantoms, split, toy training, sliding-window test metrics."""
from __future__ import annotations

import json
import time
from pathlib import Path

from . import evaluation, nifti, synth, trainer


def ensure_dataset(root, n_cases: int = 60, seed: int = 0, spec: synth.PhantomSpec | None = None) -> Path:
    root = Path(root)
    if not (root / "manifest.json").exists():
        synth.gen_dataset(n_cases, spec or synth.PhantomSpec(), seed, root)
    return root


def evaluate_checkpoint(ckpt, data, case_ids) -> evaluation.MetricsReport:
    model, cfg, _ = trainer.load_checkpoint(ckpt)
    by_id = {c["id"]: c for c in synth.load_manifest(data)["cases"]}
    rows = []
    for cid in case_ids:
        img = nifti.load(Path(data) / by_id[cid]["image"])
        gt = nifti.load(Path(data) / by_id[cid]["label"]).data > 0.5
        mask, _ = trainer.predict_volume(model, cfg, img.data)
        rows.append(evaluation.evaluate_case(mask, gt, case_id=cid))
    return evaluation.evaluate_run(rows)


def run_desk(out, data, cfg: trainer.TrainConfig | None = None, log=None) -> dict:
    """Train the toy config on ``data`` and score the held-out cases.

    Writes the run under ``out/run`` plus ``out/metrics.json`` and ``out/summary.json``.
    """
    out = Path(out)
    cfg = cfg or trainer.TrainConfig.toy()
    store = trainer.load_store(data, cfg.intensity_window)
    split = trainer.make_split(sorted(store.cases), cfg.labeled_fraction, cfg.split_seed)
    t0 = time.time()
    final = trainer.train(cfg, store, split, out / "run", log=log)
    train_seconds = time.time() - t0
    report = evaluate_checkpoint(final, data, split.test)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    summary = {"mean_dice": report.summary["dice"]["mean"], "train_seconds": train_seconds,
               "total_seconds": time.time() - t0, "steps": cfg.max_steps, "xi": cfg.xi,
               "n_labeled": len(split.labeled), "n_unlabeled": len(split.unlabeled), "n_test": len(split.test),
               "checkpoint": str(final)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
