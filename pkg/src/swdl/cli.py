"""Command-line entry point: synth, preprocess, train, infer, evaluate, stats, pyramid-demo.

Every subcommand takes ``--config file.json`` (flat keys named like the flags,
dashes as underscores) and ``--out DIR``. Flags override file values. The
effective settings are written to ``DIR/resolved_config.json`` before any work
starts, and passing that file back as ``--config`` reruns the same job.

Exit codes: 0 success, 1 domain error, 2 usage error. Failures print one JSON
line ``{"error": kind, "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, nifti, pyramid, synth, trainer
from .errors import ConfigError, SwdlError
from .preprocess import PreprocessConfig, preprocess_case, write_sidecar
from .volume import Volume, resample_mask


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_value(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in text.split(","))
    return type(default)(text)


def _add_dataclass_flags(p: argparse.ArgumentParser, cls) -> None:
    for f in dataclasses.fields(cls):
        default = f.default
        if isinstance(default, tuple) and default and isinstance(default[0], tuple):
            continue  # nested values only via --config
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       type=lambda s, d=default: _parse_value(s, d),
                       help=f"default: {default!r}")


# flags shared by every subcommand, never part of the resolved config
_META = ("command", "config", "out")

SUBCOMMANDS = {
    "synth": {"n": 60, "seed": 0},
    "preprocess": {"data": None},
    "train": {"data": None, "preset": "toy", "resume": None},
    "infer": {"data": None, "checkpoint": None, "cases": "test"},
    "evaluate": {"data": None, "pred": None, "units": "voxel"},
    "stats": {"csv_a": None, "csv_b": None, "metric": "dice"},
    "pyramid-demo": {"input": None, "mu": 1.5, "target_shape": None, "seed": 0},
}
_REQUIRED = {"preprocess": ("data",), "train": ("data",), "infer": ("data", "checkpoint"),
             "evaluate": ("data", "pred"), "stats": ("csv_a", "csv_b")}
_OWN_DATACLASS = {"synth": synth.PhantomSpec, "preprocess": PreprocessConfig, "train": trainer.TrainConfig}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="swdl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON file with flat settings")
        p.add_argument("--out", default=None, help="output directory (default runs/<time>_seed<seed>)")
        if name == "synth":
            p.add_argument("--n", type=int, default=None, help="number of cases (default 60)")
            p.add_argument("--seed", type=int, default=None, help="base seed (default 0)")
        elif name == "preprocess":
            p.add_argument("--data", default=None, help="dataset directory with manifest.json")
        elif name == "train":
            p.add_argument("--data", default=None, help="dataset directory with manifest.json")
            p.add_argument("--preset", choices=("toy", "full"), default=None, help="default: toy")
            p.add_argument("--resume", default=None, help="checkpoint to continue from")
        elif name == "infer":
            p.add_argument("--data", default=None)
            p.add_argument("--checkpoint", default=None)
            p.add_argument("--cases", default=None,
                           help="'test' (split next to the checkpoint), 'all', or comma-separated ids")
        elif name == "evaluate":
            p.add_argument("--data", default=None, help="dataset with ground-truth labels")
            p.add_argument("--pred", default=None, help="directory written by infer")
            p.add_argument("--units", choices=("voxel", "mm"), default=None,
                           help="surface-distance units (default: voxel)")
        elif name == "stats":
            p.add_argument("csv_a", nargs="?", default=None)
            p.add_argument("csv_b", nargs="?", default=None)
            p.add_argument("--metric", default=None, help="default: dice")
        elif name == "pyramid-demo":
            p.add_argument("--input", default=None, help="NIfTI volume (default: a phantom)")
            p.add_argument("--mu", type=float, default=None, help="default: 1.5")
            p.add_argument("--target-shape", dest="target_shape", default=None,
                           type=lambda s: tuple(int(v) for v in s.split(",")), help="z,y,x (default: input shape)")
            p.add_argument("--seed", type=int, default=None, help="phantom seed when no input is given")
        if name in _OWN_DATACLASS:
            _add_dataclass_flags(p, _OWN_DATACLASS[name])
    return ap


def _to_jsonable(v):
    if isinstance(v, tuple):
        return [_to_jsonable(x) for x in v]
    return v


def resolve(args: argparse.Namespace) -> dict:
    """Defaults <- config file <- explicit flags."""
    cmd = args.command
    settings = dict(SUBCOMMANDS[cmd])
    cls = _OWN_DATACLASS.get(cmd)
    if cmd == "train":
        preset = args.preset or "toy"
        if args.config:
            preset = _read_config(args.config).get("preset", preset) if args.preset is None else preset
        base = trainer.TrainConfig.toy() if preset == "toy" else trainer.TrainConfig()
        settings.update(base.to_dict())
    elif cls is not None:
        settings.update({k: _to_jsonable(v) for k, v in dataclasses.asdict(cls()).items()})
    if args.config:
        file_vals = _read_config(args.config)
        unknown = set(file_vals) - set(settings)
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        settings.update(file_vals)
    for k, v in vars(args).items():
        if k in _META or v is None:
            continue
        settings[k] = _to_jsonable(v)
    return settings


def _read_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    d.pop("command", None)
    return d


def _dataclass_from(cls, settings: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in settings.items() if k in names})


def _require(settings: dict, *keys) -> None:
    for k in keys:
        if settings.get(k) is None:
            raise UsageError(f"missing required setting --{k.replace('_', '-')}")


def _require_path(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(args, settings: dict) -> Path:
    if args.out:
        return Path(args.out)
    seed = settings.get("seed", 0)
    return Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}_seed{seed}"


# -- subcommands ------------------------------------------------------------------

def cmd_synth(s: dict, out: Path) -> dict:
    spec = _dataclass_from(synth.PhantomSpec, s)
    manifest = synth.gen_dataset(int(s["n"]), spec, int(s["seed"]), out)
    return {"cases": len(manifest["cases"]), "out": str(out)}


def cmd_preprocess(s: dict, out: Path) -> dict:
    _require(s, "data")
    data = _require_path(s["data"], "dataset")
    cfg = _dataclass_from(PreprocessConfig, s)
    manifest = synth.load_manifest(data)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    cases = []
    for c in manifest["cases"]:
        vol = nifti.load(data / c["image"])
        stripped, roi, prov = preprocess_case(vol, cfg)
        entry = {"id": c["id"], "image": f"cases/{c['id']}_image.nii", "roi": f"cases/{c['id']}_roi.nii",
                 "sidecar": f"cases/{c['id']}_provenance.json"}
        nifti.save(out / entry["image"], stripped)
        nifti.save(out / entry["roi"], Volume(roi.astype(np.float64), stripped.spacing))
        if c.get("label"):
            lab = nifti.load(data / c["label"]).data > 0.5
            lab = resample_mask(lab, vol.spacing, cfg.target_spacing)
            entry["label"] = f"cases/{c['id']}_label.nii"
            nifti.save(out / entry["label"], Volume(lab.astype(np.float64), stripped.spacing))
        write_sidecar(out / entry["sidecar"], prov)
        cases.append(entry)
    new_manifest = {"n": len(cases), "source": str(data), "cases": cases}
    (out / "manifest.json").write_text(json.dumps(new_manifest, indent=2, sort_keys=True) + "\n")
    return {"cases": len(cases), "out": str(out)}


def cmd_train(s: dict, out: Path) -> dict:
    _require(s, "data")
    data = _require_path(s["data"], "dataset")
    cfg = _dataclass_from(trainer.TrainConfig, s)
    resume = None if s.get("resume") is None else _require_path(s["resume"], "checkpoint")
    store = trainer.load_store(data, cfg.intensity_window)
    split = trainer.make_split(sorted(store.cases), cfg.labeled_fraction, cfg.split_seed)
    final = trainer.train(cfg, store, split, out, resume=resume)
    log = trainer.read_loss_log(out / "loss_log.jsonl")
    return {"checkpoint": str(final), "steps": len(log),
            "final_total": log[-1]["total"] if log else None}


def _case_ids(s: dict, manifest: dict, ckpt: Path) -> list:
    sel = s["cases"]
    if sel == "all":
        return [c["id"] for c in manifest["cases"]]
    if sel == "test":
        split_file = ckpt.parent / "split.json"
        if not split_file.is_file():
            raise UsageError(f"no split.json next to {ckpt}; pass --cases all or explicit ids")
        return json.loads(split_file.read_text())["test"]
    return [c for c in sel.split(",") if c]


def cmd_infer(s: dict, out: Path) -> dict:
    _require(s, "data", "checkpoint")
    data = _require_path(s["data"], "dataset")
    ckpt = _require_path(s["checkpoint"], "checkpoint")
    model, cfg, _ = trainer.load_checkpoint(ckpt)
    manifest = synth.load_manifest(data)
    by_id = {c["id"]: c for c in manifest["cases"]}
    ids = _case_ids(s, manifest, ckpt)
    missing = [c for c in ids if c not in by_id]
    if missing:
        raise UsageError(f"unknown case ids: {missing}")
    (out / "pred").mkdir(parents=True, exist_ok=True)
    cases = []
    for cid in ids:
        vol = nifti.load(data / by_id[cid]["image"])
        mask, _ = trainer.predict_volume(model, cfg, vol.data)
        rel = f"pred/{cid}_pred.nii"
        nifti.save(out / rel, Volume(mask.astype(np.float64), vol.spacing))
        cases.append({"id": cid, "pred": rel})
    (out / "predictions.json").write_text(json.dumps({"checkpoint": str(ckpt), "cases": cases}, indent=2) + "\n")
    return {"cases": len(cases), "out": str(out)}


def cmd_evaluate(s: dict, out: Path) -> dict:
    _require(s, "data", "pred")
    if s["units"] not in ("voxel", "mm"):
        raise ConfigError(f"units must be 'voxel' or 'mm', got {s['units']!r}")
    data = _require_path(s["data"], "dataset")
    pred = _require_path(s["pred"], "prediction directory")
    preds = json.loads(_require_path(pred / "predictions.json", "predictions.json").read_text())
    by_id = {c["id"]: c for c in synth.load_manifest(data)["cases"]}
    rows = []
    for c in preds["cases"]:
        if c["id"] not in by_id or not by_id[c["id"]].get("label"):
            raise ConfigError(f"no ground truth for case {c['id']}")
        gt = nifti.load(data / by_id[c["id"]]["label"])
        p = nifti.load(pred / c["pred"])
        spacing = gt.spacing if s["units"] == "mm" else None
        rows.append(evaluation.evaluate_case(p.data > 0.5, gt.data > 0.5, spacing, c["id"]))
    report = evaluation.evaluate_run(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    return {m: report.summary[m].get("mean") for m in evaluation.METRICS}


def cmd_stats(s: dict, out: Path) -> dict:
    _require(s, "csv_a", "csv_b")
    a = evaluation.read_metric_csv(_require_path(s["csv_a"], "csv").read_text(), s["metric"])
    b = evaluation.read_metric_csv(_require_path(s["csv_b"], "csv").read_text(), s["metric"])
    common = sorted(set(a) & set(b))
    if not common:
        raise ConfigError("the two runs share no cases with this metric")
    res = evaluation.wilcoxon([a[c] for c in common], [b[c] for c in common])
    return res.as_dict()


def cmd_pyramid_demo(s: dict, out: Path) -> dict:
    if s.get("input"):
        vol = nifti.load(_require_path(s["input"], "input volume"))
    else:
        vol, _ = synth.gen_phantom(synth.PhantomSpec(), int(s["seed"]))
    cfg = pyramid.DelpuConfig(mu=float(s["mu"]))
    target = tuple(s["target_shape"]) if s.get("target_shape") else vol.shape
    y = pyramid.delpu_upsample(vol.data, target, cfg)
    depth = pyramid.select_depth(vol.shape)
    lap = pyramid.build_laplacian_pyramid(pyramid.build_gaussian_pyramid(vol.data, depth, cfg), cfg)
    out.mkdir(parents=True, exist_ok=True)
    nifti.save(out / "input.nii", vol)
    scale = tuple(n / t for n, t in zip(vol.shape, target))
    nifti.save(out / "y.nii", Volume(y, tuple(sp * f for sp, f in zip(vol.spacing, scale))))
    for d, L in enumerate(lap.laplacian):
        f = tuple(n / m for n, m in zip(vol.shape, L.shape))
        nifti.save(out / f"L_{d}.nii", Volume(L, tuple(sp * k for sp, k in zip(vol.spacing, f))))
    err = float(np.max(np.abs(y - vol.data))) if target == vol.shape else None
    return {"depth": depth, "levels": len(lap.laplacian), "max_abs_diff_to_input": err, "out": str(out)}


_HANDLERS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "infer": cmd_infer,
             "evaluate": cmd_evaluate, "stats": cmd_stats, "pyramid-demo": cmd_pyramid_demo}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(SUBCOMMANDS))
        settings = resolve(args)
        _require(settings, *_REQUIRED.get(args.command, ()))
        out = _out_dir(args, settings)
        if args.command != "stats":
            out.mkdir(parents=True, exist_ok=True)
            snapshot = {"command": args.command, **settings}
            (out / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        result = _HANDLERS[args.command](settings, out)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except ConfigError as exc:
        return _fail(exc.kind, str(exc), 2)
    except SwdlError as exc:
        return _fail(exc.kind, str(exc), 1)
    except (OSError, KeyError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps(result))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
