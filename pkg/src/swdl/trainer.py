"""Semi-supervised training loop with T-iteration difference learning."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nifti
from .autodiff import Tensor
from .errors import ArgumentError, ConfigError, DataError, StateError, TrainingError
from .losses import LossReport, ds_weights_for, total_loss
from .model import ModelConfig, SWDLNet
from .synth import load_manifest


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    patch: tuple[int, int, int] = (16, 64, 64)
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 30
    max_steps: int = 2000
    seed: int = 1337
    split_seed: int = 367
    labeled_fraction: float = 0.02
    T: int = 3
    xi: float = 1e-3
    mu: float = 1.5
    strata: int = 5
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    num_classes: int = 2
    loss_assignment: str = "eq7"
    deep_supervision: bool = True
    lesion_prob: float = 0.5
    # random axis flips plus an in-plane transpose of every training patch
    flip_augment: bool = False
    intensity_window: tuple[float, float] = (0.0, 100.0)
    checkpoint_every: int = 100
    precision: str = "float32"

    def __post_init__(self):
        self.patch = tuple(int(n) for n in self.patch)
        self.channels = tuple(int(c) for c in self.channels)
        self.intensity_window = tuple(float(v) for v in self.intensity_window)
        if self.labeled_per_batch < 1:
            raise ConfigError("labeled_per_batch must be >= 1")
        if self.unlabeled_per_batch < 0:
            raise ConfigError("unlabeled_per_batch must be >= 0")
        if len(self.patch) != 3 or min(self.patch) < 8:
            raise ConfigError(f"patch dims must each be >= 8, got {self.patch}")
        if not (self.lr > 0 and self.momentum >= 0 and self.weight_decay >= 0):
            raise ConfigError("rates must be positive")
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must be in (0, 1]")
        if self.max_steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("max_steps must be >= 0 and checkpoint_every >= 1")
        if not self.intensity_window[0] < self.intensity_window[1]:
            raise ConfigError("intensity window must be increasing")
        f = 2 ** (self.strata - 1)
        if any(n % f for n in self.patch):
            raise ConfigError(f"patch {self.patch} must be divisible by {f} for {self.strata} strata")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        try:
            self.model_config()
        except ArgumentError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        """Desk-scale preset: small channels, 16x32x32 patches, one labeled + one unlabeled patch.

        lr is halved because plain SGD without normalization layers diverges
        at 0.01 on this batch size. Flip augmentation stops the net from
        memorizing the single labeled lesion.
        """
        base = dict(patch=(16, 32, 32), channels=(4, 8, 16, 32, 64), labeled_per_batch=1,
                    unlabeled_per_batch=1, max_steps=2000, lr=0.005, flip_augment=True)
        base.update(kw)
        return cls(**base)

    def model_config(self) -> ModelConfig:
        return ModelConfig(strata=self.strata, channels=self.channels, num_classes=self.num_classes,
                           mu=self.mu, T=self.T, xi=self.xi, loss_assignment=self.loss_assignment,
                           deep_supervision=self.deep_supervision)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# -- data split ---------------------------------------------------------------

@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    test: list
    split_seed: int = 367

    def to_dict(self) -> dict:
        return asdict(self)


def make_split(case_ids, labeled_fraction: float, seed: int = 367, test_fraction: float = 0.2) -> DatasetSplit:
    """Seeded shuffle, last ceil(20%) to test, leading ceil(fraction * train) of train labeled."""
    ids = list(case_ids)
    if len(ids) < 5:
        raise ArgumentError("need at least 5 cases to split")
    if len(set(ids)) != len(ids):
        raise ArgumentError("duplicate case ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_test = math.ceil(test_fraction * len(ids) - 1e-9)
    train, test = shuffled[: len(ids) - n_test], shuffled[len(ids) - n_test:]
    n_lab = math.ceil(labeled_fraction * len(train) - 1e-9)
    if n_lab < 1:
        raise ArgumentError(f"labeled fraction {labeled_fraction} yields no labeled cases")
    return DatasetSplit(train[:n_lab], train[n_lab:], test, seed)


# -- data store and sampling ------------------------------------------------------

def normalize_intensity(data: np.ndarray, window) -> np.ndarray:
    lo, hi = window
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return ((np.clip(data, lo, hi) - mid) / half).astype(np.float32)


@dataclass
class Case:
    image: np.ndarray  # normalized, (D, H, W)
    label: np.ndarray | None
    spacing: tuple
    lesion_voxels: np.ndarray | None = None


@dataclass
class DataStore:
    cases: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, items: dict, window=(0.0, 100.0)) -> "DataStore":
        """``items``: id -> (raw HU array, label or None[, spacing])."""
        store = cls()
        for cid, item in items.items():
            img, lab = item[0], item[1]
            spacing = tuple(item[2]) if len(item) > 2 else (1.0, 1.0, 1.0)
            store.add(cid, img, lab, spacing, window)
        return store

    def add(self, cid, raw, label, spacing, window) -> None:
        raw = np.asarray(raw, dtype=np.float64)
        lab = None if label is None else np.asarray(label, dtype=bool)
        if lab is not None and lab.shape != raw.shape:
            raise DataError(f"{cid}: label shape {lab.shape} != image shape {raw.shape}")
        self.cases[cid] = Case(normalize_intensity(raw, window), lab, tuple(spacing),
                               None if lab is None else np.argwhere(lab))


def load_store(root, window=(0.0, 100.0)) -> DataStore:
    root = Path(root)
    manifest = load_manifest(root)
    store = DataStore()
    for c in manifest["cases"]:
        vol = nifti.load(root / c["image"])
        lab = nifti.load(root / c["label"]).data > 0.5 if c.get("label") else None
        store.add(c["id"], vol.data, lab, vol.spacing, window)
    return store


@dataclass
class Batch:
    images: np.ndarray  # (L + U, 1, *patch)
    labels: np.ndarray  # (L, *patch)
    n_labeled: int
    origins: list


def _crop(arr: np.ndarray, start, patch) -> np.ndarray:
    out = np.zeros(patch, dtype=arr.dtype)
    src = tuple(slice(max(s, 0), min(s + p, n)) for s, p, n in zip(start, patch, arr.shape))
    dst = tuple(slice(sl.start - s, sl.stop - s) for sl, s in zip(src, start))
    out[dst] = arr[src]
    return out


def _random_start(rng, shape, patch):
    return tuple(int(rng.integers(0, max(n - p, 0) + 1)) for n, p in zip(shape, patch))


def _lesion_start(rng, case: Case, patch):
    idx = case.lesion_voxels[int(rng.integers(0, len(case.lesion_voxels)))]
    return tuple(int(min(max(c - p // 2, 0), max(n - p, 0))) for c, p, n in zip(idx, patch, case.image.shape))


def sample_batch(split: DatasetSplit, store: DataStore, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    if not split.labeled:
        raise DataError("no labeled cases")
    if cfg.unlabeled_per_batch and not split.unlabeled:
        raise DataError("no unlabeled cases")
    images, labels, origins = [], [], []
    for _ in range(cfg.labeled_per_batch):
        cid = split.labeled[int(rng.integers(0, len(split.labeled)))]
        case = store.cases[cid]
        if case.label is None:
            raise DataError(f"labeled case {cid} has no label")
        use_lesion = rng.random() < cfg.lesion_prob and len(case.lesion_voxels) > 0
        start = _lesion_start(rng, case, cfg.patch) if use_lesion else _random_start(rng, case.image.shape, cfg.patch)
        images.append(_crop(case.image, start, cfg.patch))
        labels.append(_crop(case.label, start, cfg.patch))
        origins.append((cid, start))
    for _ in range(cfg.unlabeled_per_batch):
        cid = split.unlabeled[int(rng.integers(0, len(split.unlabeled)))]
        case = store.cases[cid]
        start = _random_start(rng, case.image.shape, cfg.patch)
        images.append(_crop(case.image, start, cfg.patch))
        origins.append((cid, start))
    batch = Batch(np.stack(images)[:, None], np.stack(labels), cfg.labeled_per_batch, origins)
    if cfg.flip_augment:
        _flip_augment(batch, rng)
    return batch


def _flip_augment(batch: Batch, rng: np.random.Generator) -> None:
    """Flip each patch along a random subset of axes, then maybe swap H and W (square patches only)."""
    square = batch.images.shape[3] == batch.images.shape[4]
    for i in range(batch.images.shape[0]):
        axes = [a for a in range(3) if rng.random() < 0.5]
        swap = rng.random() < 0.5 and square

        def tf(v):
            v = np.flip(v, axis=axes) if axes else v
            return np.swapaxes(v, 1, 2).copy() if swap else v.copy()

        batch.images[i, 0] = tf(batch.images[i, 0])
        if i < batch.n_labeled:
            batch.labels[i] = tf(batch.labels[i])


# -- optimization -----------------------------------------------------------------

def batch_loss(model: SWDLNet, batch: Batch, frozen: dict | None = None) -> tuple[Tensor, LossReport]:
    """Loss averaged over the T forward iterations, each fed the previous difference.

    The differences are constants to backprop. Passing a dict as ``frozen``
    records the difference fed to each iteration on the first call and
    replays it on later calls, which makes finite differences see the same
    stop-gradient objective.
    """
    mc = model.cfg
    weights = ds_weights_for(mc.strata)
    x = Tensor(batch.images)
    reports, total, delta = [], None, None
    for p in range(1, mc.T + 1):
        if frozen is not None and p > 1:
            delta = frozen.setdefault(p, delta)
        out = model.forward_train_iteration(x, p, delta, ds_rows=batch.n_labeled)
        loss, rep = total_loss(out.dc_logits, out.delpu_logits, out.ds_outputs, batch.labels,
                               batch.n_labeled, weights, mc.loss_assignment, mc.deep_supervision)
        reports.append(rep)
        total = loss if total is None else total + loss
        delta = out.delta
    return total * (1.0 / mc.T), LossReport.mean(reports)


def train_step(model: SWDLNet, batch: Batch, cfg: TrainConfig) -> LossReport:
    """One backward pass through the T-iteration loss and one SGD step."""
    try:
        loss, report = batch_loss(model, batch)
        if not math.isfinite(report.total):
            raise StateError("non-finite loss")
        loss.backward()
    except StateError as exc:
        raise TrainingError(f"training step failed: {exc}") from exc
    ad.sgd_step(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    return report


def checkpoint_bytes(model: SWDLNet, cfg: TrainConfig, step: int, rng: np.random.Generator | None) -> bytes:
    meta = {"step": step, "train_config": cfg.to_dict(),
            "rng_state": None if rng is None else rng.bit_generator.state}
    return ad.encode_checkpoint(model.state_blobs(), meta)


def load_checkpoint(path) -> tuple[SWDLNet, TrainConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise StateError(f"checkpoint not found: {path}")
    blobs, meta = ad.decode_checkpoint(path.read_bytes())
    cfg = TrainConfig.from_dict(meta["train_config"])
    ad.set_precision(cfg.precision)
    model = SWDLNet(cfg.model_config(), seed=cfg.seed)
    model.load_blobs(blobs)
    return model, cfg, meta


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise TrainingError(f"cannot write {path}: {exc}") from exc


def train(cfg: TrainConfig, store: DataStore, split: DatasetSplit, out_dir, resume=None,
          log=None) -> Path:
    """Run ``cfg.max_steps`` steps; returns the final checkpoint path.

    Writes ``loss_log.jsonl`` (one record per step), ``checkpoints/step_NNNNNN.ckpt``
    every ``checkpoint_every`` steps, and ``final.ckpt``.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    ad.set_precision(cfg.precision)
    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        model, saved_cfg, meta = load_checkpoint(resume)
        if saved_cfg.to_dict() != cfg.to_dict():
            # max_steps may be extended on resume, nothing else
            a, b = saved_cfg.to_dict(), cfg.to_dict()
            a.pop("max_steps"), b.pop("max_steps")
            if a != b:
                raise ConfigError("resume config differs from the checkpoint's")
        step = int(meta["step"])
        if meta.get("rng_state") is not None:
            rng.bit_generator.state = meta["rng_state"]
    else:
        model = SWDLNet(cfg.model_config(), seed=cfg.seed)
        step = 0
    log_path = out / "loss_log.jsonl"
    if resume is None:
        _write(log_path, b"")
    _write(out / "split.json", (json.dumps(split.to_dict(), indent=2) + "\n").encode())

    with open(log_path, "a") as fh:
        while step < cfg.max_steps:
            batch = sample_batch(split, store, cfg, rng)
            try:
                report = train_step(model, batch, cfg)
            except TrainingError:
                dump = {"step": step + 1, "origins": [[c, list(s)] for c, s in batch.origins],
                        "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in model.params.items()}}
                _write(out / "failure_dump.json", (json.dumps(dump, indent=2) + "\n").encode())
                raise
            step += 1
            fh.write(json.dumps({"step": step, **{k: repr(v) for k, v in report.as_dict().items()}}) + "\n")
            fh.flush()
            if log is not None:
                log(step, report)
            if step % cfg.checkpoint_every == 0:
                _write(out / "checkpoints" / f"step_{step:06d}.ckpt", checkpoint_bytes(model, cfg, step, rng))
    final = out / "final.ckpt"
    _write(final, checkpoint_bytes(model, cfg, step, rng))
    return final


def read_loss_log(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        r = json.loads(line)
        rows.append({k: (int(v) if k == "step" else float(v)) for k, v in r.items()})
    return rows


# -- inference ----------------------------------------------------------------------

def tile_starts(n: int, p: int) -> list[int]:
    """Starts of length-``p`` tiles at stride p/2 covering ``n`` (n >= p)."""
    stride = max(p // 2, 1)
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def sliding_window_infer(model: SWDLNet, image: np.ndarray, patch, batch_size: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Tile a normalized (D, H, W) image with 50% overlap and average class probabilities.

    Returns (mask, probabilities of shape (C, D, H, W)).
    """
    image = np.asarray(image, dtype=np.float32)
    patch = tuple(int(p) for p in patch)
    orig = image.shape
    padded_shape = tuple(max(n, p) for n, p in zip(orig, patch))
    padded = np.zeros(padded_shape, dtype=np.float32)
    padded[tuple(slice(0, n) for n in orig)] = image
    c = model.cfg.num_classes
    acc = np.zeros((c,) + padded_shape, dtype=np.float64)
    count = np.zeros(padded_shape, dtype=np.int64)
    starts = [(a, b, d) for a in tile_starts(padded_shape[0], patch[0])
              for b in tile_starts(padded_shape[1], patch[1])
              for d in tile_starts(padded_shape[2], patch[2])]
    for i in range(0, len(starts), batch_size):
        chunk = starts[i: i + batch_size]
        tiles = np.stack([padded[a: a + patch[0], b: b + patch[1], d: d + patch[2]] for a, b, d in chunk])
        probs = model.infer(tiles[:, None])
        for (a, b, d), pr in zip(chunk, probs):
            sl = (slice(a, a + patch[0]), slice(b, b + patch[1]), slice(d, d + patch[2]))
            acc[(slice(None),) + sl] += pr
            count[sl] += 1
    probs = acc / count
    probs = probs[(slice(None),) + tuple(slice(0, n) for n in orig)]
    return probs.argmax(axis=0).astype(bool) if c == 2 else probs.argmax(axis=0), probs


def predict_volume(model: SWDLNet, cfg: TrainConfig, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Segment a raw-HU volume with the training intensity window and patch size."""
    return sliding_window_infer(model, normalize_intensity(np.asarray(raw, dtype=np.float64), cfg.intensity_window),
                                cfg.patch)
