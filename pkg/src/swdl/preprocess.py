"""Head-CT preprocessing: resampling, skull stripping and hemorrhage ROI extraction."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, PreprocessingError
from .volume import (Volume, largest_component, morph, otsu_threshold, remove_small_components,
                     resample_to_spacing, threshold_mask)

STRIP_FILL_HU = -1024.0


@dataclass
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (5.0, 0.5, 0.5)
    bone_hu: float = 150.0
    air_hu: float = -200.0
    roi_window: tuple[float, float] = (20.0, 40.0)
    closing_radius: int = 1
    min_roi_component: int = 10
    # 'fixed' uses bone_hu; 'otsu' picks the bone cut per volume from the head voxels
    bone_threshold: str = "fixed"

    def __post_init__(self):
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.roi_window = tuple(float(v) for v in self.roi_window)
        if not self.roi_window[0] < self.roi_window[1]:
            raise ConfigError(f"roi window {self.roi_window} is not increasing")
        if not self.bone_hu > self.roi_window[1]:
            raise ConfigError("bone threshold must exceed the ROI window")
        if self.bone_threshold not in ("fixed", "otsu"):
            raise ConfigError(f"unknown bone threshold mode {self.bone_threshold!r}")


def _fill_holes_per_slice(mask: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.binary_fill_holes(sl) for sl in mask])


def skull_strip(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[np.ndarray, Volume]:
    head = threshold_mask(v, cfg.air_hu, np.inf)
    if cfg.bone_threshold == "fixed":
        bone_cut = cfg.bone_hu
    else:
        # Otsu over head voxels only, so the split is tissue vs bone rather than air vs head
        if np.unique(v.data[head]).size < 2:
            raise PreprocessingError("otsu bone threshold needs at least two head intensities")
        bone_cut = otsu_threshold(v.data[head].reshape(1, 1, -1))
    bone = threshold_mask(v, bone_cut, np.inf)
    tissue = head & ~bone
    if not tissue.any():
        raise PreprocessingError("empty brain mask")
    closed = morph(tissue, "close", cfg.closing_radius)
    if not closed.any():
        raise PreprocessingError("empty brain mask")
    # closing only decides connectivity; the final mask never leaves the tissue set
    brain = _fill_holes_per_slice(largest_component(closed)) & tissue
    if not brain.any():
        raise PreprocessingError("empty brain mask")
    stripped = np.where(brain, v.data, STRIP_FILL_HU)
    return brain, Volume(stripped, v.spacing, dict(v.meta))


def extract_roi(stripped: Volume, cfg: PreprocessConfig = PreprocessConfig(), brain_mask=None) -> np.ndarray:
    lo, hi = cfg.roi_window
    roi = threshold_mask(stripped, lo, hi)
    roi = morph(morph(roi, "dilate", 1), "erode", 1)
    region = stripped.data != STRIP_FILL_HU if brain_mask is None else np.asarray(brain_mask, dtype=bool)
    roi &= region
    return remove_small_components(roi, cfg.min_roi_component)


def preprocess_case(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[Volume, np.ndarray, dict]:
    """Resample, skull-strip and extract the ROI. Returns (volume, roi, provenance)."""
    resampled = resample_to_spacing(v, cfg.target_spacing)
    brain, stripped = skull_strip(resampled, cfg)
    roi = extract_roi(stripped, cfg, brain)
    provenance = {
        "original_spacing": list(v.spacing),
        "original_shape": list(v.shape),
        "output_spacing": list(stripped.spacing),
        "output_shape": list(stripped.shape),
        "config": {k: list(val) if isinstance(val, tuple) else val for k, val in asdict(cfg).items()},
        "brain_voxels": int(brain.sum()),
        "roi_voxels": int(roi.sum()),
    }
    stripped.meta["provenance"] = provenance
    return stripped, roi, provenance


def write_sidecar(path, provenance: dict) -> None:
    Path(path).write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())
