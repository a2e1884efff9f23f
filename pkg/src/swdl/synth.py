"""Synthetic head-CT phantoms with exact lesion ground truth.

Randomness comes from SplitMix64, fixed here so datasets are reproducible
in any language:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)                       (all arithmetic mod 2**64)

Uniforms in [0, 1) take the top 53 bits: ``(z >> 11) * 2**-53``. Normals
use Box-Muller on consecutive uniform pairs (u1, u2):
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` then ``... * sin(2 pi u2)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nifti
from .errors import SpecError
from .volume import Volume

GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) % 2 ** 64

    def next_u64(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, identical to ``n`` sequential calls."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * GAMMA
            z = (z ^ (z >> np.uint64(30))) * MIX1
            z = (z ^ (z >> np.uint64(27))) * MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * 0x9E3779B97F4A7C15) % 2 ** 64
        return z

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        t = 2.0 * np.pi * u[1::2]
        return np.stack([r * np.cos(t), r * np.sin(t)], axis=1).ravel()[:n]

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + int(self.uniform(1)[0] * (hi - lo + 1))

    def between(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * float(self.uniform(1)[0])


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (20, 48, 48)
    spacing: tuple[float, float, float] = (5.0, 0.5, 0.5)
    background_hu: float = 35.0
    background_sd: float = 5.0
    lesion_hu: float = 65.0
    lesion_sd: float = 5.0
    lesion_count: tuple[int, int] = (1, 3)
    # per-axis (min, max) semi-axes in voxels, z first
    lesion_radii: tuple[tuple[float, float], ...] = ((1.5, 3.0), (3.0, 6.0), (3.0, 6.0))
    skull_hu: float = 1000.0
    air_hu: float = -1000.0
    # brain semi-axes as a fraction of the half-extent; skull adds ``skull_thickness`` voxels
    brain_fraction: float = 0.75
    skull_thickness: float = 1.5

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.lesion_count = tuple(int(c) for c in self.lesion_count)
        self.lesion_radii = tuple(tuple(float(r) for r in pair) for pair in self.lesion_radii)

    def validate(self) -> None:
        if min(self.shape) < 4:
            raise SpecError(f"phantom shape {self.shape} too small")
        lo, hi = self.lesion_count
        if not 0 <= lo <= hi:
            raise SpecError(f"bad lesion count range {self.lesion_count}")
        lesion_top = self.lesion_hu + 6 * self.lesion_sd
        if lesion_top >= self.skull_hu:
            raise SpecError("lesion intensities overlap the skull")


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def gen_phantom(spec: PhantomSpec = PhantomSpec(), seed: int = 0) -> tuple[Volume, np.ndarray]:
    spec.validate()
    rng = SplitMix64(seed)
    shape = spec.shape
    center = tuple((n - 1) / 2.0 for n in shape)
    brain_r = tuple(max(1.0, spec.brain_fraction * (n / 2.0) - spec.skull_thickness) for n in shape)
    skull_r = tuple(r + spec.skull_thickness for r in brain_r)
    brain = _ellipsoid(shape, center, brain_r)
    head = _ellipsoid(shape, center, skull_r)

    size = int(np.prod(shape))
    data = np.full(shape, spec.air_hu)
    data[head] = spec.skull_hu
    data[brain] = spec.background_hu + spec.background_sd * rng.normal(size).reshape(shape)[brain]

    label = np.zeros(shape, dtype=bool)
    n_lesions = rng.randint(*spec.lesion_count)
    for _ in range(n_lesions):
        for _attempt in range(200):
            radii = tuple(rng.between(lo, hi) for lo, hi in spec.lesion_radii)
            c = tuple(rng.between(r, n - 1 - r) for r, n in zip(radii, shape))
            blob = _ellipsoid(shape, c, radii)
            if blob.any() and not np.any(blob & ~brain):
                break
        else:
            raise SpecError("lesion does not fit inside the brain region")
        label |= blob
    noise = rng.normal(size).reshape(shape)
    data[label] = spec.lesion_hu + spec.lesion_sd * noise[label]
    return Volume(data, spec.spacing), label


def gen_dataset(n: int, spec: PhantomSpec, seed: int, out_dir) -> dict:
    """Write ``n`` phantom image/label NIfTI pairs plus ``manifest.json``.

    Case ``i`` is generated from seed ``seed + i``.
    """
    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(n):
        cid = f"case_{i:04d}"
        vol, label = gen_phantom(spec, seed + i)
        img_rel, lab_rel = f"cases/{cid}_image.nii", f"cases/{cid}_label.nii"
        nifti.save(out / img_rel, vol)
        nifti.save(out / lab_rel, Volume(label.astype(np.float64), vol.spacing))
        cases.append({"id": cid, "seed": seed + i, "image": img_rel, "label": lab_rel})
    spec_d = asdict(spec)
    manifest = {"n": n, "seed": seed, "spec": spec_d, "cases": cases}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())
