"""Deterministic 3D grid kernels.

Every resampling and smoothing operator here is separable: it is a product
of three 1D linear maps, one per spatial axis. Grids may carry any number
of leading axes (batch, channel); only the last three are touched, so
channels never mix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, ConfigError, StateError

Shape3 = tuple[int, int, int]


@dataclass
class Volume:
    """Dense scalar grid in (z, y, x) order with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ArgumentError(f"volume data must be a non-empty 3D array, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in self.spacing):
            raise ArgumentError(f"spacing must be three positive reals, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ArgumentError("volume contains non-finite values")

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class GaussianKernel:
    """Odd, symmetric 1D taps applied along each axis."""

    taps: tuple[float, ...] = (0.25, 0.5, 0.25)

    @classmethod
    def binomial(cls, weights=(1.0, 2.0, 1.0)) -> "GaussianKernel":
        w = np.asarray(weights, dtype=np.float64)
        return cls(tuple(float(t) for t in w / w.sum()))

    def validate(self) -> None:
        t = np.asarray(self.taps, dtype=np.float64)
        if t.ndim != 1 or len(t) % 2 != 1:
            raise ConfigError("kernel must have an odd number of taps")
        if np.any(t < 0):
            raise ConfigError("kernel taps must be nonnegative")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ConfigError(f"kernel is not normalized (sum={t.sum()!r})")
        if not np.allclose(t, t[::-1], rtol=0, atol=1e-15):
            raise ConfigError("kernel must be symmetric")


DEFAULT_KERNEL = GaussianKernel()


# -- 1D operator matrices -------------------------------------------------

def _interp_matrix(coords: np.ndarray, n_in: int) -> np.ndarray:
    coords = np.clip(coords, 0.0, n_in - 1)
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = coords - i0
    m = np.zeros((len(coords), n_in))
    rows = np.arange(len(coords))
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


@lru_cache(maxsize=512)
def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation matrix (n_out, n_in) with half-pixel centers."""
    if n_in == n_out:
        return np.eye(n_in)
    coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    m = _interp_matrix(coords, n_in)
    m.flags.writeable = False
    return m


@lru_cache(maxsize=512)
def smooth_matrix(n: int, taps: tuple[float, ...]) -> np.ndarray:
    """Convolution matrix (n, n) for ``taps`` with edge-clamped padding."""
    r = len(taps) // 2
    m = np.zeros((n, n))
    for i in range(n):
        for k, t in enumerate(taps):
            m[i, min(max(i + k - r, 0), n - 1)] += t
    m.flags.writeable = False
    return m


def apply_separable(x: np.ndarray, mats) -> np.ndarray:
    """Apply one matrix per spatial axis to the last three axes of ``x``."""
    mz, my, mx = mats
    out = x @ mx.T
    out = np.swapaxes(np.swapaxes(out, -1, -2) @ my.T, -1, -2)
    out = np.moveaxis(np.moveaxis(out, -3, -1) @ mz.T, -1, -3)
    return np.ascontiguousarray(out)


# -- public kernels -------------------------------------------------------

def _spatial(x) -> np.ndarray:
    x = x.data if isinstance(x, Volume) else np.asarray(x)
    if x.ndim < 3:
        raise ArgumentError("grid needs at least three (spatial) axes")
    return x


def gaussian_smooth(x, kernel: GaussianKernel = DEFAULT_KERNEL) -> np.ndarray:
    kernel.validate()
    g = _spatial(x)
    return apply_separable(g, [smooth_matrix(n, kernel.taps) for n in g.shape[-3:]])


def downsample_shape(shape) -> Shape3:
    return tuple(-(-int(n) // 2) for n in shape[-3:])


def resample(x, target_shape) -> np.ndarray:
    g = _spatial(x)
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ArgumentError(f"bad target shape {target_shape}")
    return apply_separable(g, [resample_matrix(a, b) for a, b in zip(g.shape[-3:], target_shape)])


def trilinear_downsample(x) -> np.ndarray:
    g = _spatial(x)
    return resample(g, downsample_shape(g.shape))


def trilinear_upsample(x, target_shape) -> np.ndarray:
    g = _spatial(x)
    if any(t < s for t, s in zip(target_shape, g.shape[-3:])):
        raise ArgumentError(f"upsample target {tuple(target_shape)} smaller than source {g.shape[-3:]}")
    return resample(g, target_shape)


def resample_to_spacing(v: Volume, new_spacing) -> Volume:
    """Trilinear resampling in physical coordinates (voxel centers at (i+0.5)*s)."""
    new_spacing = tuple(float(s) for s in new_spacing)
    if len(new_spacing) != 3 or not all(s > 0 for s in new_spacing):
        raise ArgumentError(f"spacing must be positive, got {new_spacing}")
    out_shape = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(v.shape, v.spacing, new_spacing))
    if min(out_shape) < 1:
        raise ArgumentError("resampling would produce an empty volume")
    mats = []
    for n_in, n_out, s_in, s_out in zip(v.shape, out_shape, v.spacing, new_spacing):
        if n_in == n_out and s_in == s_out:
            mats.append(np.eye(n_in))
            continue
        coords = (np.arange(n_out) + 0.5) * (s_out / s_in) - 0.5
        mats.append(_interp_matrix(coords, n_in))
    return Volume(apply_separable(v.data, mats), new_spacing, dict(v.meta))


def resample_mask(mask: np.ndarray, spacing, new_spacing) -> np.ndarray:
    """Resample a binary mask by trilinear interpolation and a 0.5 cut."""
    v = resample_to_spacing(Volume(np.asarray(mask, dtype=np.float64), spacing), new_spacing)
    return v.data >= 0.5


def threshold_mask(v, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ArgumentError(f"threshold window inverted: lo={lo} > hi={hi}")
    g = _spatial(v)
    return (g >= lo) & (g <= hi)


def otsu_threshold(v, bins: int = 256) -> float:
    """Threshold maximizing between-class variance of a ``bins``-bin histogram.

    Returns the upper edge of the last bin assigned to the lower class.
    """
    g = _spatial(v).ravel()
    lo, hi = float(g.min()), float(g.max())
    if lo == hi:
        raise ArgumentError("otsu threshold undefined for a constant volume")
    hist, edges = np.histogram(g, bins=bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)[:-1]
    w1 = hist.sum() - w0
    s0 = np.cumsum(hist * centers)[:-1]
    m0 = s0 / np.where(w0 > 0, w0, 1)
    m1 = (np.dot(hist, centers) - s0) / np.where(w1 > 0, w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    k = int(np.argmax(between))
    return float(edges[k + 1])


# -- morphology and components -------------------------------------------

@lru_cache(maxsize=16)
def structuring_element(radius: int) -> np.ndarray:
    """6-connected ball: voxels within L1 distance ``radius`` of the center."""
    if radius < 1:
        raise ArgumentError("radius must be >= 1")
    r = np.arange(-radius, radius + 1)
    zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
    se = (np.abs(zz) + np.abs(yy) + np.abs(xx)) <= radius
    se.flags.writeable = False
    return se


def morph(mask, op: str, radius: int = 1) -> np.ndarray:
    """Binary dilate / erode / close; voxels outside the grid count as background."""
    m = np.asarray(mask, dtype=bool)
    se = structuring_element(radius)
    if op == "dilate":
        return ndimage.binary_dilation(m, structure=se)
    if op == "erode":
        return ndimage.binary_erosion(m, structure=se, border_value=0)
    if op == "close":
        return ndimage.binary_erosion(ndimage.binary_dilation(m, structure=se), structure=se, border_value=0)
    raise ArgumentError(f"unknown morphology op {op!r}")


_SIX = ndimage.generate_binary_structure(3, 1)


def connected_components(mask) -> tuple[np.ndarray, np.ndarray]:
    """6-connected labeling. Returns (labels, sizes) with sizes[k-1] for label k."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_SIX)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def largest_component(mask) -> np.ndarray:
    labels, sizes = connected_components(mask)
    if len(sizes) == 0:
        raise StateError("largest_component of an empty mask")
    # argmax returns the first maximum, i.e. the smallest label on ties
    return labels == int(np.argmax(sizes)) + 1


def remove_small_components(mask, min_size: int) -> np.ndarray:
    labels, sizes = connected_components(mask)
    keep = np.concatenate([[False], sizes >= min_size])
    return keep[labels]
