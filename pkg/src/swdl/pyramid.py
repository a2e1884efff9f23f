"""Deep Laplacian pyramid upsampling (DelPU).

The same code path serves plain numpy grids and autodiff tensors: the three
primitives (smooth, downsample, upsample) dispatch on the argument type, and
the recurrences only use ``+``, ``-`` and scalar ``*``. Every operator acts on
the last three axes, so channels are processed independently.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import volume as vk
from .errors import ArgumentError, DepthError, StateError

MAX_DEPTH = 2


@dataclass(frozen=True)
class DelpuConfig:
    mu: float = 1.5
    kernel: vk.GaussianKernel = vk.DEFAULT_KERNEL

    def __post_init__(self):
        if not np.isfinite(self.mu) or self.mu < 0:
            raise ArgumentError(f"mu must be finite and >= 0, got {self.mu}")
        self.kernel.validate()


@dataclass
class Pyramid:
    gaussian: list
    laplacian: list = field(default_factory=list)
    recorded_shapes: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.gaussian) - 1


def select_depth(shape) -> int:
    """Pyramid depth from the largest spatial extent (clamped at 2 above 64)."""
    m = max(int(n) for n in shape[-3:])
    if m < 1:
        raise ArgumentError("dimensions must be >= 1")
    if m <= 8:
        return 0
    if m <= 32:
        return 1
    return MAX_DEPTH


def _smooth(x, cfg: DelpuConfig):
    if isinstance(x, ad.Tensor):
        return ad.smooth(x, cfg.kernel)
    return vk.gaussian_smooth(x, cfg.kernel)


def _resample(x, shape):
    if isinstance(x, ad.Tensor):
        return ad.resample(x, shape)
    return vk.resample(x, shape)


def _spatial_shape(x) -> tuple[int, int, int]:
    return tuple(int(n) for n in x.shape[-3:])


def build_gaussian_pyramid(x, depth: int, cfg: DelpuConfig = DelpuConfig()) -> Pyramid:
    ad.record("pyramid.gaussian")
    if depth < 0:
        raise DepthError(f"negative depth {depth}")
    levels = [x]
    shapes = [_spatial_shape(x)]
    for _ in range(depth):
        prev = shapes[-1]
        if max(prev) <= 1:
            raise DepthError(f"level of shape {prev} cannot be downsampled further")
        nxt = vk.downsample_shape(prev)
        levels.append(_resample(_smooth(levels[-1], cfg), nxt))
        shapes.append(nxt)
    return Pyramid(gaussian=levels, recorded_shapes=shapes)


def build_laplacian_pyramid(p: Pyramid, cfg: DelpuConfig = DelpuConfig()) -> Pyramid:
    ad.record("pyramid.laplacian")
    if not p.gaussian or len(p.recorded_shapes) != len(p.gaussian):
        raise StateError("gaussian levels missing")
    p.laplacian = [
        p.gaussian[d] - _smooth(_resample(p.gaussian[d + 1], p.recorded_shapes[d]), cfg)
        for d in range(p.depth)
    ]
    return p


def reconstruct(p: Pyramid, cfg: DelpuConfig = DelpuConfig()):
    """y_D = G_D;  y_d = mu * L_d + smooth(up(y_{d+1}))."""
    ad.record("pyramid.reconstruct")
    if len(p.laplacian) != p.depth:
        raise StateError("laplacian levels missing")
    y = p.gaussian[-1]
    for d in range(p.depth - 1, -1, -1):
        lap = p.laplacian[d]
        if _spatial_shape(lap) != p.recorded_shapes[d]:
            raise StateError(f"laplacian level {d} has shape {_spatial_shape(lap)}, "
                             f"recorded {p.recorded_shapes[d]}")
        y = lap * cfg.mu + _smooth(_resample(y, p.recorded_shapes[d]), cfg)
    return y


def delpu_upsample(x, target_shape, cfg: DelpuConfig = DelpuConfig()):
    """Pyramid-sharpened upsampling of ``x`` to ``target_shape``."""
    ad.record("pyramid.delpu_upsample")
    target_shape = tuple(int(n) for n in target_shape)
    if any(t < s for t, s in zip(target_shape, _spatial_shape(x))):
        raise ArgumentError(f"target {target_shape} smaller than input {_spatial_shape(x)}")
    depth = select_depth(_spatial_shape(x))
    pyr = build_laplacian_pyramid(build_gaussian_pyramid(x, depth, cfg), cfg)
    return _resample(reconstruct(pyr, cfg), target_shape)
