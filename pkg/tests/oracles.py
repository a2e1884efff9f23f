"""Brute-force reference implementations used as test oracles."""
import itertools
import math
from collections import deque

import numpy as np

from swdl.volume import structuring_element


def dense_smooth_oracle(x, taps):
    taps = np.asarray(taps)
    r = len(taps) // 2
    k3 = taps[:, None, None] * taps[None, :, None] * taps[None, None, :]
    xp = np.pad(x, r, mode="edge")
    out = np.zeros_like(x)
    for i, j, k in itertools.product(*map(range, x.shape)):
        out[i, j, k] = np.sum(xp[i: i + 2 * r + 1, j: j + 2 * r + 1, k: k + 2 * r + 1] * k3)
    return out


def _coord(j, n_in, n_out):
    c = (j + 0.5) * n_in / n_out - 0.5
    return min(max(c, 0.0), n_in - 1.0)


def trilinear_oracle(x, out_shape):
    out = np.zeros(out_shape)
    for idx in itertools.product(*map(range, out_shape)):
        cs = [_coord(j, n, m) for j, n, m in zip(idx, x.shape, out_shape)]
        lo = [int(np.floor(c)) for c in cs]
        total = 0.0
        for corner in itertools.product((0, 1), repeat=3):
            w, src = 1.0, []
            for a in range(3):
                f = cs[a] - lo[a]
                w *= f if corner[a] else 1.0 - f
                src.append(min(lo[a] + corner[a], x.shape[a] - 1))
            total += w * x[tuple(src)]
        out[idx] = total
    return out


def _offsets(radius):
    se = structuring_element(radius)
    c = radius
    return [tuple(np.array(o) - c) for o in np.argwhere(se)]


def dilate_oracle(m, radius):
    out = np.zeros_like(m)
    for p in np.argwhere(m):
        for o in _offsets(radius):
            q = p + o
            if all(0 <= q[a] < m.shape[a] for a in range(3)):
                out[tuple(q)] = True
    return out


def erode_oracle(m, radius):
    out = np.zeros_like(m)
    for p in itertools.product(*map(range, m.shape)):
        ok = True
        for o in _offsets(radius):
            q = np.array(p) + o
            if not all(0 <= q[a] < m.shape[a] for a in range(3)) or not m[tuple(q)]:
                ok = False
                break
        out[p] = ok
    return out


def flood_fill_oracle(m):
    seen = np.zeros_like(m)
    comps = []
    for start in map(tuple, np.argwhere(m)):
        if seen[start]:
            continue
        comp, queue = set(), deque([start])
        seen[start] = True
        while queue:
            p = queue.popleft()
            comp.add(p)
            for a in range(3):
                for d in (-1, 1):
                    q = list(p)
                    q[a] += d
                    q = tuple(q)
                    if 0 <= q[a] < m.shape[a] and m[q] and not seen[q]:
                        seen[q] = True
                        queue.append(q)
        comps.append(frozenset(comp))
    return comps


def otsu_oracle(x, bins=256):
    g = x.ravel()
    hist, edges = np.histogram(g, bins=bins, range=(g.min(), g.max()))
    centers = [(edges[i] + edges[i + 1]) / 2 for i in range(bins)]
    best, best_k = -1.0, None
    for k in range(bins - 1):
        n0 = sum(int(hist[i]) for i in range(k + 1))
        n1 = sum(int(hist[i]) for i in range(k + 1, bins))
        if n0 == 0 or n1 == 0:
            var = 0.0
        else:
            m0 = sum(hist[i] * centers[i] for i in range(k + 1)) / n0
            m1 = sum(hist[i] * centers[i] for i in range(k + 1, bins)) / n1
            var = n0 * n1 * (m0 - m1) ** 2
        if var > best:
            best, best_k = var, k
    return edges[best_k + 1]




def smooth_oracle(x, taps=(0.25, 0.5, 0.25)):
    """Smooth every leading-axis slice of an (..., D, H, W) array."""
    flat = x.reshape((-1,) + x.shape[-3:])
    return np.stack([dense_smooth_oracle(v, taps) for v in flat]).reshape(x.shape)


def resample_oracle(x, shape):
    flat = x.reshape((-1,) + x.shape[-3:])
    return np.stack([trilinear_oracle(v, shape) for v in flat]).reshape(x.shape[:-3] + tuple(shape))


def conv3d_oracle(x, w, b, stride, padding):
    n, c, *sp = x.shape
    o, _, *k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    out_sp = [(a + 2 * padding - kk) // stride + 1 for a, kk in zip(sp, k)]
    out = np.zeros((n, o, *out_sp))
    for bn in range(n):
        for oc in range(o):
            for i in range(out_sp[0]):
                for j in range(out_sp[1]):
                    for l in range(out_sp[2]):
                        patch = xp[bn, :, i * stride: i * stride + k[0], j * stride: j * stride + k[1],
                                   l * stride: l * stride + k[2]]
                        out[bn, oc, i, j, l] = np.sum(patch * w[oc]) + (0 if b is None else b[oc])
    return out


def conv_transpose3d_oracle(x, w, b, stride=2):
    """Scatter every input voxel times the kernel into the output."""
    n, c, d, h, wd = x.shape
    _, o, k, _, _ = w.shape
    out = np.zeros((n, o, d * stride, h * stride, wd * stride))
    for bn in range(n):
        for ci in range(c):
            for i in range(d):
                for j in range(h):
                    for l in range(wd):
                        out[bn, :, i * stride: i * stride + k, j * stride: j * stride + k,
                            l * stride: l * stride + k] += x[bn, ci, i, j, l] * w[ci]
    if b is not None:
        out += b[None, :, None, None, None]
    return out


def surface_oracle(mask):
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    out = []
    for z, y, x in np.argwhere(m):
        nbrs = [m[z - 1, y, x], m[z + 1, y, x], m[z, y - 1, x], m[z, y + 1, x], m[z, y, x - 1], m[z, y, x + 1]]
        if not all(nbrs):
            out.append((z - 1, y - 1, x - 1))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def directed_oracle(a, b):
    return np.array([min(math.sqrt(float(((p - q) ** 2).sum())) for q in b) for p in a])


def hd95_oracle(S, G):
    a, b = surface_oracle(S), surface_oracle(G)
    return max(np.percentile(directed_oracle(a, b), 95), np.percentile(directed_oracle(b, a), 95))


def asd_oracle(S, G):
    a, b = surface_oracle(S), surface_oracle(G)
    da, db = directed_oracle(a, b), directed_oracle(b, a)
    return (da.sum() + db.sum()) / (len(da) + len(db))
