"""Hot numeric kernels.

Every kernel has two implementations: a loop version compiled with numba and a
vectorised numpy version. The public names dispatch on ``NUMGAME_JIT`` (see
:mod:`numgame._jit`); both variants stay importable so tests and the benchmark
can compare them directly.

Conventions: rasters are indexed ``[row, col]``; a pixel's centre sits at
``(col + 0.5, row + 0.5)`` in pixel units, x to the right, y downwards.
"""

import numpy as np

from ._jit import USE_JIT, njit

# --------------------------------------------------------------------------
# dot painting


@njit(cache=True)
def _paint_disks_jit(side, centers, radii):
    canvas = np.ones((side, side))
    for d in range(radii.shape[0]):
        cx = centers[d, 0]
        cy = centers[d, 1]
        r = radii[d]
        r2 = r * r
        c_lo = max(0, int(np.floor(cx - r)) - 1)
        c_hi = min(side, int(np.ceil(cx + r)) + 1)
        r_lo = max(0, int(np.floor(cy - r)) - 1)
        r_hi = min(side, int(np.ceil(cy + r)) + 1)
        for i in range(r_lo, r_hi):
            dy = i + 0.5 - cy
            for j in range(c_lo, c_hi):
                dx = j + 0.5 - cx
                if dx * dx + dy * dy < r2:
                    canvas[i, j] = 0.0
    return canvas


def _paint_disks_numpy(side, centers, radii):
    coords = np.arange(side) + 0.5
    dx = coords[None, None, :] - centers[:, 0, None, None]
    dy = coords[None, :, None] - centers[:, 1, None, None]
    inside = (dx * dx + dy * dy < (radii * radii)[:, None, None]).any(axis=0)
    return np.where(inside, 0.0, 1.0)


def paint_disks(side, centers, radii):
    """Binary raster (1 = white, 0 = black) with a pixel black iff its centre is
    strictly inside one of the disks."""
    centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 2)
    radii = np.ascontiguousarray(radii, dtype=np.float64).reshape(-1)
    if USE_JIT:
        return _paint_disks_jit(int(side), centers, radii)
    return _paint_disks_numpy(int(side), centers, radii)


# --------------------------------------------------------------------------
# 4-connected component labelling


@njit(cache=True)
def _label_components_jit(mask):
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    stack = np.empty(h * w, dtype=np.int64)
    count = 0
    for si in range(h):
        for sj in range(w):
            if not mask[si, sj] or labels[si, sj] != 0:
                continue
            count += 1
            labels[si, sj] = count
            top = 0
            stack[top] = si * w + sj
            top += 1
            while top > 0:
                top -= 1
                p = stack[top]
                i = p // w
                j = p - i * w
                if i > 0 and mask[i - 1, j] and labels[i - 1, j] == 0:
                    labels[i - 1, j] = count
                    stack[top] = p - w
                    top += 1
                if i < h - 1 and mask[i + 1, j] and labels[i + 1, j] == 0:
                    labels[i + 1, j] = count
                    stack[top] = p + w
                    top += 1
                if j > 0 and mask[i, j - 1] and labels[i, j - 1] == 0:
                    labels[i, j - 1] = count
                    stack[top] = p - 1
                    top += 1
                if j < w - 1 and mask[i, j + 1] and labels[i, j + 1] == 0:
                    labels[i, j + 1] = count
                    stack[top] = p + 1
                    top += 1
    return labels, count


def _label_components_numpy(mask):
    # min-label propagation until fixed point
    h, w = mask.shape
    big = h * w + 1
    lab = np.where(mask, np.arange(1, h * w + 1).reshape(h, w), big)
    while True:
        nxt = lab.copy()
        nxt[1:, :] = np.minimum(nxt[1:, :], lab[:-1, :])
        nxt[:-1, :] = np.minimum(nxt[:-1, :], lab[1:, :])
        nxt[:, 1:] = np.minimum(nxt[:, 1:], lab[:, :-1])
        nxt[:, :-1] = np.minimum(nxt[:, :-1], lab[:, 1:])
        nxt = np.where(mask, nxt, big)
        if np.array_equal(nxt, lab):
            break
        lab = nxt
    roots = np.unique(lab[mask])
    labels = np.zeros((h, w), dtype=np.int32)
    if roots.size:
        labels[mask] = np.searchsorted(roots, lab[mask]) + 1
    return labels, int(roots.size)


def label_components(mask):
    """Label the 4-connected components of a boolean mask.

    Returns ``(labels, count)``; background is 0 and components are numbered
    from 1. Numbering order differs between the two backends.
    """
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {mask.shape}")
    if USE_JIT:
        labels, count = _label_components_jit(mask)
        return labels, int(count)
    return _label_components_numpy(mask)


# --------------------------------------------------------------------------
# squared distance from each pixel to the nearest segment

_DEGENERATE = 1e-12


@njit(cache=True)
def _segment_field_jit(segs, side):
    nb, nk = segs.shape[0], segs.shape[1]
    d2 = np.empty((nb, side, side))
    arg = np.zeros((nb, side, side), dtype=np.int32)
    tpar = np.zeros((nb, side, side))
    for b in range(nb):
        for i in range(side):
            py = i + 0.5
            for j in range(side):
                px = j + 0.5
                best = np.inf
                best_k = 0
                best_t = 0.0
                for k in range(nk):
                    x0 = segs[b, k, 0]
                    y0 = segs[b, k, 1]
                    dx = segs[b, k, 2] - x0
                    dy = segs[b, k, 3] - y0
                    ll = dx * dx + dy * dy
                    if ll > _DEGENERATE:
                        t = ((px - x0) * dx + (py - y0) * dy) / ll
                        if t < 0.0:
                            t = 0.0
                        elif t > 1.0:
                            t = 1.0
                    else:
                        t = 0.5
                    ex = x0 + t * dx - px
                    ey = y0 + t * dy - py
                    dist = ex * ex + ey * ey
                    if dist < best:
                        best = dist
                        best_k = k
                        best_t = t
                d2[b, i, j] = best
                arg[b, i, j] = best_k
                tpar[b, i, j] = best_t
    return d2, arg, tpar


@njit(cache=True)
def _segment_field_grad_jit(segs, arg, tpar, grad_d2):
    nb, nk = segs.shape[0], segs.shape[1]
    side = arg.shape[1]
    out = np.zeros((nb, nk, 4))
    for b in range(nb):
        for i in range(side):
            py = i + 0.5
            for j in range(side):
                g = grad_d2[b, i, j]
                if g == 0.0:
                    continue
                px = j + 0.5
                k = arg[b, i, j]
                t = tpar[b, i, j]
                x0 = segs[b, k, 0]
                y0 = segs[b, k, 1]
                ex = x0 + t * (segs[b, k, 2] - x0) - px
                ey = y0 + t * (segs[b, k, 3] - y0) - py
                out[b, k, 0] += 2.0 * g * ex * (1.0 - t)
                out[b, k, 1] += 2.0 * g * ey * (1.0 - t)
                out[b, k, 2] += 2.0 * g * ex * t
                out[b, k, 3] += 2.0 * g * ey * t
    return out


def _segment_geometry_numpy(segs, side):
    c = np.arange(side) + 0.5
    px = c[None, None, None, :]
    py = c[None, None, :, None]
    x0 = segs[:, :, 0, None, None]
    y0 = segs[:, :, 1, None, None]
    dx = segs[:, :, 2, None, None] - x0
    dy = segs[:, :, 3, None, None] - y0
    ll = dx * dx + dy * dy
    degenerate = ll <= _DEGENERATE
    t = ((px - x0) * dx + (py - y0) * dy) / np.where(degenerate, 1.0, ll)
    t = np.where(degenerate, 0.5, np.clip(t, 0.0, 1.0))
    ex = x0 + t * dx - px
    ey = y0 + t * dy - py
    return t, ex, ey


def _segment_field_numpy(segs, side):
    t, ex, ey = _segment_geometry_numpy(segs, side)
    dist = ex * ex + ey * ey  # (B, K, S, S)
    arg = dist.argmin(axis=1)
    d2 = np.take_along_axis(dist, arg[:, None], axis=1)[:, 0]
    tpar = np.take_along_axis(t, arg[:, None], axis=1)[:, 0]
    return d2, arg.astype(np.int32), tpar


def _segment_field_grad_numpy(segs, arg, tpar, grad_d2):
    nk = segs.shape[1]
    side = arg.shape[1]
    _, ex, ey = _segment_geometry_numpy(segs, side)
    onehot = arg[:, None] == np.arange(nk)[None, :, None, None]
    g = 2.0 * grad_d2[:, None] * onehot
    t = tpar[:, None]
    out = np.empty(segs.shape)
    out[:, :, 0] = (g * ex * (1.0 - t)).sum(axis=(2, 3))
    out[:, :, 1] = (g * ey * (1.0 - t)).sum(axis=(2, 3))
    out[:, :, 2] = (g * ex * t).sum(axis=(2, 3))
    out[:, :, 3] = (g * ey * t).sum(axis=(2, 3))
    return out


def segment_field(segs, side):
    """Squared distance from every pixel centre to the nearest segment.

    Args:
        segs: ``(B, K, 4)`` endpoints ``(x0, y0, x1, y1)`` in pixel units.
        side: raster side length.

    Returns:
        ``(d2, arg, tpar)``: the ``(B, S, S)`` squared distances, the index of
        the nearest segment and the position of the closest point along it.
        ``arg`` and ``tpar`` are what :func:`segment_field_grad` needs.
    """
    segs = np.ascontiguousarray(segs, dtype=np.float64)
    if USE_JIT:
        return _segment_field_jit(segs, int(side))
    return _segment_field_numpy(segs, int(side))


def segment_field_grad(segs, arg, tpar, grad_d2):
    """Vector-Jacobian product of :func:`segment_field` w.r.t. the endpoints.

    A zero-length segment splits its gradient evenly between its endpoints,
    which matches a central finite difference.
    """
    segs = np.ascontiguousarray(segs, dtype=np.float64)
    grad_d2 = np.ascontiguousarray(grad_d2, dtype=np.float64)
    if USE_JIT:
        return _segment_field_grad_jit(segs, arg, tpar, grad_d2)
    return _segment_field_grad_numpy(segs, arg, tpar, grad_d2)


# --------------------------------------------------------------------------
# nearest-centroid assignment and group distances


@njit(cache=True)
def _nearest_centroid_jit(x, centroids):
    n, dim = x.shape
    k = centroids.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    dists = np.empty(n)
    for i in range(n):
        best = np.inf
        best_c = 0
        for c in range(k):
            acc = 0.0
            for f in range(dim):
                diff = x[i, f] - centroids[c, f]
                acc += diff * diff
            if acc < best:
                best = acc
                best_c = c
        labels[i] = best_c
        dists[i] = best
    return labels, dists


def _nearest_centroid_numpy(x, centroids):
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d.argmin(axis=1)
    return labels.astype(np.int64), d[np.arange(len(x)), labels]


def nearest_centroid(x, centroids):
    """Index of and squared distance to the nearest centroid for each row."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if USE_JIT:
        return _nearest_centroid_jit(x, centroids)
    return _nearest_centroid_numpy(x, centroids)


@njit(cache=True)
def _mean_pair_distance_jit(a, b):
    na, dim = a.shape
    nb = b.shape[0]
    total = 0.0
    for i in range(na):
        for j in range(nb):
            acc = 0.0
            for f in range(dim):
                diff = a[i, f] - b[j, f]
                acc += diff * diff
            total += np.sqrt(acc)
    return total / (na * nb)


def _mean_pair_distance_numpy(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return float(d.mean())


def mean_pair_distance(a, b):
    """Mean Euclidean distance over all pairs (row of ``a``, row of ``b``)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if USE_JIT:
        return float(_mean_pair_distance_jit(a, b))
    return _mean_pair_distance_numpy(a, b)
