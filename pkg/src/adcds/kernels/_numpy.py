"""Pure-numpy implementations of the raster kernels.

Every function here has a twin in ``_numba`` with identical output; the
test-suite checks the two against each other bit for bit.
"""

import numpy as np


def box3_sum(image):
    """3x3 neighbourhood sum with edge replication, as int32."""
    a = np.pad(np.asarray(image, dtype=np.int32), 1, mode="edge")
    h, w = a.shape[0] - 2, a.shape[1] - 2
    out = np.zeros((h, w), dtype=np.int32)
    for dy in range(3):
        for dx in range(3):
            out += a[dy:dy + h, dx:dx + w]
    return out


def otsu_threshold(values, n_levels):
    """Otsu threshold over integer ``values`` in ``[0, n_levels)``.

    Returns ``t`` such that the upper class is ``values > t``. Ties in the
    between-class variance resolve to the smallest ``t``. A constant input
    returns its single level.
    """
    v = np.asarray(values).ravel()
    hist = np.bincount(v, minlength=n_levels).astype(np.int64)
    n = int(hist.sum())
    s = int((hist * np.arange(n_levels, dtype=np.int64)).sum())
    n0 = np.cumsum(hist)
    s0 = np.cumsum(hist * np.arange(n_levels, dtype=np.int64))
    n1 = n - n0
    valid = (n0 > 0) & (n1 > 0)
    if not valid.any():
        return int(v[0]) if v.size else 0
    d = (s0 * n - s * n0).astype(np.float64)
    score = np.full(n_levels, -1.0)
    score[valid] = (d[valid] * d[valid]) / (
        n0[valid].astype(np.float64) * n1[valid].astype(np.float64))
    return int(np.argmax(score))


def _runs(binary):
    """Row runs of a boolean raster as (row, start, end) arrays, raster order."""
    b = np.asarray(binary, dtype=bool)
    h, w = b.shape
    padded = np.zeros((h, w + 2), dtype=np.int8)
    padded[:, 1:-1] = b
    d = np.diff(padded, axis=1)
    rs, cs = np.nonzero(d == 1)
    re, ce = np.nonzero(d == -1)
    # nonzero is row-major, so starts and ends pair up in order
    return rs.astype(np.int64), cs.astype(np.int64), ce.astype(np.int64)


def label4(binary):
    """4-connected component labelling.

    Labels run 1..n in order of each component's first pixel in row-major
    scan; background is 0.
    """
    b = np.asarray(binary, dtype=bool)
    h, w = b.shape
    labels = np.zeros((h, w), dtype=np.int32)
    rows, starts, ends = _runs(b)
    n_runs = rows.size
    if n_runs == 0:
        return labels, 0
    k = w + 1
    start_keys = rows * k + starts
    end_keys = rows * k + ends
    # runs in row r+1 overlapping run (r, s, e): end > s and start < e
    lo = np.searchsorted(end_keys, (rows + 1) * k + starts, side="right")
    hi = np.searchsorted(start_keys, (rows + 1) * k + ends, side="left")
    cnt = np.maximum(hi - lo, 0)
    src = np.repeat(np.arange(n_runs), cnt)
    offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    dst = np.repeat(lo, cnt) + offs
    root = np.arange(n_runs)
    while True:
        prev = root.copy()
        m = np.minimum(root[src], root[dst])
        np.minimum.at(root, src, m)
        np.minimum.at(root, dst, m)
        root = root[root]
        if np.array_equal(root, prev):
            break
    uniq, comp = np.unique(root, return_inverse=True)
    comp = comp.astype(np.int32) + 1
    lens = ends - starts
    pix = np.repeat(rows * w + starts - np.cumsum(lens) + lens, lens) \
        + np.arange(lens.sum())
    labels.ravel()[pix] = np.repeat(comp, lens)
    return labels, int(uniq.size)


def component_stats(labels, n):
    """Area and half-open bbox (y0, x0, y1, x1) for labels 1..n."""
    lab = np.asarray(labels).ravel()
    h, w = labels.shape
    ys, xs = np.divmod(np.arange(lab.size), w)
    fg = lab > 0
    lab, ys, xs = lab[fg], ys[fg], xs[fg]
    area = np.bincount(lab, minlength=n + 1)[1:].astype(np.int64)
    y0 = np.full(n + 1, h, dtype=np.int64)
    x0 = np.full(n + 1, w, dtype=np.int64)
    y1 = np.zeros(n + 1, dtype=np.int64)
    x1 = np.zeros(n + 1, dtype=np.int64)
    np.minimum.at(y0, lab, ys)
    np.minimum.at(x0, lab, xs)
    np.maximum.at(y1, lab, ys + 1)
    np.maximum.at(x1, lab, xs + 1)
    return area, y0[1:], x0[1:], y1[1:], x1[1:]


def majority_filter(mask, passes, neighborhood):
    """Synchronous majority vote; ties keep the current value."""
    m = np.asarray(mask, dtype=bool).copy()
    h, w = m.shape
    if neighborhood == 4:
        offsets = ((-1, 0), (1, 0), (0, -1), (0, 1))
    else:
        offsets = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                        if dy or dx)
    n = len(offsets)
    for _ in range(passes):
        p = np.pad(m, 1).astype(np.int8)
        count = np.zeros((h, w), dtype=np.int8)
        for dy, dx in offsets:
            count += p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        new = np.where(2 * count > n, True, np.where(2 * count < n, False, m))
        if np.array_equal(new, m):
            break
        m = new
    return m


def rle_encode(mask):
    """Column-major foreground runs as (starts, lengths) int64 arrays."""
    flat = np.asarray(mask, dtype=bool).T.ravel()
    padded = np.concatenate(([False], flat, [False])).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return starts.astype(np.int64), (ends - starts).astype(np.int64)


def rle_decode(starts, lengths, height, width):
    starts = np.asarray(starts, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    delta = np.zeros(height * width + 1, dtype=np.int64)
    np.add.at(delta, starts, 1)
    np.add.at(delta, starts + lengths, -1)
    flat = np.cumsum(delta[:-1]) > 0
    return flat.reshape(width, height).T.copy()
