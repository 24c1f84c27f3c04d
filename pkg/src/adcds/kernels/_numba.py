"""Numba-compiled raster kernels. Output matches ``_numpy`` exactly."""

import numpy as np
from numba import njit


@njit(cache=True)
def box3_sum(image):
    h, w = image.shape
    out = np.zeros((h, w), dtype=np.int32)
    for y in range(h):
        for x in range(w):
            acc = 0
            for dy in range(-1, 2):
                yy = min(max(y + dy, 0), h - 1)
                for dx in range(-1, 2):
                    xx = min(max(x + dx, 0), w - 1)
                    acc += image[yy, xx]
            out[y, x] = acc
    return out


@njit(cache=True)
def _otsu_hist(hist):
    n_levels = hist.size
    n = 0
    s = 0
    for i in range(n_levels):
        n += hist[i]
        s += hist[i] * i
    best = -1.0
    best_t = -1
    n0 = 0
    s0 = 0
    for t in range(n_levels):
        n0 += hist[t]
        s0 += hist[t] * t
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        d = float(s0 * n - s * n0)
        score = (d * d) / (float(n0) * float(n1))
        if score > best:
            best = score
            best_t = t
    return best_t


def otsu_threshold(values, n_levels):
    v = np.asarray(values).ravel()
    hist = np.bincount(v, minlength=n_levels).astype(np.int64)
    t = _otsu_hist(hist)
    if t < 0:
        return int(v[0]) if v.size else 0
    return int(t)


@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True)
def _label4(b):
    h, w = b.shape
    prov = np.zeros((h, w), dtype=np.int32)
    parent = np.zeros(h * w // 2 + 2, dtype=np.int32)
    nxt = 1
    for y in range(h):
        for x in range(w):
            if not b[y, x]:
                continue
            up = prov[y - 1, x] if y > 0 else 0
            left = prov[y, x - 1] if x > 0 else 0
            if up == 0 and left == 0:
                if nxt >= parent.size:
                    grown = np.zeros(parent.size * 2, dtype=np.int32)
                    grown[:parent.size] = parent
                    parent = grown
                parent[nxt] = nxt
                prov[y, x] = nxt
                nxt += 1
            elif up == 0:
                prov[y, x] = left
            elif left == 0:
                prov[y, x] = up
            else:
                ru = _find(parent, up)
                rl = _find(parent, left)
                if ru < rl:
                    parent[rl] = ru
                elif rl < ru:
                    parent[ru] = rl
                prov[y, x] = min(ru, rl)
    final = np.zeros(nxt, dtype=np.int32)
    n = 0
    for i in range(1, nxt):
        r = _find(parent, i)
        if r == i:
            n += 1
            final[i] = n
        else:
            final[i] = final[r]
    out = np.zeros((h, w), dtype=np.int32)
    for y in range(h):
        for x in range(w):
            if prov[y, x]:
                out[y, x] = final[prov[y, x]]
    return out, n


def label4(binary):
    labels, n = _label4(np.ascontiguousarray(binary, dtype=np.bool_))
    return labels, int(n)


@njit(cache=True)
def _component_stats(labels, n):
    h, w = labels.shape
    area = np.zeros(n, dtype=np.int64)
    y0 = np.full(n, h, dtype=np.int64)
    x0 = np.full(n, w, dtype=np.int64)
    y1 = np.zeros(n, dtype=np.int64)
    x1 = np.zeros(n, dtype=np.int64)
    for y in range(h):
        for x in range(w):
            lab = labels[y, x]
            if lab == 0:
                continue
            i = lab - 1
            area[i] += 1
            if y < y0[i]:
                y0[i] = y
            if x < x0[i]:
                x0[i] = x
            if y + 1 > y1[i]:
                y1[i] = y + 1
            if x + 1 > x1[i]:
                x1[i] = x + 1
    return area, y0, x0, y1, x1


def component_stats(labels, n):
    return _component_stats(np.ascontiguousarray(labels), n)


@njit(cache=True)
def _majority(m, passes, neighborhood):
    h, w = m.shape
    nn = 4 if neighborhood == 4 else 8
    cur = m.copy()
    for _ in range(passes):
        new = cur.copy()
        changed = False
        for y in range(h):
            for x in range(w):
                c = 0
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        if dy == 0 and dx == 0:
                            continue
                        if nn == 4 and dy != 0 and dx != 0:
                            continue
                        yy = y + dy
                        xx = x + dx
                        if 0 <= yy < h and 0 <= xx < w and cur[yy, xx]:
                            c += 1
                if 2 * c > nn:
                    new[y, x] = True
                elif 2 * c < nn:
                    new[y, x] = False
                if new[y, x] != cur[y, x]:
                    changed = True
        cur = new
        if not changed:
            break
    return cur


def majority_filter(mask, passes, neighborhood):
    return _majority(np.ascontiguousarray(mask, dtype=np.bool_), passes,
                     neighborhood)


@njit(cache=True)
def _rle_encode(flat):
    n = flat.size
    starts = np.empty(n // 2 + 1, dtype=np.int64)
    lengths = np.empty(n // 2 + 1, dtype=np.int64)
    k = 0
    i = 0
    while i < n:
        if flat[i]:
            j = i
            while j < n and flat[j]:
                j += 1
            starts[k] = i
            lengths[k] = j - i
            k += 1
            i = j
        else:
            i += 1
    return starts[:k].copy(), lengths[:k].copy()


def rle_encode(mask):
    flat = np.ascontiguousarray(np.asarray(mask, dtype=np.bool_).T).ravel()
    return _rle_encode(flat)


@njit(cache=True)
def _rle_decode(starts, lengths, height, width):
    flat = np.zeros(height * width, dtype=np.bool_)
    for i in range(starts.size):
        flat[starts[i]:starts[i] + lengths[i]] = True
    return flat


def rle_decode(starts, lengths, height, width):
    flat = _rle_decode(np.asarray(starts, dtype=np.int64),
                       np.asarray(lengths, dtype=np.int64), height, width)
    return flat.reshape(width, height).T.copy()
