"""Slow, obviously-correct reference implementations used as test oracles."""

from collections import deque

import numpy as np


def conv_direct(x, w, b, stride=1, padding="same"):
    """Explicit window loops over an H x W x C image."""
    h, wd, _ = x.shape
    k = w.shape[0]
    if padding == "same":
        oh, ow = -(-h // stride), -(-wd // stride)
        ph = max((oh - 1) * stride + k - h, 0)
        pw = max((ow - 1) * stride + k - wd, 0)
        top, left = ph // 2, pw // 2
    else:
        oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
        top = left = 0
    out = np.zeros((oh, ow, w.shape[3]))
    for i in range(oh):
        for j in range(ow):
            for di in range(k):
                for dj in range(k):
                    r, c = i * stride + di - top, j * stride + dj - left
                    if 0 <= r < h and 0 <= c < wd:
                        out[i, j] += x[r, c] @ w[di, dj]
            out[i, j] += b
    return out


def flood_fill_labels(mask):
    """4-connected components by BFS, as sets of (row, col)."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    comps = []
    for r0 in range(mask.shape[0]):
        for c0 in range(mask.shape[1]):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            comp, queue = set(), deque([(r0, c0)])
            seen[r0, c0] = True
            while queue:
                r, c = queue.popleft()
                comp.add((r, c))
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < mask.shape[0] and 0 <= cc < mask.shape[1] and mask[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        queue.append((rr, cc))
            comps.append(comp)
    return comps


def scan_box(pixels):
    """(x_min, y_min, x_max, y_max) by a plain loop over the pixels."""
    x_min = y_min = 10**9
    x_max = y_max = -1
    for r, c in pixels:
        x_min, x_max = min(x_min, c), max(x_max, c)
        y_min, y_max = min(y_min, r), max(y_max, r)
    return x_min, y_min, x_max, y_max


def raster_iou(a, b, size=64):
    """Box IoU by painting both inclusive boxes onto a pixel grid."""
    ga = np.zeros((size, size), bool)
    gb = np.zeros((size, size), bool)
    ga[a[1] : a[3] + 1, a[0] : a[2] + 1] = True
    gb[b[1] : b[3] + 1, b[0] : b[2] + 1] = True
    return np.count_nonzero(ga & gb) / np.count_nonzero(ga | gb)


def sweep_ap(dets, gts, thr=0.5):
    """AP from a sweep over every score threshold.

    ``dets`` are (score, image, box) with distinct scores; ``gts`` are
    (image, box). At each threshold the kept detections are matched greedily
    from the highest score, and the interpolated precision is integrated over
    recall exactly.
    """
    if not gts:
        return 0.0 if dets else None
    points = [(0.0, 1.0)]
    for t in sorted({d[0] for d in dets}, reverse=True):
        kept = sorted((d for d in dets if d[0] >= t), key=lambda d: -d[0])
        used, tp = set(), 0
        for _, img, box in kept:
            cand = [(raster_iou(box, g[1]), j) for j, g in enumerate(gts) if g[0] == img and j not in used]
            cand = [cj for cj in cand if cj[0] > thr]
            if cand:
                best = max(c for c, _ in cand)
                used.add(min(j for c, j in cand if c == best))
                tp += 1
        points.append((tp / len(gts), tp / len(kept)))
    recalls = sorted({r for r, _ in points})
    ap, prev = 0.0, 0.0
    for r in recalls:
        if r == 0.0:
            continue
        ap += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return ap

