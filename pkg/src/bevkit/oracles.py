"""Brute-force reference implementations for the check suite.

Everything here trades speed for obviousness: explicit loops, exhaustive
enumeration, no shared code with the production paths it validates. The
check runner and the test suite both compare against these.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .geometry import BEVConfig, CameraParams, DepthBins, bev_index, depth_to_bin, unproject


def ray_stream_oracle(
    contexts: list[np.ndarray],
    dists: list[np.ndarray],
    cams: list[CameraParams],
    bins: DepthBins,
    bev_cfg: BEVConfig,
) -> np.ndarray:
    """Triple loop over (camera, pixel, depth bin), materializing every sample."""
    n = bev_cfg.n
    out = np.zeros((n, n, contexts[0].shape[2]))
    for ctx, dist, cam in zip(contexts, dists, cams):
        hp, wp, d_count = dist.shape
        stride = cam.width // wp
        for row in range(hp):
            for col in range(wp):
                u = (col + 0.5) * stride - 0.5
                v = (row + 0.5) * stride - 0.5
                for d in range(d_count):
                    depth = bins.d_min + (d + 0.5) * bins.delta
                    world = unproject(u, v, depth, cam)
                    cell = bev_index(world[0], world[1], bev_cfg)
                    if cell is None:
                        continue
                    out[cell[0], cell[1]] += ctx[row, col] * dist[row, col, d]
    return out


def ray_pixel_cell_counts(
    dists: list[np.ndarray],
    cams: list[CameraParams],
    bins: DepthBins,
    bev_cfg: BEVConfig,
) -> list[int]:
    """Per (camera, pixel): how many distinct BEV cells receive nonzero mass."""
    counts = []
    for dist, cam in zip(dists, cams):
        hp, wp, d_count = dist.shape
        stride = cam.width // wp
        for row in range(hp):
            for col in range(wp):
                u = (col + 0.5) * stride - 0.5
                v = (row + 0.5) * stride - 0.5
                touched = set()
                for d in range(d_count):
                    if dist[row, col, d] == 0.0:
                        continue
                    depth = bins.d_min + (d + 0.5) * bins.delta
                    world = unproject(u, v, depth, cam)
                    cell = bev_index(world[0], world[1], bev_cfg)
                    if cell is not None:
                        touched.add(cell)
                counts.append(len(touched))
    return counts


def point_stream_oracle(
    points: np.ndarray,
    hr_feats: list[np.ndarray],
    cams: list[CameraParams],
    bev_cfg: BEVConfig,
) -> np.ndarray:
    """Per-point loop: project into each camera, read one pixel, average."""
    n = bev_cfg.n
    c = hr_feats[0].shape[2]
    sums = np.zeros((n, n, c))
    counts = np.zeros((n, n))
    for p in points:
        feats = []
        for feat, cam in zip(hr_feats, cams):
            p_cam = cam.rotation @ p[:3] + cam.translation
            if p_cam[2] <= 1e-6:
                continue
            u = cam.fx * p_cam[0] / p_cam[2] + cam.cx
            v = cam.fy * p_cam[1] / p_cam[2] + cam.cy
            px, py = int(np.rint(u)), int(np.rint(v))
            if 0 <= px < cam.width and 0 <= py < cam.height:
                feats.append(feat[py, px])
        if not feats:
            continue
        cell = bev_index(p[0], p[1], bev_cfg)
        if cell is None:
            continue
        sums[cell[0], cell[1]] += np.mean(feats, axis=0)
        counts[cell[0], cell[1]] += 1
    nz = counts > 0
    sums[nz] /= counts[nz][:, None]
    return sums


def conv2d_oracle(image: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                  kernel: int, stride: int, pad: int) -> np.ndarray:
    """Direct sliding-window convolution; weight is [out_c, k*k*in_c]."""
    h, w, cin = image.shape
    padded = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    padded[pad : pad + h, pad : pad + w] = image
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    cout = weight.shape[0]
    out = np.zeros((oh, ow, cout))
    for oy in range(oh):
        for ox in range(ow):
            patch = padded[oy * stride : oy * stride + kernel, ox * stride : ox * stride + kernel]
            out[oy, ox] = weight @ patch.ravel() + bias
    return out


def upsample_oracle(feat: np.ndarray, weight: np.ndarray, bias: np.ndarray, factor: int) -> np.ndarray:
    """Transposed convolution with kernel == stride: per-pixel block expansion."""
    h, w, cin = feat.shape
    cout = weight.shape[0] // (factor * factor)
    out = np.zeros((h * factor, w * factor, cout))
    for y in range(h):
        for x in range(w):
            block = (weight @ feat[y, x] + bias).reshape(factor, factor, cout)
            out[y * factor : (y + 1) * factor, x * factor : (x + 1) * factor] = block
    return out


def select_candidates_oracle(heatmap: np.ndarray, k: int):
    """O(XY) scan: eligibility by explicit neighbor comparison, then sort."""
    X, Y, _ = heatmap.shape
    entries = []
    for gx in range(X):
        for gy in range(Y):
            score = heatmap[gx, gy].max()
            cls = int(heatmap[gx, gy].argmax())
            ok = True
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    if dx == 0 and dy == 0:
                        continue
                    nx, ny = gx + dx, gy + dy
                    if 0 <= nx < X and 0 <= ny < Y and score < heatmap[nx, ny].max():
                        ok = False
            if ok:
                entries.append((-score, gx, gy, cls))
    entries.sort()
    return [(gx, gy, cls) for _, gx, gy, cls in entries[:k]]


def hungarian_oracle(cost: np.ndarray):
    """Exhaustive enumeration over injections; feasible for min(m, n) <= 7.

    Returns (best total, lexicographically smallest optimal pair list).
    """
    m, n = cost.shape
    k = min(m, n)
    best_total = math.inf
    best_pairs = None
    for row_subset in itertools.combinations(range(m), k):
        for perm in itertools.permutations(range(n), k):
            pairs = sorted(zip(row_subset, perm))
            total = math.fsum(cost[i, j] for i, j in pairs)
            if total < best_total or (total == best_total and pairs < best_pairs):
                best_total, best_pairs = total, pairs
    return best_total, best_pairs or []


def greedy_match_oracle(det_centers, det_classes, det_scores, gt_centers, gt_classes, threshold):
    """All-pairs distance table plus an explicit greedy scan in score order."""
    order = sorted(range(len(det_scores)), key=lambda i: -det_scores[i])
    taken = set()
    tp = [False] * len(det_scores)
    for di in order:
        best, best_dist = None, threshold
        for gi in range(len(gt_centers)):
            if gi in taken or gt_classes[gi] != det_classes[di]:
                continue
            dist = math.hypot(
                det_centers[di][0] - gt_centers[gi][0],
                det_centers[di][1] - gt_centers[gi][1],
            )
            if dist < best_dist:
                best, best_dist = gi, dist
        if best is not None:
            taken.add(best)
            tp[di] = True
    return tp


def average_precision_oracle(tp_flags, num_gt: int) -> float:
    """Hand integration of the 101-point rule with explicit interpolation.

    Queries hitting a repeated recall value take the last sample there
    (the lowest precision reached at that recall), matching interpolation
    over the accumulated curve.
    """
    if num_gt == 0:
        return math.nan if not tp_flags else 0.0
    if not tp_flags:
        return 0.0
    rec, prec = [], []
    tp = fp = 0
    for flag in tp_flags:
        tp += flag
        fp += not flag
        rec.append(tp / num_gt)
        prec.append(tp / (tp + fp))
    total = 0.0
    for step in range(11, 101):
        r = step / 100.0
        if r < rec[0]:
            p = prec[0]
        elif r > rec[-1]:
            p = 0.0
        else:
            j = max(i for i in range(len(rec)) if rec[i] <= r)
            if rec[j] == r or j == len(rec) - 1:
                p = prec[j]
            else:
                w = (r - rec[j]) / (rec[j + 1] - rec[j])
                p = prec[j] + w * (prec[j + 1] - prec[j])
        total += max(0.0, p - 0.1)
    return total / 90.0 / (1.0 - 0.1)
