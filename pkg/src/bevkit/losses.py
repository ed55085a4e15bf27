"""Detection losses and minimum-cost bipartite matching.

The matcher is an O(n^3) augmenting-path solver over row/column potentials.
Among cost-tied optima it returns the lexicographically smallest pair list,
found by greedily fixing pairs inside the zero-reduced-cost subgraph and
checking that a completion still exists. All losses run on the numerics
tape, so their gradients come from the same backward pass as the rest of
the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .geometry import BEVConfig, bev_index
from .numerics import NumericError, Tensor
from .predictor import CandidateSet, HeadOutput, encode_box_for_cell

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lam1: float = 1.0  # class term inside each matched head loss
    lam2: float = 0.25  # box term inside each matched head loss
    lam_depth: float = 0.05
    lam_heat: float = 1.0
    lam_box: float = 0.25  # main matched head loss in the total

    def __post_init__(self):
        if min(self.lam1, self.lam2, self.lam_depth, self.lam_heat, self.lam_box) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]  # (prediction, ground truth), ascending
    unmatched_predictions: tuple[int, ...]
    unmatched_ground_truths: tuple[int, ...]
    total_cost: float


def _solve_potentials(a: np.ndarray):
    """Optimal assignment for rows <= cols; returns (col_for_row, u, v)."""
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    matched_row = np.zeros(m + 1, dtype=np.int64)  # 1-based row per col, 0 free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        matched_row[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = matched_row[j0]
            cur = a[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            if better.any():
                minv[1:][better] = cur[better]
                way[1:][better] = j0
            free_cols = np.flatnonzero(free) + 1
            j1 = free_cols[np.argmin(minv[free_cols])]
            delta = minv[j1]
            u[matched_row[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if matched_row[j0] == 0:
                break
        while j0:
            j_prev = way[j0]
            matched_row[j0] = matched_row[j_prev]
            j0 = j_prev
    col_for_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if matched_row[j] > 0:
            col_for_row[matched_row[j] - 1] = j - 1
    return col_for_row, u[1:], v[1:]


def _max_matching_size(adj: np.ndarray, rows: list[int], cols: list[int]) -> int:
    """Kuhn's augmenting paths over a boolean adjacency restriction."""
    col_owner: dict[int, int] = {}

    def try_row(r, banned):
        for c in cols:
            if c in banned or not adj[r, c]:
                continue
            banned.add(c)
            owner = col_owner.get(c)
            if owner is None or try_row(owner, banned):
                col_owner[c] = r
                return True
        return False

    size = 0
    for r in rows:
        if try_row(r, set()):
            size += 1
    return size


def _lex_smallest_pairs(eq: np.ndarray, k: int):
    """Lexicographically smallest k-pair list forming a matching inside eq.

    Later pairs must use strictly larger prediction indices, so candidates
    are scanned in (prediction, ground truth) order and accepted when a
    completion saturating the remaining side still exists.
    """
    m, n = eq.shape
    pairs = []
    used_gt = np.zeros(n, dtype=bool)
    last_i = -1
    for pos in range(k):
        need = k - pos - 1
        placed = False
        for i in range(last_i + 1, m - need):
            for j in range(n):
                if used_gt[j] or not eq[i, j]:
                    continue
                rows = list(range(i + 1, m))
                cols = [cc for cc in range(n) if not used_gt[cc] and cc != j]
                if _max_matching_size(eq, rows, cols) >= need:
                    pairs.append((i, j))
                    used_gt[j] = True
                    last_i = i
                    placed = True
                    break
            if placed:
                break
        if not placed:
            return None
    return pairs


def hungarian_match(cost) -> MatchResult:
    """Minimum-total-cost assignment of min(m, n) pairs.

    Cost-tied optima resolve to the lexicographically smallest pair list.
    Non-finite costs are rejected.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost matrix contains non-finite entries")
    m, n = cost.shape
    k = min(m, n)
    if k == 0:
        return MatchResult((), tuple(range(m)), tuple(range(n)), 0.0)

    if m <= n:
        col_for_row, u_rows, v_cols = _solve_potentials(cost)
        matched = [(i, int(col_for_row[i])) for i in range(m)]
        reduced = cost - u_rows[:, None] - v_cols[None, :]
    else:
        row_for_col, u_cols, v_rows = _solve_potentials(cost.T)
        matched = [(int(row_for_col[j]), j) for j in range(n)]
        reduced = cost - v_rows[:, None] - u_cols[None, :]

    matched.sort()
    best_total = math.fsum(cost[i, j] for i, j in matched)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    eq = np.abs(reduced) <= tol
    for i, j in matched:
        eq[i, j] = True
    if int(eq.sum()) > k:
        refined = _lex_smallest_pairs(eq, k)
        if refined is not None and math.fsum(cost[i, j] for i, j in refined) == best_total:
            matched = refined
    pred_used = {i for i, _ in matched}
    gt_used = {j for _, j in matched}
    return MatchResult(
        pairs=tuple(matched),
        unmatched_predictions=tuple(i for i in range(m) if i not in pred_used),
        unmatched_ground_truths=tuple(j for j in range(n) if j not in gt_used),
        total_cost=best_total,
    )


def _pow(x: Tensor, exponent: float) -> Tensor:
    # x is strictly positive wherever this is used (post-clamp probabilities).
    if exponent == 0:
        return Tensor(np.ones(x.shape))
    return nm.exp(nm.mul(nm.log(x), exponent))


def focal_loss(probs: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Binary focal loss, mean over all elements.

    targets is a {0,1} array of the same shape. Probabilities are clamped
    to [1e-7, 1 - 1e-7] before the logs.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise nm.DimensionError(f"focal_loss: targets {t.shape} vs probs {probs.shape}")
    p = nm.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    q = nm.sub(Tensor(np.ones(p.shape)), p)
    pos = nm.mul(nm.mul(_pow(q, gamma), nm.log(p)), -alpha)
    neg = nm.mul(nm.mul(_pow(p, gamma), nm.log(q)), -(1.0 - alpha))
    per_elem = nm.add(nm.mul(Tensor(t), pos), nm.mul(Tensor(1.0 - t), neg))
    return nm.mean(per_elem)


def _abs(x: Tensor) -> Tensor:
    return nm.add(nm.relu(x), nm.relu(nm.mul(x, -1.0)))


def l1_box_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute difference over box components (single box or a batch)."""
    target = np.asarray(gt, dtype=np.float64)
    if target.shape != pred.shape:
        raise nm.DimensionError(f"l1_box_loss: {pred.shape} vs {target.shape}")
    return nm.mean(_abs(nm.sub(pred, Tensor(target))))


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def match_against_gt(
    output: HeadOutput,
    cands: CandidateSet,
    gt_boxes,
    bev_cfg: BEVConfig,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> MatchResult:
    """Hungarian assignment of predictions to ground truth.

    Pair cost is a focal-style class cost at the ground-truth class plus the
    mean absolute difference between encoded boxes.
    """
    k, g = cands.k, len(gt_boxes)
    if k == 0 or g == 0:
        return MatchResult((), tuple(range(k)), tuple(range(g)), 0.0)
    probs = np.clip(_sigmoid_np(output.class_logits.data), PROB_FLOOR, 1.0 - PROB_FLOOR)
    cost = np.zeros((k, g))
    encodings = np.zeros((k, g, output.boxes.shape[1]))
    for gi, gt in enumerate(gt_boxes):
        p = probs[:, gt.class_id]
        cls_cost = -alpha * (1.0 - p) ** gamma * np.log(p)
        for ki in range(k):
            encodings[ki, gi] = encode_box_for_cell(gt, cands.cells[ki], bev_cfg)
        box_cost = np.abs(output.boxes.data - encodings[:, gi]).mean(axis=1)
        cost[:, gi] = cls_cost + box_cost
    return hungarian_match(cost)


def head_set_loss(
    output: HeadOutput,
    cands: CandidateSet,
    gt_boxes,
    bev_cfg: BEVConfig,
    weights: LossWeights,
    alpha: float = 0.25,
    gamma: float = 2.0,
):
    """Matched class + box loss for one head pair (used for main and aux).

    Matched predictions take a one-hot class target at their ground truth;
    unmatched ones count as background (all-zero target row). The box term
    averages over matched pairs only.
    Returns (loss tensor, match result).
    """
    match = match_against_gt(output, cands, gt_boxes, bev_cfg, alpha, gamma)
    k, n_cls = output.class_logits.shape
    if k == 0:
        return Tensor(0.0), match
    targets = np.zeros((k, n_cls))
    for ki, gi in match.pairs:
        targets[ki, gt_boxes[gi].class_id] = 1.0
    cls_loss = focal_loss(nm.sigmoid(output.class_logits), targets, alpha, gamma)
    if match.pairs:
        pred_rows = nm.gather_rows(output.boxes, np.array([p for p, _ in match.pairs]))
        gt_rows = np.stack(
            [encode_box_for_cell(gt_boxes[gi], cands.cells[ki], bev_cfg) for ki, gi in match.pairs]
        )
        box_loss = l1_box_loss(pred_rows, gt_rows)
    else:
        box_loss = Tensor(0.0)
    loss = nm.add(nm.mul(cls_loss, weights.lam1), nm.mul(box_loss, weights.lam2))
    return loss, match


def heatmap_target(gt_boxes, bev_cfg: BEVConfig, class_count: int) -> np.ndarray:
    """Gaussian-splatted class heatmap; peak 1.0 at each object's cell.

    The splat radius follows the box footprint (at least one cell), with
    per-cell max combining when splats overlap.
    """
    n = bev_cfg.n
    target = np.zeros((n, n, class_count))
    for box in gt_boxes:
        cell = bev_index(box.center[0], box.center[1], bev_cfg)
        if cell is None:
            continue
        gx, gy = cell
        radius = max(
            1, int(round(min(box.size[0], box.size[1]) / (2.0 * min(bev_cfg.cell_w, bev_cfg.cell_h))))
        )
        sigma = (2.0 * radius + 1.0) / 6.0
        x0, x1 = max(0, gx - radius), min(n - 1, gx + radius)
        y0, y1 = max(0, gy - radius), min(n - 1, gy + radius)
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        dx = (xs - gx)[:, None]
        dy = (ys - gy)[None, :]
        splat = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
        region = target[x0 : x1 + 1, y0 : y1 + 1, box.class_id]
        target[x0 : x1 + 1, y0 : y1 + 1, box.class_id] = np.maximum(region, splat)
    return target


def heatmap_loss(heatmap: Tensor, target: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss against a Gaussian-splatted target.

    Cells at exactly 1.0 are positives; everywhere else the negative term
    is down-weighted by (1 - target)^4. Normalized by the positive count.
    """
    if target.shape != heatmap.shape:
        raise nm.DimensionError(f"heatmap_loss: {heatmap.shape} vs {target.shape}")
    pos_mask = (target == 1.0).astype(np.float64)
    neg_weight = (1.0 - target) ** 4 * (1.0 - pos_mask)
    p = nm.clamp(heatmap, PROB_FLOOR, 1.0 - PROB_FLOOR)
    q = nm.sub(Tensor(np.ones(p.shape)), p)
    pos = nm.mul(nm.mul(nm.mul(q, q), nm.log(p)), -1.0)
    neg = nm.mul(nm.mul(nm.mul(p, p), nm.log(q)), -1.0)
    total = nm.add(
        nm.mul(pos, Tensor(pos_mask)), nm.mul(neg, Tensor(neg_weight))
    )
    denom = max(1.0, float(pos_mask.sum()))
    return nm.mul(nm.sum(total), 1.0 / denom)


def total_loss(
    main: HeadOutput,
    aux: HeadOutput | None,
    cands: CandidateSet,
    heatmap: Tensor,
    gt_boxes,
    bev_cfg: BEVConfig,
    weights: LossWeights,
    depth: Tensor | None = None,
):
    """Weighted sum of heatmap, matched main, auxiliary, and depth terms.

    Returns (scalar loss tensor, dict of float part values). Terms whose
    weight is zero are skipped entirely, so they contribute no gradient.
    """
    parts: dict[str, float] = {}
    pieces: list[Tensor] = []

    if weights.lam_heat > 0:
        h_loss = heatmap_loss(heatmap, heatmap_target(gt_boxes, bev_cfg, heatmap.shape[2]))
        parts["heatmap"] = h_loss.item()
        pieces.append(nm.mul(h_loss, weights.lam_heat))
    if weights.lam_box > 0:
        main_loss, _ = head_set_loss(main, cands, gt_boxes, bev_cfg, weights)
        parts["main"] = main_loss.item()
        pieces.append(nm.mul(main_loss, weights.lam_box))
    if aux is not None:
        aux_loss_t, _ = head_set_loss(aux, cands, gt_boxes, bev_cfg, weights)
        parts["aux"] = aux_loss_t.item()
        pieces.append(aux_loss_t)
    if depth is not None and weights.lam_depth > 0:
        parts["depth"] = depth.item()
        pieces.append(nm.mul(depth, weights.lam_depth))

    if not pieces:
        total = Tensor(0.0)
    else:
        total = pieces[0]
        for piece in pieces[1:]:
            total = nm.add(total, piece)
    parts["total"] = total.item()
    return total, parts


def aux_loss(aux: HeadOutput, cands: CandidateSet, gt_boxes, bev_cfg: BEVConfig, weights: LossWeights) -> Tensor:
    """Auxiliary supervision: matched class/box loss on the auxiliary heads."""
    loss, _ = head_set_loss(aux, cands, gt_boxes, bev_cfg, weights)
    return loss
