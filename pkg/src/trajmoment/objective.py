"""Optimal prediction/ground-truth assignment and the composite training loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import TemporalSpan, span_giou


class NoMatches(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 10.0
    lambda_iou: float = 1.0
    lambda_cls: float = 4.0
    lambda_saliency: float = 1.0
    margin_delta: float = 0.2
    lambda_contrastive: float = 0.3
    background_weight: float = 0.1
    temperature: float = 0.5

    def __post_init__(self):
        for f, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{f} must be non-negative")
        if self.temperature == 0:
            raise ValueError("temperature must be positive")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.lambda_l1 * k, self.lambda_iou * k, self.lambda_cls * k,
                           self.lambda_saliency * k, self.margin_delta, self.lambda_contrastive * k,
                           self.background_weight, self.temperature)


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched: list[int] = field(default_factory=list)

    def cost(self, matrix) -> float:
        return float(sum(matrix[i][j] for i, j in self.pairs))


# ---------------------------------------------------------------------------
# span helpers on normalized (center, width) tensors


def cw_to_xx(cw: torch.Tensor) -> torch.Tensor:
    c, w = cw[..., 0], cw[..., 1]
    return torch.stack([c - w / 2, c + w / 2], dim=-1)


def giou_pairwise(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """gIoU of every span in ``a`` (n, 2) against every span in ``b`` (m, 2), [start, end]."""
    a, b = a[:, None, :], b[None, :, :]
    inter = (torch.minimum(a[..., 1], b[..., 1]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    hull = torch.maximum(a[..., 1], b[..., 1]) - torch.minimum(a[..., 0], b[..., 0])
    return inter / union - (hull - union) / hull


def giou_paired(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter = (torch.minimum(a[:, 1], b[:, 1]) - torch.maximum(a[:, 0], b[:, 0])).clamp(min=0)
    union = (a[:, 1] - a[:, 0]) + (b[:, 1] - b[:, 0]) - inter
    hull = torch.maximum(a[:, 1], b[:, 1]) - torch.minimum(a[:, 0], b[:, 0])
    return inter / union - (hull - union) / hull


def matching_cost(pred_cw, fg_prob: float, gt_cw, weights: LossWeights = LossWeights()) -> float:
    """Cost of assigning one prediction to one ground truth (normalized units)."""
    (pc, pw), (gc, gw) = pred_cw, gt_cw
    l1 = abs(pc - gc) + abs(pw - gw)
    # gIoU is scale and shift invariant, so shift both into positive time
    off = 1.0 + max(pw, gw)
    g = span_giou(TemporalSpan(pc - pw / 2 + off, pc + pw / 2 + off),
                  TemporalSpan(gc - gw / 2 + off, gc + gw / 2 + off))
    return -fg_prob + weights.lambda_l1 * l1 + weights.lambda_iou * (1 - g)


def cost_matrix(pred_cw: torch.Tensor, fg_prob: torch.Tensor, gt_cw: torch.Tensor,
                weights: LossWeights) -> np.ndarray:
    with torch.no_grad():
        l1 = torch.cdist(pred_cw, gt_cw, p=1)
        g = giou_pairwise(cw_to_xx(pred_cw), cw_to_xx(gt_cw))
        c = -fg_prob[:, None] + weights.lambda_l1 * l1 + weights.lambda_iou * (1 - g)
    return c.double().numpy()


# ---------------------------------------------------------------------------
# assignment


def _solve(cost: np.ndarray) -> list[tuple[int, int]]:
    """Shortest augmenting path assignment; returns min(n, m) pairs."""
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    transposed = n > m
    a = cost.T if transposed else cost
    n, m = a.shape
    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)     # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = inf, 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(j, i) for i, j in pairs]
    return sorted(pairs)


def _pairs_cost(cost, pairs):
    return sum(cost[i, j] for i, j in pairs)


def hungarian_match(cost) -> Assignment:
    """Minimum-cost assignment of rows (predictions) to columns (ground truths).

    Among optimal assignments the lexicographically smallest sorted pair list
    is returned, so results do not depend on solver internals.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    n, m = cost.shape
    k = min(n, m)
    best = _solve(cost)
    opt = _pairs_cost(cost, best)
    tol = 1e-12 * (1.0 + np.abs(cost).sum())

    pairs: list[tuple[int, int]] = []
    used_cols: set[int] = set()
    acc = 0.0
    last = -1
    for step in range(k):
        need = k - step - 1
        chosen = None
        for i in range(last + 1, n):
            rows = list(range(i + 1, n))
            for j in range(m):
                if j in used_cols:
                    continue
                cols = [c for c in range(m) if c not in used_cols and c != j]
                if min(len(rows), len(cols)) != need:
                    continue
                rest = 0.0
                if need:
                    sub = cost[np.ix_(rows, cols)]
                    rest = _pairs_cost(sub, _solve(sub))
                if acc + cost[i, j] + rest <= opt + tol:
                    chosen = (i, j)
                    break
            if chosen:
                break
        if chosen is None:
            # only reachable through rounding noise; keep the solver's answer
            pairs = best
            break
        pairs.append(chosen)
        used_cols.add(chosen[1])
        acc += cost[chosen]
        last = chosen[0]
    matched = {i for i, _ in pairs}
    return Assignment(pairs, [i for i in range(n) if i not in matched])


# ---------------------------------------------------------------------------
# losses; every function works on one query unless noted


def loss_span(pred_cw: torch.Tensor, gt_cw: torch.Tensor, weights: LossWeights = LossWeights(),
              parts: bool = False):
    """Mean over matched pairs of weighted L1 (center, width) plus weighted (1 - gIoU).

    ``pred_cw`` and ``gt_cw`` are (P, 2) rows already aligned by the assignment.
    """
    if pred_cw.shape[0] == 0:
        raise NoMatches("span loss needs at least one matched pair")
    l1 = (pred_cw - gt_cw).abs().sum(-1).mean()
    g = (1 - giou_paired(cw_to_xx(pred_cw), cw_to_xx(gt_cw))).mean()
    l1, g = weights.lambda_l1 * l1, weights.lambda_iou * g
    return (l1, g) if parts else l1 + g


def loss_class(logits: torch.Tensor, assignment: Assignment, weights: LossWeights = LossWeights(),
               log_probs: bool = False) -> torch.Tensor:
    """Weighted cross-entropy: matched rows are foreground (0), the rest background (1)."""
    logp = logits if log_probs else logits.log_softmax(-1)
    n = logp.shape[0]
    target = torch.ones(n, dtype=torch.long)
    w = torch.full((n,), weights.background_weight, dtype=logp.dtype)
    for i, _ in assignment.pairs:
        target[i] = 0
        w[i] = 1.0
    nll = -logp.gather(1, target[:, None]).squeeze(1)
    return (w * nll).sum()


def sample_saliency_pairs(moment_clip_ids, num_clips: int, generator: torch.Generator | None = None):
    """One random (positive, negative) clip pair per ground-truth moment."""
    inside = {c for ids in moment_clip_ids for c in ids}
    negatives = [c for c in range(num_clips) if c not in inside]
    pairs = []
    if not negatives:
        return pairs
    for ids in moment_clip_ids:
        ids = [c for c in ids if c < num_clips]
        if not ids:
            continue
        pi = int(torch.randint(len(ids), (1,), generator=generator))
        ni = int(torch.randint(len(negatives), (1,), generator=generator))
        pairs.append((ids[pi], negatives[ni]))
    return pairs


def loss_saliency(saliency: torch.Tensor, pairs, margin: float = 0.2) -> torch.Tensor:
    """Mean hinge max(0, margin + s_neg - s_pos) over (positive, negative) clip pairs."""
    if not pairs:
        return saliency.sum() * 0
    pos = torch.tensor([p for p, _ in pairs])
    neg = torch.tensor([q for _, q in pairs])
    return (margin + saliency[neg] - saliency[pos]).clamp(min=0).mean()


def loss_contrastive(saliency: torch.Tensor, gt_clip_ids, temperature: float = 0.5) -> torch.Tensor:
    """-log of the softmax mass (at ``temperature``) that lands on ground-truth clips."""
    ids = sorted(set(gt_clip_ids))
    if not ids:
        return saliency.sum() * 0
    z = saliency / temperature
    return torch.logsumexp(z, 0) - torch.logsumexp(z[ids], 0)


COMPONENTS = ("span_l1", "span_giou", "cls", "saliency", "contrastive")


def total_loss(output: dict, targets: list[dict], weights: LossWeights = LossWeights(),
               enable_contrastive: bool = False, generator: torch.Generator | None = None,
               traj_mask: torch.Tensor | None = None):
    """Batched composite loss.

    ``output`` is the model's batched dict; each target holds ``spans``
    (M, 2) normalized center/width and ``clip_ids`` (one list per moment).
    Matching is recomputed from the current predictions on every call.
    Returns the weighted total and a dict of weighted components.
    """
    spans, logits, probs, sal = output["spans"], output["logits"], output["probs"], output["saliency"]
    B = spans.shape[0]
    if traj_mask is None:
        traj_mask = torch.ones(sal.shape, dtype=torch.bool)
    matched_pred, matched_gt = [], []
    cls_terms, sal_terms, con_terms = [], [], []
    sal_pairs = 0
    logp = logits.log_softmax(-1)
    for b in range(B):
        gt = targets[b]["spans"].to(spans.dtype)
        if gt.shape[0] == 0:
            raise NoMatches(f"batch item {b} has no ground truth")
        cost = cost_matrix(spans[b], probs[b, :, 0], gt, weights)
        assign = hungarian_match(cost)
        idx_p = torch.tensor([i for i, _ in assign.pairs])
        idx_g = torch.tensor([j for _, j in assign.pairs])
        matched_pred.append(spans[b, idx_p])
        matched_gt.append(gt[idx_g])
        cls_terms.append(loss_class(logp[b], assign, weights, log_probs=True))

        n_clips = int(traj_mask[b].sum())
        s = sal[b, :n_clips]
        moments = targets[b]["clip_ids"]
        pairs = sample_saliency_pairs(moments, n_clips, generator)
        if pairs:
            sal_terms.append(loss_saliency(s, pairs, weights.margin_delta) * len(pairs))
            sal_pairs += len(pairs)
        if enable_contrastive:
            con_terms.append(loss_contrastive(s, [c for ids in moments for c in ids], weights.temperature))

    l1, g = loss_span(torch.cat(matched_pred), torch.cat(matched_gt), weights, parts=True)
    zero = spans.sum() * 0
    parts = {
        "span_l1": l1,
        "span_giou": g,
        "cls": weights.lambda_cls * torch.stack(cls_terms).mean(),
        "saliency": weights.lambda_saliency * (torch.stack(sal_terms).sum() / sal_pairs if sal_pairs else zero),
        "contrastive": (weights.lambda_contrastive * torch.stack(con_terms).mean()
                        if enable_contrastive else zero),
    }
    return sum(parts.values()), parts
