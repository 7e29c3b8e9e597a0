"""Reference implementations used only by tests.

Each one takes a different route from the library code: interval merging
instead of min/max formulas, exhaustive permutations instead of augmenting
paths, prefix re-evaluation instead of a single ranked walk, and a plain
numpy transformer instead of the torch modules.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------- geometry


def merged_length(intervals):
    total, cur_s, cur_e = 0.0, None, None
    for s, e in sorted(intervals):
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


def iou(a, b):
    union = merged_length([a, b])
    inter = (a[1] - a[0]) + (b[1] - b[0]) - union
    return inter / union


def giou(a, b):
    union = merged_length([a, b])
    inter = (a[1] - a[0]) + (b[1] - b[0]) - union
    hull = merged_length([(min(a[0], b[0]), max(a[1], b[1]))])
    gap = hull - union
    return inter / union - gap / hull


# ---------------------------------------------------------------- assignment


def brute_force_assignment(cost):
    """Minimum cost over all injective maps, lexicographically smallest pair list on ties."""
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    best, best_pairs = math.inf, None
    if n >= m:
        for rows in itertools.permutations(range(n), m):
            pairs = sorted(zip(rows, range(m)))
            c = sum(cost[i, j] for i, j in pairs)
            if c < best or (c == best and pairs < best_pairs):
                best, best_pairs = c, pairs
    else:
        for cols in itertools.permutations(range(m), n):
            pairs = list(zip(range(n), cols))
            c = sum(cost[i, j] for i, j in pairs)
            if c < best or (c == best and pairs < best_pairs):
                best, best_pairs = c, pairs
    return best, best_pairs


# ---------------------------------------------------------------- metrics


def top1(preds):
    """preds: list of (span, confidence) in original order; ties keep the earliest."""
    best = 0
    for i, (_, c) in enumerate(preds):
        if c > preds[best][1]:
            best = i
    return preds[best][0]


def ranked(preds):
    return sorted(preds, key=lambda pc: -pc[1])  # stable: ties keep input order


def _true_positives(prefix, gts, thresh):
    matched = set()
    tp = 0
    for span, _ in prefix:
        cands = [(iou(span, g), -j, j) for j, g in enumerate(gts) if j not in matched]
        if not cands:
            continue
        v, _, j = max(cands)
        if v >= thresh:
            matched.add(j)
            tp += 1
    return tp


def average_precision(preds, gts, thresh):
    """AP by re-evaluating every rank prefix from scratch."""
    r = ranked(preds)
    ap, prev = 0.0, 0
    for k in range(1, len(r) + 1):
        tp = _true_positives(r[:k], gts, thresh)
        if tp > prev:
            ap += tp / k
        prev = tp
    return ap / len(gts)


def hit_at_1(scores, gt_ids):
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return int(best in set(gt_ids))


def highlight_ap(scores, gt_ids):
    pos = sorted(set(gt_ids))
    n = len(scores)

    def rank(i):
        return 1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))

    total = 0.0
    for i in pos:
        ri = rank(i)
        above = sum(1 for p in pos if rank(p) <= ri)
        total += above / ri
    return total / len(pos)


# ---------------------------------------------------------------- model


def _layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _linear(x, sd, name):
    return x @ sd[f"{name}.weight"].T + sd[f"{name}.bias"]


def _attention(q, k, v, sd, name, heads):
    d = q.shape[-1]
    dh = d // heads
    Q, K, V = _linear(q, sd, f"{name}.q_proj"), _linear(k, sd, f"{name}.k_proj"), _linear(v, sd, f"{name}.v_proj")
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = Q[:, sl] @ K[:, sl].T / math.sqrt(dh)
        s = s - s.max(-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(-1, keepdims=True)
        outs.append(p @ V[:, sl])
    return _linear(np.concatenate(outs, -1), sd, f"{name}.out_proj")


def _positions(n, d, use):
    if not use:
        return np.zeros((n, d))
    pe = np.zeros((n, d))
    for k in range(n):
        t = 2 * math.pi * (k + 0.5) / n
        for i in range(d):
            ang = t / 10000 ** (2 * (i // 2) / d)
            pe[k, i] = math.sin(ang) if i % 2 == 0 else math.cos(ang)
    return pe


def _project(x, sd, name):
    h = _linear(_layer_norm(x, sd[f"{name}.0.norm.weight"], sd[f"{name}.0.norm.bias"]), sd, f"{name}.0.linear")
    h = np.maximum(h, 0)
    return _linear(_layer_norm(h, sd[f"{name}.1.norm.weight"], sd[f"{name}.1.norm.bias"]), sd, f"{name}.1.linear")


def numpy_forward(model, traj, query):
    """Eval-mode forward for one pair, written out with numpy loops."""
    cfg = model.config
    sd = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    d, H = cfg.hidden_d, cfg.attn_heads
    ln = lambda x, n: _layer_norm(x, sd[f"{n}.weight"], sd[f"{n}.bias"])
    lc = traj.shape[0]
    x = np.concatenate([_project(traj, sd, "traj_proj"), _project(query, sd, "query_proj")])
    pos = np.concatenate([_positions(lc, d, cfg.use_positional), _positions(query.shape[0], d, cfg.use_positional)])
    for l in range(cfg.enc_layers):
        p = f"encoder.{l}"
        inp = x + pos
        x = ln(x + _attention(inp, inp, inp, sd, f"{p}.self_attn", H), f"{p}.norm1")
        ff = _linear(np.maximum(_linear(x, sd, f"{p}.ffn.linear1"), 0), sd, f"{p}.ffn.linear2")
        x = ln(x + ff, f"{p}.norm2")
    mem = x
    qpos = sd["query_embed"]
    t = np.zeros_like(qpos)
    for l in range(cfg.dec_layers):
        p = f"decoder.{l}"
        inp = t + qpos
        t = ln(t + _attention(inp, inp, inp, sd, f"{p}.self_attn", H), f"{p}.norm1")
        mp = mem + pos
        t = ln(t + _attention(t + qpos, mp, mp, sd, f"{p}.cross_attn", H), f"{p}.norm2")
        ff = _linear(np.maximum(_linear(t, sd, f"{p}.ffn.linear1"), 0), sd, f"{p}.ffn.linear2")
        t = ln(t + ff, f"{p}.norm3")
    hs = ln(t, "decoder_norm")
    h = np.maximum(_linear(hs, sd, "span_head.layers.0"), 0)
    h = np.maximum(_linear(h, sd, "span_head.layers.1"), 0)
    spans = 1 / (1 + np.exp(-_linear(h, sd, "span_head.layers.2")))
    logits = _linear(hs, sd, "class_head")
    e = np.exp(logits - logits.max(-1, keepdims=True))
    probs = e / e.sum(-1, keepdims=True)
    sal = _linear(mem[:lc], sd, "saliency_head")[:, 0]
    return spans, probs, sal


# ---------------------------------------------------------------- loss


def reference_total_loss(spans, probs, saliency, targets, pairs_per_item, weights, contrastive):
    """Composite loss for numpy inputs; matching by brute force.

    spans/probs: (B, N, 2); saliency: list of per-item clip score arrays;
    pairs_per_item: the (pos, neg) clip pairs drawn for each item.
    """
    B = len(spans)
    l1s, gious, cls, hinge, con = [], [], [], [], []
    for b in range(B):
        gt = np.asarray(targets[b]["spans"])
        sp, pr = np.asarray(spans[b]), np.asarray(probs[b])
        xx = lambda cw: (cw[0] - cw[1] / 2, cw[0] + cw[1] / 2)
        cost = np.array([[-pr[i, 0] + weights.lambda_l1 * np.abs(sp[i] - gt[j]).sum()
                          + weights.lambda_iou * (1 - giou(xx(sp[i]), xx(gt[j])))
                          for j in range(len(gt))] for i in range(len(sp))])
        _, pairs = brute_force_assignment(cost)
        matched = {i for i, _ in pairs}
        for i, j in pairs:
            l1s.append(np.abs(sp[i] - gt[j]).sum())
            gious.append(1 - giou(xx(sp[i]), xx(gt[j])))
        ce = 0.0
        for i in range(len(sp)):
            if i in matched:
                ce += -math.log(pr[i, 0])
            else:
                ce += -weights.background_weight * math.log(pr[i, 1])
        cls.append(ce)
        s = np.asarray(saliency[b])
        for p, n in pairs_per_item[b]:
            hinge.append(max(0.0, weights.margin_delta + s[n] - s[p]))
        if contrastive:
            ids = sorted({c for ids in targets[b]["clip_ids"] for c in ids})
            z = s / weights.temperature
            con.append(-math.log(np.exp(z[ids]).sum() / np.exp(z).sum()))
    parts = {
        "span_l1": weights.lambda_l1 * float(np.mean(l1s)),
        "span_giou": weights.lambda_iou * float(np.mean(gious)),
        "cls": weights.lambda_cls * float(np.mean(cls)),
        "saliency": weights.lambda_saliency * (float(np.mean(hinge)) if hinge else 0.0),
        "contrastive": weights.lambda_contrastive * float(np.mean(con)) if contrastive else 0.0,
    }
    return sum(parts.values()), parts


# ---------------------------------------------------------------- fixtures


def random_detection_fixture(rng, max_preds=10, max_gts=3, duration=20):
    """Predictions and GTs on a coarse grid so IoU and confidence ties occur."""
    def span():
        s = int(rng.integers(0, duration - 1))
        return (float(s), float(rng.integers(s + 1, duration + 1)))
    preds = [(span(), float(rng.integers(0, 5)) / 4) for _ in range(int(rng.integers(1, max_preds + 1)))]
    gts = [span() for _ in range(int(rng.integers(1, max_gts + 1)))]
    return preds, gts


def random_saliency_fixture(rng, max_clips=12):
    n = int(rng.integers(1, max_clips + 1))
    scores = [float(x) for x in rng.integers(0, 4, n)]
    k = int(rng.integers(1, n + 1))
    start = int(rng.integers(0, n - k + 1))
    return scores, list(range(start, start + k))
