"""Moment localization and highlight metrics.

All scores are rank based: predictions are ordered by confidence (ties keep
their original order) and clips by saliency (ties favour the lower index).
"""
from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import Prediction, TemporalSpan, span_iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
METRIC_KEYS = ("r1_at_05", "r1_at_07", "map_at_05", "map_at_075", "map_avg", "hl_map", "hit_at_1")
METRIC_LABELS = {
    "r1_at_05": "R1@0.5", "r1_at_07": "R1@0.7", "map_at_05": "mAP@0.5",
    "map_at_075": "mAP@0.75", "map_avg": "mAP avg", "hl_map": "HL mAP", "hit_at_1": "HIT@1",
}


class EmptyPredictions(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


def rank_predictions(preds: Sequence[Prediction]) -> list[Prediction]:
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    return [preds[i] for i in order]


def recall_at_1(preds: Sequence[Prediction], gt: TemporalSpan, thresh: float) -> int:
    if not preds:
        raise EmptyPredictions("no predictions")
    return int(span_iou(preds[0].span, gt) >= thresh)


def average_precision(preds: Sequence[Prediction], gts: Sequence[TemporalSpan], thresh: float) -> float | None:
    """Un-interpolated AP; ``preds`` must already be ranked. None when there is no GT."""
    if not gts:
        return None
    matched = [False] * len(gts)
    tp = 0
    total = 0.0
    for rank, p in enumerate(preds, 1):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            iou = span_iou(p.span, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= thresh:
            matched[best_j] = True
            tp += 1
            total += tp / rank
    return total / len(gts)


def map_over_thresholds(dataset, thresholds=IOU_THRESHOLDS) -> dict[float, float]:
    """Mean AP per IoU threshold, in percent.

    ``dataset`` is a sequence of (ranked predictions, ground-truth spans).
    Queries without ground truth are skipped.
    """
    if not dataset:
        raise EmptyDataset("no queries to evaluate")
    out = {}
    for t in thresholds:
        aps = [ap for preds, gts in dataset if (ap := average_precision(preds, gts, t)) is not None]
        if not aps:
            raise EmptyDataset("no query has a ground truth")
        out[t] = 100.0 * sum(aps) / len(aps)
    return out


def hit_at_1(saliency: Sequence[float], gt_clip_ids) -> int:
    if len(saliency) == 0:
        raise ValueError("empty saliency vector")
    top = int(np.argmax(np.asarray(saliency)))  # first maximum
    return int(top in set(gt_clip_ids))


def highlight_ap(saliency: Sequence[float], gt_clip_ids) -> float:
    """AP of the clip ranking with ground-truth clips as positives."""
    s = np.asarray(saliency, dtype=float)
    positives = set(int(i) for i in gt_clip_ids if 0 <= i < len(s))
    if not positives:
        return 0.0
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    tp, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if i in positives:
            tp += 1
            total += tp / rank
    return total / len(positives)


def highlight_map(saliencies, gt_clip_ids) -> float:
    if not saliencies:
        raise EmptyDataset("no queries to evaluate")
    return 100.0 * sum(highlight_ap(s, g) for s, g in zip(saliencies, gt_clip_ids)) / len(saliencies)


@dataclass
class MetricsReport:
    r1_at_05: float
    r1_at_07: float
    map_at_05: float
    map_at_075: float
    map_avg: float
    hl_map: float
    hit_at_1: float
    std: dict = field(default_factory=dict)
    num_queries: int = 0
    num_seeds: int = 1

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def evaluate_predictions(items) -> tuple[MetricsReport, list[dict]]:
    """Full report from per-query results.

    Each item is a dict with ``qid``, ranked ``preds`` (list of Prediction),
    ``gts`` (list of TemporalSpan), ``saliency`` and ``gt_clip_ids``.
    Returns the report and a per-query breakdown.
    """
    if not items:
        raise EmptyDataset("no queries to evaluate")
    r5 = r7 = 0
    hits = 0
    per_query = []
    for it in items:
        preds, gts = it["preds"], it["gts"]
        r5 += recall_at_1(preds, gts[0], 0.5)
        r7 += recall_at_1(preds, gts[0], 0.7)
        hits += hit_at_1(it["saliency"], it["gt_clip_ids"])
        aps = {t: average_precision(preds, gts, t) for t in IOU_THRESHOLDS}
        per_query.append({
            "qid": it["qid"],
            "ap": {f"{t:.2f}": aps[t] for t in IOU_THRESHOLDS},
            "top1": preds[0].span.as_list(),
            "top1_iou": span_iou(preds[0].span, gts[0]),
            "hl_ap": highlight_ap(it["saliency"], it["gt_clip_ids"]),
        })
    n = len(items)
    maps = map_over_thresholds([(it["preds"], it["gts"]) for it in items])
    report = MetricsReport(
        r1_at_05=100.0 * r5 / n,
        r1_at_07=100.0 * r7 / n,
        map_at_05=maps[0.5],
        map_at_075=maps[0.75],
        map_avg=sum(maps.values()) / len(maps),
        hl_map=highlight_map([it["saliency"] for it in items], [it["gt_clip_ids"] for it in items]),
        hit_at_1=100.0 * hits / n,
        num_queries=n,
    )
    return report, per_query


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean and sample std (0 for a single run) of each metric across runs."""
    if not reports:
        raise EmptyDataset("no reports to aggregate")
    means, stds = {}, {}
    for k in METRIC_KEYS:
        vals = [getattr(r, k) for r in reports]
        means[k] = statistics.fmean(vals)
        stds[k] = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return MetricsReport(**means, std=stds, num_queries=reports[0].num_queries, num_seeds=len(reports))


def format_table(rows: Sequence[tuple[str, MetricsReport]], title: str = "") -> str:
    """Plain-text table with one mean±std cell per metric."""
    head = ["setting"] + [METRIC_LABELS[k] for k in METRIC_KEYS]
    body = []
    for name, rep in rows:
        cells = [name]
        for k in METRIC_KEYS:
            cells.append(f"{getattr(rep, k):.1f}±{rep.std.get(k, 0.0):.2f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths))
    out = [title] if title else []
    out += [line(head), "  ".join("-" * w for w in widths)] + [line(r) for r in body]
    return "\n".join(out)


def write_eval_report(path, report: MetricsReport, per_query: list[dict]) -> None:
    with open(path, "w") as f:
        json.dump({"metrics": report.to_json(), "per_query": per_query}, f, indent=2, sort_keys=True)
        f.write("\n")
