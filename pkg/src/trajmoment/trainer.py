"""Training loop, evaluation and the two ablation drivers."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .convert import QueryRecord, TrajectoryRecord, load_queries, load_trajectories
from .core import Prediction, span_from_center_width
from .features import FeatureStore, MissingActionFeatures
from .metrics import METRIC_KEYS, MetricsReport, aggregate, evaluate_predictions, format_table
from .model import ModelConfig, MomentLocalizer, init_params
from .objective import COMPONENTS, LossWeights, total_loss

log = logging.getLogger(__name__)


class DataFeatureMismatch(ValueError):
    pass


class PercentageTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 256
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = 0.1
    seed: int = 0
    eval_every: int = 1
    feature_mode: str = "video_plus_actions"
    contrastive: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.lr < 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("lr must be >= 0, epochs and batch_size positive")


# model/train settings for the two run scales; "paper" is the published setup
PROFILES = {
    "paper": {
        "model": ModelConfig(),
        "train": TrainConfig(),
    },
    "desk": {
        "model": ModelConfig(hidden_d=64, enc_layers=2, dec_layers=2, num_queries=10, attn_heads=4,
                             ffn_dim=128, dropout_transformer=0.0, dropout_projection=0.0,
                             traj_feat_dim=48, query_feat_dim=24),
        "train": TrainConfig(lr=1e-3, weight_decay=1e-4, epochs=100, batch_size=16, grad_clip_norm=0.1,
                             eval_every=10),
    },
}

# published reference numbers (mean, std) on the full ALFRED-derived data
PAPER_TABLE2 = {
    "video_only": {"r1_at_05": (83.6, 0.47), "r1_at_07": (64.2, 0.77), "map_at_05": (89.4, 0.29),
                   "map_at_075": (68.8, 0.72), "map_avg": (65.5, 0.21), "hl_map": (82.6, 0.58),
                   "hit_at_1": (73.7, 1.00)},
    "video_plus_actions": {"r1_at_05": (84.8, 0.39), "r1_at_07": (65.6, 0.59), "map_at_05": (90.6, 0.34),
                           "map_at_075": (70.3, 0.46), "map_avg": (66.7, 0.19), "hl_map": (85.3, 0.33),
                           "hit_at_1": (77.6, 0.73)},
    "video_plus_actions+contrastive": {"r1_at_05": (85.1, 0.48), "r1_at_07": (65.8, 0.74),
                                       "map_at_05": (90.9, 0.31), "map_at_075": (70.4, 0.48),
                                       "map_avg": (66.7, 0.22), "hl_map": (85.5, 0.63),
                                       "hit_at_1": (78.2, 1.30)},
}
PAPER_TABLE3 = {
    # percentage: (train trajectories, R1@0.5, R1@0.7, mAP@0.5, mAP@0.75, mAP avg, HL mAP, HIT@1)
    100: (6561, 85.1, 65.8, 90.9, 70.4, 66.7, 85.5, 78.2),
    50: (3280, 81.8, 62.9, 88.6, 68.3, 64.6, 82.2, 72.3),
    25: (1640, 76.6, 58.5, 84.6, 64.5, 61.2, 77.9, 65.1),
    20: (1312, 73.9, 55.3, 82.4, 61.7, 59.0, 75.6, 62.1),
    15: (984, 71.4, 53.8, 80.6, 60.8, 57.5, 73.0, 58.9),
    10: (656, 66.7, 50.0, 76.6, 57.4, 54.1, 70.5, 55.4),
    5: (328, 57.7, 42.1, 68.6, 49.6, 47.0, 65.5, 50.7),
    3: (197, 47.8, 33.5, 59.1, 40.1, 38.2, 61.4, 45.9),
    2: (131, 40.7, 26.1, 51.8, 30.7, 30.6, 58.5, 42.8),
}

ABLATION_MODES = ("video_only", "video_plus_actions", "video_plus_actions+contrastive")


# ---------------------------------------------------------------------------
# data


@dataclass
class Example:
    qid: str
    vid: str
    duration: float
    traj: np.ndarray
    query: np.ndarray
    gt_cw: np.ndarray          # (M, 2) normalized center, width
    clip_ids: list[list[int]]  # clip ids per ground-truth moment
    record: QueryRecord = field(repr=False)


@dataclass
class DataSplits:
    train: list[QueryRecord]
    val: list[QueryRecord]
    test: list[QueryRecord]
    store: FeatureStore
    trajectories: list[TrajectoryRecord] = field(default_factory=list)

    @classmethod
    def from_synth(cls, ds):
        return cls(ds.splits["train"], ds.splits["val"], ds.splits["test"], ds.features, ds.trajectories)

    @classmethod
    def load(cls, data_dir, seed: int = 0, features_root=None):
        """Read ``train/val/test.jsonl``; a lone ``dataset.jsonl`` is split 90/10 by trajectory."""
        root = Path(data_dir)
        store = FeatureStore(features_root or root / "features")
        trajs = load_trajectories(root / "trajectories.jsonl") if (root / "trajectories.jsonl").exists() else []
        if (root / "train.jsonl").exists():
            train = load_queries(root / "train.jsonl")
            val = load_queries(root / "val.jsonl") if (root / "val.jsonl").exists() else []
            test = load_queries(root / "test.jsonl") if (root / "test.jsonl").exists() else []
        else:
            allq = load_queries(root / "dataset.jsonl")
            vids = sorted({q.vid for q in allq})
            perm = np.random.default_rng(seed).permutation(len(vids))
            n_val = max(1, round(0.1 * len(vids))) if len(vids) > 1 else 0
            val_vids = {vids[i] for i in perm[:n_val]}
            train = [q for q in allq if q.vid not in val_vids]
            val = [q for q in allq if q.vid in val_vids]
            test = []
        return cls(train, val, test, store, trajs)

    @property
    def eval_split(self):
        return self.test or self.val


def build_examples(queries: Sequence[QueryRecord], store: FeatureStore, mode: str) -> list[Example]:
    out = []
    for q in queries:
        try:
            traj = store.trajectory(q.vid, mode)
            query = store.get_query(q.qid)
        except FileNotFoundError as e:
            raise DataFeatureMismatch(str(e)) from e
        n_clips = math.ceil(q.duration / 2 - 1e-9)
        if traj.shape[0] != n_clips:
            raise DataFeatureMismatch(f"{q.vid}: {traj.shape[0]} feature rows for {n_clips} clips")
        gt = np.array([[(w.start + w.end) / 2 / q.duration, w.length / q.duration]
                       for w in q.relevant_windows])
        ids = [[c for c in q.relevant_clip_ids if w.start < min(2 * c + 2, q.duration) and 2 * c < w.end]
               for w in q.relevant_windows]
        out.append(Example(q.qid, q.vid, q.duration, traj, query, gt, ids, q))
    return out


def collate(batch: Sequence[Example], dtype=torch.float32):
    B = len(batch)
    lc = max(e.traj.shape[0] for e in batch)
    lq = max(e.query.shape[0] for e in batch)
    traj = torch.zeros(B, lc, batch[0].traj.shape[1], dtype=dtype)
    query = torch.zeros(B, lq, batch[0].query.shape[1], dtype=dtype)
    tmask = torch.zeros(B, lc, dtype=torch.bool)
    qmask = torch.zeros(B, lq, dtype=torch.bool)
    targets = []
    for i, e in enumerate(batch):
        traj[i, :e.traj.shape[0]] = torch.from_numpy(np.asarray(e.traj, dtype=np.float64)).to(dtype)
        query[i, :e.query.shape[0]] = torch.from_numpy(np.asarray(e.query, dtype=np.float64)).to(dtype)
        tmask[i, :e.traj.shape[0]] = True
        qmask[i, :e.query.shape[0]] = True
        targets.append({"spans": torch.from_numpy(e.gt_cw).to(dtype), "clip_ids": e.clip_ids})
    return traj, query, tmask, qmask, targets


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_map_avg: float = float("-inf")

    def write_jsonl(self, path):
        with open(path, "w") as f:
            for rec in self.epochs:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def evaluate_examples(model: MomentLocalizer, examples: Sequence[Example], batch_size: int = 256):
    """Metrics report and per-query breakdown; dropout off, deterministic."""
    model.eval()
    dtype = next(model.parameters()).dtype
    items = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = examples[start:start + batch_size]
            traj, query, tmask, qmask, _ = collate(batch, dtype)
            out = model(traj, query, tmask, qmask)
            for i, e in enumerate(batch):
                items.append(_to_item(e, out["spans"][i].double().numpy(), out["probs"][i, :, 0].double().numpy(),
                                      out["saliency"][i, :e.traj.shape[0]].double().numpy()))
    return evaluate_predictions(items)


def _to_item(e: Example, spans_cw, fg, saliency):
    preds = [Prediction(span_from_center_width(float(c), float(max(w, 1e-9)), e.duration),
                        float(min(max(p, 0.0), 1.0)))
             for (c, w), p in zip(spans_cw, fg)]
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    return {
        "qid": e.qid,
        "preds": [preds[i] for i in order],
        "gts": list(e.record.relevant_windows),
        "saliency": saliency,
        "gt_clip_ids": e.record.relevant_clip_ids,
    }


def train(train_examples: Sequence[Example], val_examples: Sequence[Example], model_config: ModelConfig,
          train_config: TrainConfig, weights: LossWeights = LossWeights(), dtype=torch.float32,
          log_path=None) -> tuple[MomentLocalizer, TrainLog]:
    """Optimize a fresh model; returns the best-on-validation parameters and the log.

    Batch order, dropout and saliency pair sampling are all fixed by
    ``train_config.seed``.
    """
    if not train_examples:
        raise DataFeatureMismatch("no training examples")
    d_traj = train_examples[0].traj.shape[1]
    if d_traj != model_config.traj_feat_dim or train_examples[0].query.shape[1] != model_config.query_feat_dim:
        raise DataFeatureMismatch(
            f"features ({d_traj}, {train_examples[0].query.shape[1]}) do not match model "
            f"({model_config.traj_feat_dim}, {model_config.query_feat_dim})")
    tc = train_config
    torch.manual_seed(tc.seed)
    model = init_params(model_config, tc.seed).to(dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, betas=tc.betas, eps=tc.eps,
                            weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    pair_gen = torch.Generator().manual_seed(tc.seed + 1)
    log_ = TrainLog()
    best_state = copy.deepcopy(model.state_dict())
    eval_on = val_examples or train_examples
    for epoch in range(1, tc.epochs + 1):
        model.train()
        sums = dict.fromkeys(COMPONENTS, 0.0)
        total_sum, n_batches = 0.0, 0
        order = rng.permutation(len(train_examples))
        for start in range(0, len(order), tc.batch_size):
            batch = [train_examples[i] for i in order[start:start + tc.batch_size]]
            traj, query, tmask, qmask, targets = collate(batch, dtype)
            out = model(traj, query, tmask, qmask)
            loss, parts = total_loss(out, targets, weights, tc.contrastive, pair_gen, tmask)
            opt.zero_grad()
            loss.backward()
            if tc.grad_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip_norm)
            opt.step()
            for p in model.parameters():
                if not torch.isfinite(p).all():
                    raise FloatingPointError(f"non-finite parameter after epoch {epoch} step {n_batches}")
            total_sum += float(loss.detach())
            for k in COMPONENTS:
                sums[k] += float(parts[k].detach())
            n_batches += 1
        rec = {"epoch": epoch, "loss": total_sum / n_batches,
               **{f"loss_{k}": v / n_batches for k, v in sums.items()}}
        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            report, _ = evaluate_examples(model, eval_on, tc.eval_batch_size)
            rec["val"] = report.values()
            if report.map_avg > log_.best_map_avg:
                log_.best_map_avg = report.map_avg
                log_.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
        log_.epochs.append(rec)
        log.info("epoch %d loss %.4f", epoch, rec["loss"])
    model.load_state_dict(best_state)
    model.eval()
    if log_path is not None:
        log_.write_jsonl(log_path)
    return model, log_


def _configs_for(data: DataSplits, mode: str, model_config: ModelConfig):
    ex = build_examples(data.train[:1], data.store, mode)
    return ModelConfig.from_dict({**asdict(model_config), "traj_feat_dim": ex[0].traj.shape[1],
                                  "query_feat_dim": ex[0].query.shape[1]})


def run_once(data: DataSplits, model_config: ModelConfig, train_config: TrainConfig,
             weights: LossWeights = LossWeights(), train_queries=None):
    """Train on ``train_queries`` (default: all) and report on the evaluation split."""
    mode = train_config.feature_mode
    mc = _configs_for(data, mode, model_config)
    tr = build_examples(train_queries if train_queries is not None else data.train, data.store, mode)
    va = build_examples(data.val, data.store, mode)
    te = build_examples(data.eval_split, data.store, mode)
    model, tlog = train(tr, va, mc, train_config, weights)
    report, per_query = evaluate_examples(model, te, train_config.eval_batch_size)
    return report, model, tlog


# ---------------------------------------------------------------------------
# ablations


def _mode_settings(name: str) -> tuple[str, bool]:
    if name.endswith("+contrastive"):
        return name[: -len("+contrastive")], True
    return name, False


def ablate_features(data: DataSplits, model_config: ModelConfig, train_config: TrainConfig,
                    seeds: Sequence[int], modes: Sequence[str] = ABLATION_MODES,
                    weights: LossWeights = LossWeights()) -> dict:
    """One row per trajectory definition, mean±std over ``seeds``."""
    rows = {}
    for name in modes:
        mode, contrastive = _mode_settings(name)
        if mode == "video_plus_actions":
            data.store.get_actions(data.train[0].vid)  # raises MissingActionFeatures
        runs = []
        for s in seeds:
            tc = TrainConfig(**{**asdict(train_config), "seed": s, "feature_mode": mode,
                                "contrastive": contrastive})
            report, _, _ = run_once(data, model_config, tc, weights)
            runs.append(report)
        rows[name] = {"mean_std": aggregate(runs), "runs": runs}
    return rows


def nested_subsets(vids: Sequence[str], percentages: Sequence[float], seed: int) -> dict[float, list[str]]:
    """Seeded trajectory subsets; a smaller percentage is always a prefix of a larger one."""
    vids = sorted(vids)
    perm = np.random.default_rng(seed).permutation(len(vids))
    out = {}
    for p in percentages:
        if not 0 < p <= 100:
            raise ValueError(f"percentage {p} outside (0, 100]")
        k = math.floor(len(vids) * p / 100 + 0.5)
        if k == 0:
            raise PercentageTooSmall(f"{p}% of {len(vids)} trajectories is empty")
        out[p] = [vids[i] for i in perm[:k]]
    return out


@dataclass
class SweepSpec:
    percentages: tuple[float, ...] = (100, 50, 25, 20, 15, 10, 5, 3, 2)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train: TrainConfig = TrainConfig()
    feature_mode: str = "video_plus_actions"
    contrastive: bool = True

    def __post_init__(self):
        if any(not 0 < p <= 100 for p in self.percentages):
            raise ValueError("percentages must lie in (0, 100]")


def ablate_datasize(spec: SweepSpec, data: DataSplits, model_config: ModelConfig,
                    weights: LossWeights = LossWeights()) -> dict:
    """Rows per percentage of training trajectories, mean±std over seeds."""
    train_vids = sorted({q.vid for q in data.train})
    runs: dict[float, list[MetricsReport]] = {p: [] for p in spec.percentages}
    sizes: dict[float, int] = {}
    for s in spec.seeds:
        subsets = nested_subsets(train_vids, spec.percentages, s)
        tc = TrainConfig(**{**asdict(spec.train), "seed": s, "feature_mode": spec.feature_mode,
                            "contrastive": spec.contrastive})
        for p in spec.percentages:
            keep = set(subsets[p])
            sizes[p] = len(keep)
            qs = [q for q in data.train if q.vid in keep]
            report, _, _ = run_once(data, model_config, tc, weights, train_queries=qs)
            runs[p].append(report)
    return {p: {"trajectories": sizes[p], "mean_std": aggregate(runs[p]), "runs": runs[p]}
            for p in spec.percentages}


def table2_json(rows: dict) -> dict:
    return {
        "rows": {name: {"mean": r["mean_std"].values(), "std": r["mean_std"].std,
                        "seeds": r["mean_std"].num_seeds} for name, r in rows.items()},
        "paper_reference": {name: {k: {"mean": m, "std": s} for k, (m, s) in ref.items()}
                            for name, ref in PAPER_TABLE2.items()},
    }


def table3_json(rows: dict) -> dict:
    ref = {str(p): dict(zip(("trajectories",) + METRIC_KEYS, v)) for p, v in PAPER_TABLE3.items()}
    return {
        "rows": {str(p): {"trajectories": r["trajectories"], "mean": r["mean_std"].values(),
                          "std": r["mean_std"].std, "seeds": r["mean_std"].num_seeds}
                 for p, r in rows.items()},
        "paper_reference": ref,
    }


def format_rows(rows: dict, title: str) -> str:
    return format_table([(str(k), r["mean_std"]) for k, r in rows.items()], title)
