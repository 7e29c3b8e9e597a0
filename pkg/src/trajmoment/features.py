"""Feature matrices: TRJF files, trajectory assembly and the synthetic generator."""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .convert import (HIGHLIGHT_SCORE, QueryRecord, TrajectoryRecord, dataset_stats,
                      write_jsonl)
from .core import CLIP_LEN, ClipGrid, TemporalSpan, clip_ids_for_span

MAGIC = b"TRJF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")

CLIP_DIM = 512
SLOWFAST_DIM = 2304
VIDEO_DIM = CLIP_DIM + SLOWFAST_DIM
ACTION_DIM = 512
TRAJ_DIM = VIDEO_DIM + ACTION_DIM

MODES = ("video_only", "video_plus_actions")

ACTION_VOCAB = ("MoveAhead", "RotateLeft", "RotateRight", "LookDown",
                "LookUp", "PickupObject", "PutObject", "ToggleObjectOn")


class FeatureError(ValueError):
    pass


class BadMagic(FeatureError):
    pass


class TruncatedFile(FeatureError):
    pass


class NonFiniteValue(FeatureError):
    pass


class DimensionMismatch(FeatureError):
    pass


class MissingActionFeatures(FeatureError):
    pass


def write_block(f: BinaryIO, matrix) -> None:
    arr = np.asarray(matrix)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if not np.isfinite(arr).all():
        raise NonFiniteValue("feature matrix contains NaN or inf")
    f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, arr.shape[0], arr.shape[1]))
    f.write(arr.tobytes())


def read_block(f: BinaryIO) -> np.ndarray:
    head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        if head[:4] and head[:4] != MAGIC[:len(head[:4])]:
            raise BadMagic(f"bad magic {head[:4]!r}")
        raise TruncatedFile(f"header truncated ({len(head)} of {_HEADER.size} bytes)")
    magic, version, rows, cols = _HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FeatureError(f"unsupported TRJF version {version}")
    nbytes = rows * cols * 4
    payload = f.read(nbytes)
    if len(payload) < nbytes:
        raise TruncatedFile(f"expected {nbytes} data bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
    if not np.isfinite(arr).all():
        raise NonFiniteValue("feature file contains NaN or inf")
    return arr


def write_feature_file(matrix, path) -> None:
    buf = io.BytesIO()
    write_block(buf, matrix)
    Path(path).write_bytes(buf.getvalue())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_block(f)


def assemble_trajectory_features(video: np.ndarray, actions: np.ndarray | None,
                                 mode: str = "video_plus_actions") -> np.ndarray:
    """Trajectory rows: video only, or video and action features side by side."""
    if mode == "video_only":
        return video
    if mode != "video_plus_actions":
        raise ValueError(f"unknown feature mode {mode!r}")
    if actions is None:
        raise MissingActionFeatures("video_plus_actions needs action features")
    if video.shape[0] != actions.shape[0]:
        raise DimensionMismatch(f"video has {video.shape[0]} rows, actions {actions.shape[0]}")
    return np.concatenate([video, actions], axis=1)


class FeatureStore:
    """Feature lookup keyed by vid/qid, backed by dicts and optionally a directory.

    Files follow ``{vid}.vfeat``, ``{vid}.afeat`` and ``{qid}.qfeat``.
    """

    def __init__(self, root=None, video=None, actions=None, queries=None):
        self.root = Path(root) if root is not None else None
        self.video = dict(video or {})
        self.actions = dict(actions or {})
        self.queries = dict(queries or {})

    def _load(self, cache, key, suffix, required=True):
        if key not in cache:
            path = self.root / f"{key}.{suffix}" if self.root is not None else None
            if path is None or not path.exists():
                if not required:
                    return None
                raise FileNotFoundError(f"no {suffix} features for {key!r}")
            cache[key] = read_feature_file(path)
        return cache[key]

    def get_video(self, vid):
        return self._load(self.video, vid, "vfeat")

    def get_actions(self, vid, required=True):
        arr = self._load(self.actions, vid, "afeat", required=False)
        if arr is None and required:
            raise MissingActionFeatures(f"no action features for {vid!r}")
        return arr

    def get_query(self, qid):
        return self._load(self.queries, qid, "qfeat")

    def trajectory(self, vid, mode):
        actions = self.get_actions(vid) if mode == "video_plus_actions" else None
        return assemble_trajectory_features(self.get_video(vid), actions, mode)

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for vid in sorted(self.video):
            write_feature_file(self.video[vid], root / f"{vid}.vfeat")
        for vid in sorted(self.actions):
            write_feature_file(self.actions[vid], root / f"{vid}.afeat")
        for qid in sorted(self.queries):
            write_feature_file(self.queries[qid], root / f"{qid}.qfeat")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    num_trajectories: int = 200
    num_test_trajectories: int = 50
    val_fraction: float = 0.1
    segments_per_trajectory: tuple[int, int] = (3, 6)
    clips_per_segment: tuple[int, int] = (2, 6)
    query_tokens: tuple[int, int] = (4, 10)
    clip_feature_dim: int = 32
    action_feature_dim: int = 16
    query_feature_dim: int = 24
    noise_std: float = 0.1
    # 0 draws a fresh concept per segment; k > 0 reuses a vocabulary of k concepts
    num_concepts: int = 0
    query_action_weight: float = 0.5
    video_action_weight: float = 0.0
    fps: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("clip_feature_dim", "action_feature_dim", "query_feature_dim"):
            if getattr(self, name) < 4:
                raise ValueError(f"{name} must be >= 4")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        lo, hi = self.segments_per_trajectory
        if not 1 <= lo <= hi:
            raise ValueError("bad segments_per_trajectory range")
        if self.num_concepts and self.num_concepts * len(ACTION_VOCAB) < hi:
            raise ValueError("too few concepts for distinct segments")


@dataclass
class SynthDataset:
    config: SynthConfig
    trajectories: list[TrajectoryRecord]
    splits: dict[str, list[QueryRecord]]
    features: FeatureStore = field(repr=False)

    @property
    def queries(self) -> list[QueryRecord]:
        return [q for name in ("train", "val", "test") for q in self.splits[name]]

    def split_trajectories(self, name) -> list[TrajectoryRecord]:
        vids = {q.vid for q in self.splits[name]}
        return [t for t in self.trajectories if t.vid in vids]

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, qs in self.splits.items():
            write_jsonl(out / f"{name}.jsonl", (q.to_json() for q in qs))
        write_jsonl(out / "trajectories.jsonl", (t.to_json() for t in self.trajectories))
        stats = {name: dataset_stats(self.split_trajectories(name), qs).to_json()
                 for name, qs in self.splits.items() if qs}
        (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
        (out / "synth_config.json").write_text(json.dumps(asdict(self.config), indent=2) + "\n")
        self.features.save(out / "features")


def _draw_segments(rng, cfg: SynthConfig):
    n_seg = int(rng.integers(cfg.segments_per_trajectory[0], cfg.segments_per_trajectory[1] + 1))
    lengths = rng.integers(cfg.clips_per_segment[0], cfg.clips_per_segment[1] + 1, size=n_seg)
    pairs = []
    while len(pairs) < n_seg:
        action = int(rng.integers(len(ACTION_VOCAB)))
        concept = int(rng.integers(cfg.num_concepts)) if cfg.num_concepts else -1
        key = (concept, action)
        if cfg.num_concepts and key in pairs:
            continue
        if pairs and pairs[-1][1] == action and concept < 0:
            # keep neighbouring actions distinct so clip labels show the boundary
            continue
        pairs.append(key)
    return [int(x) for x in lengths], pairs


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    """Build a dataset whose trajectories are a sequence of latent segments.

    Every segment owns a concept vector and an action. Clip features are the
    concept plus Gaussian noise, action features are the action's fixed
    embedding, and each query token is a fixed projection of its segment's
    concept (plus a weighted action projection) plus noise. A query's ground
    truth is its segment. Output depends only on ``cfg``.
    """
    rng = np.random.default_rng(cfg.seed)
    dc, da, dq = cfg.clip_feature_dim, cfg.action_feature_dim, cfg.query_feature_dim
    w_query = rng.standard_normal((dc, dq)) / math.sqrt(dc)
    w_query_action = rng.standard_normal((da, dq)) / math.sqrt(da)
    w_video_action = rng.standard_normal((da, dc)) / math.sqrt(da)
    action_emb = rng.standard_normal((len(ACTION_VOCAB), da))
    vocab = rng.standard_normal((max(cfg.num_concepts, 1), dc))

    total = cfg.num_trajectories + cfg.num_test_trajectories
    n_val = round(cfg.num_trajectories * cfg.val_fraction)
    trajectories, splits = [], {"train": [], "val": [], "test": []}
    store = FeatureStore()
    width = len(str(total - 1))
    for t in range(total):
        vid = f"syn{t:0{width}d}"
        lengths, pairs = _draw_segments(rng, cfg)
        num_clips = sum(lengths)
        duration = num_clips * CLIP_LEN
        grid = ClipGrid(duration)
        video = np.empty((num_clips, dc))
        actions = np.empty((num_clips, da))
        action_names = []
        if t < cfg.num_trajectories - n_val:
            split = "train"
        elif t < cfg.num_trajectories:
            split = "val"
        else:
            split = "test"
        row = 0
        for s, (length, (concept_id, action_id)) in enumerate(zip(lengths, pairs)):
            concept = vocab[concept_id] if concept_id >= 0 else rng.standard_normal(dc)
            a = action_emb[action_id]
            base = concept + cfg.video_action_weight * (a @ w_video_action)
            video[row:row + length] = base + cfg.noise_std * rng.standard_normal((length, dc))
            actions[row:row + length] = a
            action_names += [ACTION_VOCAB[action_id]] * length

            n_tok = int(rng.integers(cfg.query_tokens[0], cfg.query_tokens[1] + 1))
            q_base = concept @ w_query + cfg.query_action_weight * (a @ w_query_action)
            qfeat = q_base + cfg.noise_std * rng.standard_normal((n_tok, dq))
            window = TemporalSpan(row * CLIP_LEN, (row + length) * CLIP_LEN)
            ids = clip_ids_for_span(window, grid)
            tag = f"c{concept_id}" if concept_id >= 0 else f"c{t}_{s}"
            words = [ACTION_VOCAB[action_id].lower(), tag] + ["then"] * (n_tok - 2)
            qid = f"{vid}_{s}"
            splits[split].append(QueryRecord(
                qid=qid, vid=vid, query=" ".join(words[:n_tok]), duration=duration,
                relevant_windows=[window], relevant_clip_ids=ids,
                saliency_scores=[HIGHLIGHT_SCORE] * len(ids)))
            store.queries[qid] = qfeat.astype(np.float32)
            row += length
        store.video[vid] = video.astype(np.float32)
        store.actions[vid] = actions.astype(np.float32)
        trajectories.append(TrajectoryRecord(
            vid=vid, duration=duration, num_frames=int(duration * cfg.fps),
            num_actions=len(pairs), actions_per_clip=action_names))
    return SynthDataset(cfg, trajectories, splits, store)
