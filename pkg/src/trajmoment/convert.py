"""Turn instruction-annotated trajectory logs into the changepoint dataset format.

A raw trial lists its frames, the discrete actions (each owning a run of
frames) and the low-level instructions (each owning an inclusive frame
range). Conversion maps frames to seconds at ``fps``, keeps instruction
windows at 1-second resolution and labels every 2-second clip with one
action.
"""
from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import ClipGrid, TemporalSpan, clip_ids_for_span

DEFAULT_FPS = 5
HIGHLIGHT_SCORE = 4


class ValidationError(ValueError):
    def __init__(self, trial_id: str, problems: list[str]):
        self.trial_id = trial_id
        self.problems = problems
        super().__init__(f"trial {trial_id!r}: " + "; ".join(problems))


class EmptyDataset(ValueError):
    pass


@dataclass
class RawTrial:
    trial_id: str
    num_frames: int
    actions: list[tuple[str, list[int]]]
    instructions: list[tuple[str, tuple[int, int]]]
    goal_text: str = ""

    @property
    def frames(self) -> range:
        return range(self.num_frames)


@dataclass
class TrajectoryRecord:
    vid: str
    duration: float
    num_frames: int
    num_actions: int
    actions_per_clip: list[str]

    @property
    def grid(self) -> ClipGrid:
        return ClipGrid(self.duration)

    def to_json(self) -> dict:
        return {
            "vid": self.vid,
            "duration": self.duration,
            "num_clips": self.grid.num_clips,
            "num_frames": self.num_frames,
            "num_actions": self.num_actions,
            "actions_per_clip": self.actions_per_clip,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "TrajectoryRecord":
        return cls(d["vid"], float(d["duration"]), int(d["num_frames"]),
                   int(d["num_actions"]), list(d["actions_per_clip"]))


@dataclass
class QueryRecord:
    qid: str
    vid: str
    query: str
    duration: float
    relevant_windows: list[TemporalSpan]
    relevant_clip_ids: list[int]
    saliency_scores: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        # field order is part of the on-disk contract
        return {
            "qid": self.qid,
            "query": self.query,
            "vid": self.vid,
            "duration": self.duration,
            "relevant_windows": [w.as_list() for w in self.relevant_windows],
            "relevant_clip_ids": self.relevant_clip_ids,
            "saliency_scores": self.saliency_scores,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "QueryRecord":
        return cls(
            qid=str(d["qid"]),
            vid=d["vid"],
            query=d["query"],
            duration=float(d["duration"]),
            relevant_windows=[TemporalSpan(float(s), float(e)) for s, e in d["relevant_windows"]],
            relevant_clip_ids=[int(i) for i in d["relevant_clip_ids"]],
            saliency_scores=[int(x) for x in d.get("saliency_scores", [])],
        )


@dataclass
class StatsReport:
    num_queries: int
    num_trajectories: int
    avg_query_len: float
    avg_discrete_actions: float
    avg_instructions_per_trajectory: float
    avg_moment_len_seconds: float
    avg_trajectory_len_seconds: float
    avg_frames_per_trajectory: float

    def to_json(self) -> dict:
        return asdict(self)


def frames_to_span(first: int, last: int, fps: float = DEFAULT_FPS,
                   num_frames: int | None = None) -> TemporalSpan:
    """Seconds covered by the inclusive frame range, rounded outward.

    Frames 10..50 at 5 fps give [2, 10].
    """
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    if first < 0 or last < first:
        raise ValueError(f"bad frame range [{first}, {last}]")
    if num_frames is not None and last >= num_frames:
        raise ValueError(f"frame range [{first}, {last}] outside trajectory of {num_frames} frames")
    start = math.floor(first / fps)
    end = math.ceil(last / fps)
    if end <= start:
        end = start + 1
    if num_frames is not None:
        end = min(end, num_frames / fps)
    return TemporalSpan(float(start), float(end))


def _majority(labels: Sequence[str]) -> str:
    counts = Counter(labels)
    best = max(counts.values())
    # first label in order reaching the max count wins ties
    return next(lbl for lbl in labels if counts[lbl] == best)


def map_actions_to_seconds(actions: Sequence[tuple[str, Sequence[int]]],
                           num_frames: int, fps: int = DEFAULT_FPS) -> list[str]:
    owner: list[str | None] = [None] * num_frames
    for name, frames in actions:
        for f in frames:
            if not 0 <= f < num_frames:
                raise ValueError(f"action {name} frame {f} outside [0, {num_frames})")
            if owner[f] is None:
                owner[f] = name
    missing = [f for f, o in enumerate(owner) if o is None]
    if missing:
        raise ValueError(f"frames not covered by any action: {missing[:10]}")
    n_sec = math.ceil(num_frames / fps)
    return [_majority(owner[s * fps:(s + 1) * fps]) for s in range(n_sec)]


def map_actions_to_clips(actions: Sequence[tuple[str, Sequence[int]]], num_frames: int,
                         fps: int = DEFAULT_FPS, grid: ClipGrid | None = None) -> list[str]:
    """One action name per 2-second clip by majority vote, earliest wins ties."""
    per_second = map_actions_to_seconds(actions, num_frames, fps)
    grid = grid or ClipGrid(num_frames / fps)
    secs_per_clip = int(grid.clip_len)
    return [_majority(per_second[i * secs_per_clip:(i + 1) * secs_per_clip])
            for i in range(grid.num_clips)]


def validate_trial(raw: RawTrial) -> list[str]:
    problems = []
    if raw.num_frames <= 0:
        problems.append("trial has no frames")
    for i, (text, (first, last)) in enumerate(raw.instructions):
        if not (0 <= first <= last < raw.num_frames):
            problems.append(f"instruction {i} frame range [{first}, {last}] outside [0, {raw.num_frames})")
        if not text.strip():
            problems.append(f"instruction {i} has empty text")
    covered = set()
    prev_max = -1
    for j, (name, frames) in enumerate(raw.actions):
        if not frames:
            problems.append(f"action {j} ({name}) has no frames")
            continue
        bad = [f for f in frames if not 0 <= f < raw.num_frames]
        if bad:
            problems.append(f"action {j} ({name}) frames {bad[:5]} outside [0, {raw.num_frames})")
        if list(frames) != sorted(frames):
            problems.append(f"action {j} ({name}) frames not ordered")
        if min(frames) < prev_max:
            problems.append(f"action {j} ({name}) starts before the previous action ends")
        prev_max = max(prev_max, max(frames))
        covered.update(frames)
    if raw.num_frames > 0 and raw.actions:
        uncovered = sorted(set(range(raw.num_frames)) - covered)
        if uncovered:
            problems.append(f"frames {uncovered[:10]} not covered by any action")
    elif raw.num_frames > 0:
        problems.append("trial has no actions")
    return problems


def convert_trial(raw: RawTrial, fps: int = DEFAULT_FPS) -> tuple[TrajectoryRecord, list[QueryRecord]]:
    problems = validate_trial(raw)
    if problems:
        raise ValidationError(raw.trial_id, problems)
    duration = raw.num_frames / fps
    grid = ClipGrid(duration)
    traj = TrajectoryRecord(
        vid=raw.trial_id,
        duration=duration,
        num_frames=raw.num_frames,
        num_actions=len(raw.actions),
        actions_per_clip=map_actions_to_clips(raw.actions, raw.num_frames, fps, grid),
    )
    queries = []
    for i, (text, (first, last)) in enumerate(raw.instructions):
        window = frames_to_span(first, last, fps, raw.num_frames)
        clip_ids = clip_ids_for_span(window, grid)
        queries.append(QueryRecord(
            qid=f"{raw.trial_id}_{i}",
            vid=raw.trial_id,
            query=text.strip(),
            duration=duration,
            relevant_windows=[window],
            relevant_clip_ids=clip_ids,
            saliency_scores=[HIGHLIGHT_SCORE] * len(clip_ids),
        ))
    return traj, queries


def dataset_stats(trajectories: Sequence[TrajectoryRecord], queries: Sequence[QueryRecord]) -> StatsReport:
    if not trajectories or not queries:
        raise EmptyDataset("cannot compute statistics of an empty dataset")
    nq, nt = len(queries), len(trajectories)
    return StatsReport(
        num_queries=nq,
        num_trajectories=nt,
        avg_query_len=sum(len(q.query.split()) for q in queries) / nq,
        avg_discrete_actions=sum(t.num_actions for t in trajectories) / nt,
        avg_instructions_per_trajectory=nq / nt,
        avg_moment_len_seconds=sum(sum(w.length for w in q.relevant_windows) / len(q.relevant_windows)
                                   for q in queries) / nq,
        avg_trajectory_len_seconds=sum(t.duration for t in trajectories) / nt,
        avg_frames_per_trajectory=sum(t.num_frames for t in trajectories) / nt,
    )


# ---------------------------------------------------------------------------
# raw log readers

DEFAULT_FIELD_MAP = {
    "trial_id": "trial_id",
    "num_frames": "num_frames",
    "actions": "actions",
    "action_name": "name",
    "action_frames": "frames",
    "instructions": "instructions",
    "instruction_text": "text",
    "instruction_frames": "frames",
    "goal": "goal",
}


def parse_raw_trial(data: Mapping, field_map: Mapping[str, str] | None = None,
                    default_id: str = "") -> RawTrial:
    """Read the flat trial schema; key names can be remapped with ``field_map``."""
    fm = {**DEFAULT_FIELD_MAP, **(field_map or {})}
    actions = [(str(a[fm["action_name"]]), [int(f) for f in a[fm["action_frames"]]])
               for a in data.get(fm["actions"], [])]
    instructions = []
    for ins in data.get(fm["instructions"], []):
        first, last = ins[fm["instruction_frames"]]
        instructions.append((str(ins[fm["instruction_text"]]), (int(first), int(last))))
    if fm["num_frames"] in data:
        num_frames = int(data[fm["num_frames"]])
    else:
        num_frames = 1 + max((max(fr) for _, fr in actions if fr), default=-1)
    return RawTrial(
        trial_id=str(data.get(fm["trial_id"], default_id)),
        num_frames=num_frames,
        actions=actions,
        instructions=instructions,
        goal_text=str(data.get(fm["goal"], "")),
    )


def parse_alfred_trial(data: Mapping, default_id: str = "", annotation: int = 0) -> RawTrial:
    """Read an ALFRED ``traj_data.json``.

    Every entry of ``images`` is one frame tagged with the index of the low-level
    action (``low_idx``) and of the instruction (``high_idx``) it belongs to.
    """
    images = data["images"]
    low_actions = data["plan"]["low_actions"]
    action_frames: dict[int, list[int]] = {}
    instr_frames: dict[int, list[int]] = {}
    for f, img in enumerate(images):
        action_frames.setdefault(int(img["low_idx"]), []).append(f)
        instr_frames.setdefault(int(img["high_idx"]), []).append(f)
    actions = [(low_actions[j]["api_action"]["action"] if j < len(low_actions) else "NoOp", frames)
               for j, frames in sorted(action_frames.items())]
    anns = data.get("turk_annotations", {}).get("anns", [])
    descs = anns[annotation]["high_descs"] if annotation < len(anns) else []
    goal = anns[annotation].get("task_desc", "") if annotation < len(anns) else ""
    instructions = [(text, (min(instr_frames[i]), max(instr_frames[i])))
                    for i, text in enumerate(descs) if i in instr_frames]
    return RawTrial(
        trial_id=str(data.get("task_id", default_id)) if not default_id else default_id,
        num_frames=len(images),
        actions=actions,
        instructions=instructions,
        goal_text=goal,
    )


def load_field_map(path: str | os.PathLike) -> dict[str, str]:
    from .config import read_kv_file
    return read_kv_file(path)


def iter_trial_files(input_dir: str | os.PathLike) -> list[Path]:
    """Trial json files under ``input_dir``, one per trial directory, sorted."""
    root = Path(input_dir)
    found = sorted(p for p in root.rglob("*.json") if p.is_file())
    return found


def read_trials(input_dir, fmt: str = "auto", field_map=None, annotation: int = 0) -> list[RawTrial]:
    root = Path(input_dir)
    trials = []
    for path in iter_trial_files(root):
        data = json.loads(path.read_text())
        rel = path.parent.relative_to(root)
        default_id = str(rel).replace(os.sep, "_") if str(rel) != "." else path.stem
        kind = fmt
        if kind == "auto":
            kind = "alfred" if "images" in data and "plan" in data else "flat"
        if kind == "alfred":
            trials.append(parse_alfred_trial(data, default_id, annotation))
        else:
            trials.append(parse_raw_trial(data, field_map, default_id))
    return trials


def convert_all(trials: Iterable[RawTrial], fps: int = DEFAULT_FPS):
    """Convert trials, collecting every validation problem before failing."""
    trajs, queries, errors = [], [], []
    for raw in sorted(trials, key=lambda t: t.trial_id):
        try:
            t, qs = convert_trial(raw, fps)
        except ValidationError as e:
            errors.append(e)
            continue
        trajs.append(t)
        queries.extend(qs)
    if errors:
        raise ValidationError("*", [str(e) for e in errors])
    ids = [t.vid for t in trajs]
    if len(set(ids)) != len(ids):
        raise ValidationError("*", ["duplicate trial ids"])
    return trajs, queries


def write_jsonl(path, rows: Iterable[dict]):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_dataset(out_dir, trajectories, queries, name: str = "dataset.jsonl", stats: bool = True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / name, (q.to_json() for q in queries))
    write_jsonl(out / "trajectories.jsonl", (t.to_json() for t in trajectories))
    if stats:
        report = dataset_stats(trajectories, queries)
        (out / "stats.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")


def load_queries(path) -> list[QueryRecord]:
    return [QueryRecord.from_json(d) for d in read_jsonl(path)]


def load_trajectories(path) -> list[TrajectoryRecord]:
    return [TrajectoryRecord.from_json(d) for d in read_jsonl(path)]
