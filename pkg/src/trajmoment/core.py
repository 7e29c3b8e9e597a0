"""Span geometry, the 2-second clip grid, and shared domain types."""
from __future__ import annotations

import math
from dataclasses import dataclass

CLIP_LEN = 2.0


class SpanError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TemporalSpan:
    """Half-open interval [start, end) in seconds."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise SpanError(f"non-finite span [{self.start}, {self.end}]")
        if self.start < 0:
            raise SpanError(f"span start {self.start} < 0")
        if self.end <= self.start:
            raise SpanError(f"empty span [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    def shift(self, t: float) -> "TemporalSpan":
        return TemporalSpan(self.start + t, self.end + t)

    def as_list(self) -> list[float]:
        return [self.start, self.end]


@dataclass(frozen=True)
class ClipGrid:
    duration: float
    clip_len: float = CLIP_LEN

    def __post_init__(self):
        if self.duration <= 0:
            raise SpanError(f"duration must be positive, got {self.duration}")

    @property
    def num_clips(self) -> int:
        return math.ceil(self.duration / self.clip_len - 1e-9)

    def clip_bounds(self, i: int) -> tuple[float, float]:
        if not 0 <= i < self.num_clips:
            raise IndexError(i)
        return i * self.clip_len, min((i + 1) * self.clip_len, self.duration)


@dataclass(frozen=True)
class Prediction:
    span: TemporalSpan
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def span_iou(a: TemporalSpan, b: TemporalSpan) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    return inter / union


def span_giou(a: TemporalSpan, b: TemporalSpan) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    hull = max(a.end, b.end) - min(a.start, b.start)
    return inter / union - (hull - union) / hull


def span_from_center_width(center: float, width: float, duration: float) -> TemporalSpan:
    """Map a normalized (center, width) pair to seconds, clamped to [0, duration]."""
    if duration <= 0:
        raise SpanError(f"duration must be positive, got {duration}")
    if width <= 0:
        raise SpanError(f"width must be positive, got {width}")
    start = max(0.0, (center - width / 2) * duration)
    end = min(duration, (center + width / 2) * duration)
    if end <= start:
        # center far outside the trajectory; collapse onto the nearest edge
        eps = min(width * duration, duration) * 1e-6
        if start >= duration:
            start, end = duration - eps, duration
        else:
            start, end = 0.0, eps
    return TemporalSpan(start, end)


def span_to_center_width(span: TemporalSpan, duration: float) -> tuple[float, float]:
    if duration <= 0:
        raise SpanError(f"duration must be positive, got {duration}")
    return (span.start + span.end) / 2 / duration, span.length / duration


def clip_ids_for_span(span: TemporalSpan, grid: ClipGrid) -> list[int]:
    """Indices of clips overlapping ``span`` with positive length."""
    if span.end > grid.duration + 1e-9:
        raise SpanError(f"span {span.as_list()} exceeds duration {grid.duration}")
    first = int(math.floor(span.start / grid.clip_len))
    last = int(math.ceil(span.end / grid.clip_len)) - 1
    last = min(last, grid.num_clips - 1)
    return list(range(first, last + 1))
