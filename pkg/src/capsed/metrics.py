"""Segment-based and onset-only event-based error rates.

Segment scoring marks a class active in a one-second segment when any of its
frames is active, then counts per segment ``S = min(FP, FN)``,
``I = max(0, FP - FN)`` and ``D = max(0, FN - FP)``.  Statistics are summed over
segments (and files) before dividing by the number of active reference events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError, ShapeError

FRAME_HOP = 0.02


class Event(NamedTuple):
    onset: float
    offset: float
    label: str


@dataclass
class EventRoll:
    activity: np.ndarray  # (frames, K) of {0, 1}
    labels: list[str]
    frame_hop: float = FRAME_HOP

    def __post_init__(self):
        self.activity = np.asarray(self.activity).astype(np.int8)
        if self.activity.ndim != 2 or self.activity.shape[1] != len(self.labels):
            raise ShapeError(f"activity shape {self.activity.shape} does not match {len(self.labels)} labels")
        if not np.all((self.activity == 0) | (self.activity == 1)):
            raise DataError("event roll entries must be 0 or 1")

    @property
    def n_frames(self) -> int:
        return self.activity.shape[0]


@dataclass
class SegmentStats:
    S: int = 0
    I: int = 0
    D: int = 0
    N: int = 0
    n_segments: int = 0

    def __add__(self, other: "SegmentStats") -> "SegmentStats":
        return SegmentStats(self.S + other.S, self.I + other.I, self.D + other.D, self.N + other.N,
                            self.n_segments + other.n_segments)

    @property
    def error_rate(self) -> float:
        """ER; 0 for an empty reference with no errors, NaN if only insertions exist."""
        errors = self.S + self.I + self.D
        if self.N == 0:
            return 0.0 if errors == 0 else math.nan
        return errors / self.N


@dataclass
class EventStats(SegmentStats):
    correct: int = 0
    pairs: list = field(default_factory=list, repr=False)

    def __add__(self, other):
        return EventStats(self.S + other.S, self.I + other.I, self.D + other.D, self.N + other.N, 0,
                          self.correct + other.correct)


def _frame_span(onset: float, offset: float, hop: float) -> tuple[int, int]:
    start = int(math.floor(onset / hop + 1e-9))
    stop = int(math.ceil(offset / hop - 1e-9))
    return start, max(stop, start + 1)


def roll_from_events(events: Sequence[Event], frame_hop: float, n_frames: int, labels: Sequence[str]) -> EventRoll:
    """Frame ``t`` is active when ``[t*hop, (t+1)*hop)`` overlaps the event interval."""
    labels = list(labels)
    index = {lab: k for k, lab in enumerate(labels)}
    act = np.zeros((n_frames, len(labels)), dtype=np.int8)
    for ev in events:
        if ev.label not in index:
            raise DataError(f"unknown label {ev.label!r}")
        if ev.offset < ev.onset:
            raise DataError(f"event {ev} ends before it starts")
        start, stop = _frame_span(ev.onset, ev.offset, frame_hop)
        act[max(start, 0):min(stop, n_frames), index[ev.label]] = 1
    return EventRoll(act, labels, frame_hop)


def events_from_roll(roll: EventRoll) -> list[Event]:
    """Maximal runs of active frames, sorted by onset then label."""
    events = []
    hop = roll.frame_hop
    for k, label in enumerate(roll.labels):
        col = np.concatenate([[0], roll.activity[:, k], [0]]).astype(np.int8)
        edges = np.flatnonzero(np.diff(col))
        for start, stop in zip(edges[::2], edges[1::2]):
            events.append(Event(round(start * hop, 6), round(stop * hop, 6), label))
    events.sort(key=lambda e: (e.onset, e.label))
    return events


def segment_activity(roll: EventRoll, segment_len: float = 1.0) -> np.ndarray:
    """``segments x K`` any-frame-active matrix; a trailing partial segment counts in full."""
    per_seg = int(round(segment_len / roll.frame_hop))
    if per_seg < 1:
        raise ShapeError("segment shorter than one frame")
    n_seg = -(-roll.n_frames // per_seg)
    padded = np.zeros((n_seg * per_seg, roll.activity.shape[1]), dtype=np.int8)
    padded[: roll.n_frames] = roll.activity
    return padded.reshape(n_seg, per_seg, -1).max(axis=1)


def segment_error_rate(ref: EventRoll, hyp: EventRoll, segment_len: float = 1.0) -> tuple[float, SegmentStats]:
    if ref.n_frames != hyp.n_frames:
        raise DataError(f"duration mismatch: {ref.n_frames} reference frames vs {hyp.n_frames}")
    if list(ref.labels) != list(hyp.labels):
        raise DataError("reference and hypothesis label sets differ")
    if not math.isclose(ref.frame_hop, hyp.frame_hop):
        raise DataError("reference and hypothesis frame hops differ")
    r = segment_activity(ref, segment_len).astype(np.int64)
    h = segment_activity(hyp, segment_len).astype(np.int64)
    fn = ((r == 1) & (h == 0)).sum(axis=1)
    fp = ((r == 0) & (h == 1)).sum(axis=1)
    stats = SegmentStats(
        S=int(np.minimum(fp, fn).sum()),
        I=int(np.maximum(0, fp - fn).sum()),
        D=int(np.maximum(0, fn - fp).sum()),
        N=int(r.sum()),
        n_segments=int(r.shape[0]),
    )
    return stats.error_rate, stats


def _closest(candidates: list[int], events: Sequence[Event], onset: float, collar: float) -> int | None:
    best, best_d = None, None
    for j in candidates:
        d = abs(events[j].onset - onset)
        if d <= collar + 1e-9 and (best_d is None or d < best_d):
            best, best_d = j, d
    return best


def event_error_rate_onset(ref: Sequence[Event], hyp: Sequence[Event], collar: float = 0.5) -> tuple[float, EventStats]:
    """Onset-only event ER.

    Hypotheses are visited in onset order.  Each first takes the closest
    unmatched reference of its own class within the collar (a correct
    detection); a second pass pairs leftover hypotheses with leftover
    references of other classes within the collar (substitutions).
    """
    hyp_order = sorted(range(len(hyp)), key=lambda i: (hyp[i].onset, hyp[i].label))
    ref_free = sorted(range(len(ref)), key=lambda j: (ref[j].onset, ref[j].label))
    pairs = []
    leftover = []
    for i in hyp_order:
        same = [j for j in ref_free if ref[j].label == hyp[i].label]
        j = _closest(same, ref, hyp[i].onset, collar)
        if j is None:
            leftover.append(i)
        else:
            ref_free.remove(j)
            pairs.append((i, j, "correct"))
    n_sub = 0
    for i in leftover:
        other = [j for j in ref_free if ref[j].label != hyp[i].label]
        j = _closest(other, ref, hyp[i].onset, collar)
        if j is not None:
            ref_free.remove(j)
            pairs.append((i, j, "substitution"))
            n_sub += 1
    correct = len(pairs) - n_sub
    stats = EventStats(
        S=n_sub,
        I=len(hyp) - correct - n_sub,
        D=len(ref) - correct - n_sub,
        N=len(ref),
        correct=correct,
        pairs=pairs,
    )
    return stats.error_rate, stats


def average_error_rate(per_scene: dict[str, SegmentStats]) -> float:
    """Arithmetic mean of per-scene error rates."""
    if not per_scene:
        raise DataError("no scenes to average")
    return float(np.mean([s.error_rate for s in per_scene.values()]))
