"""Diarization decisions and NIST-style DER scoring.

DER counts missed speech, false alarms and speaker confusion over the
reference speech time, with overlapped speech included and a no-score
collar around every reference segment boundary.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

FRAME_HOP = 0.1
DEFAULT_COLLAR = 0.25
EXHAUSTIVE_LIMIT = 8


class UndefinedDERError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _normalize(intervals):
    out = []
    for on, off in sorted((float(a), float(b)) for a, b in intervals):
        if off <= on:
            continue
        if out and on <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], off))
        else:
            out.append((on, off))
    return out


@dataclass
class Annotation:
    """Per-speaker sorted, merged ``(onset, offset)`` intervals in seconds."""

    speakers: dict = field(default_factory=dict)
    source: str = "reference"

    def __post_init__(self):
        cleaned = {str(k): _normalize(v) for k, v in self.speakers.items()}
        self.speakers = {k: v for k, v in cleaned.items() if v}

    def total_speech(self) -> float:
        return sum(off - on for iv in self.speakers.values() for on, off in iv)


@dataclass
class DERReport:
    miss_seconds: float
    falsealarm_seconds: float
    confusion_seconds: float
    scored_speech_seconds: float
    mapping: dict = field(default_factory=dict)

    @property
    def error_seconds(self) -> float:
        return self.miss_seconds + self.falsealarm_seconds + self.confusion_seconds

    @property
    def der(self) -> float:
        if self.scored_speech_seconds <= 0:
            raise UndefinedDERError("no scored reference speech")
        return self.error_seconds / self.scored_speech_seconds

    def to_dict(self) -> dict:
        return {"der": self.der, "miss": self.miss_seconds, "falsealarm": self.falsealarm_seconds,
                "confusion": self.confusion_seconds, "scored": self.scored_speech_seconds}

    @classmethod
    def pooled(cls, reports) -> "DERReport":
        reports = list(reports)
        return cls(sum(r.miss_seconds for r in reports),
                   sum(r.falsealarm_seconds for r in reports),
                   sum(r.confusion_seconds for r in reports),
                   sum(r.scored_speech_seconds for r in reports))


# --------------------------------------------------------------------------
# frame-level decisions


def binarize(y: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(y) > threshold).astype(np.int8)


def median_filter(a: np.ndarray, window: int = 11) -> np.ndarray:
    """Majority vote over a centred window per row; the window is clipped at the edges.

    On a clipped, even-length window a tie resolves to 0.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"median filter window must be a positive odd number, got {window}")
    a = np.asarray(a)
    half = window // 2
    n = a.shape[-1]
    csum = np.concatenate([np.zeros(a.shape[:-1] + (1,)), np.cumsum(a, axis=-1)], axis=-1)
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) + half + 1, 0, n)
    ones = csum[..., hi] - csum[..., lo]
    return (2 * ones > (hi - lo)).astype(np.int8)


def matrix_to_annotation(a: np.ndarray, hop: float = FRAME_HOP, names=None,
                         source: str = "hypothesis") -> Annotation:
    """Frame ``t`` covers ``[t * hop, (t + 1) * hop)``; consecutive active frames merge."""
    if hop <= 0:
        raise ValueError("hop must be positive")
    a = np.atleast_2d(np.asarray(a))
    names = names or [str(s) for s in range(a.shape[0])]
    speakers = {}
    for name, row in zip(names, a):
        padded = np.concatenate([[0], (row > 0).astype(np.int8), [0]])
        edges = np.flatnonzero(np.diff(padded))
        speakers[name] = [(on * hop, off * hop) for on, off in zip(edges[::2], edges[1::2])]
    return Annotation(speakers, source)


def annotation_to_matrix(ann: Annotation, n_frames: int, hop: float = FRAME_HOP,
                         names=None) -> np.ndarray:
    """Frame ``t`` is active when its midpoint ``(t + 0.5) * hop`` lies in an interval."""
    names = names if names is not None else sorted(ann.speakers)
    mids = (np.arange(n_frames) + 0.5) * hop
    out = np.zeros((len(names), n_frames), dtype=np.int8)
    for s, name in enumerate(names):
        for on, off in ann.speakers.get(name, []):
            out[s, (mids >= on) & (mids < off)] = 1
    return out


# --------------------------------------------------------------------------
# DER


def _activity(intervals, points):
    if not intervals:
        return np.zeros(len(points), dtype=bool)
    starts = np.array([on for on, _ in intervals])
    ends = np.array([off for _, off in intervals])
    idx = np.searchsorted(starts, points, side="right") - 1
    ok = idx >= 0
    active = np.zeros(len(points), dtype=bool)
    active[ok] = points[ok] < ends[idx[ok]]
    return active


def best_mapping(overlap: np.ndarray) -> list:
    """Injective ref->hyp assignment maximizing total overlap.

    Returns a list of ``(ref_index, hyp_index)`` pairs.  Exhaustive (first
    maximum in lexicographic order wins) up to 8 speakers, Hungarian above.
    """
    n_ref, n_hyp = overlap.shape
    n = max(n_ref, n_hyp)
    if n == 0:
        return []
    square = np.zeros((n, n))
    square[:n_ref, :n_hyp] = overlap
    if n <= EXHAUSTIVE_LIMIT:
        rows = np.arange(n)
        best, best_val = None, -np.inf
        for perm in itertools.permutations(range(n)):
            val = square[rows, perm].sum()
            if val > best_val:
                best, best_val = perm, val
        pairs = list(enumerate(best))
    else:
        r, c = linear_sum_assignment(-square)
        pairs = list(zip(r.tolist(), c.tolist()))
    return [(r, h) for r, h in pairs if r < n_ref and h < n_hyp]


def der(ref: Annotation, hyp: Annotation, collar: float = DEFAULT_COLLAR) -> DERReport:
    ref_names = sorted(ref.speakers)
    hyp_names = sorted(hyp.speakers)
    zones = _normalize(
        [(t - collar, t + collar) for iv in ref.speakers.values() for seg in iv for t in seg]
    ) if collar > 0 else []
    points = {0.0}
    for ann in (ref, hyp):
        for iv in ann.speakers.values():
            for on, off in iv:
                points.update((on, off))
    for on, off in zones:
        points.update((on, off))
    bounds = np.array(sorted(points))
    if len(bounds) < 2:
        raise UndefinedDERError("no scored reference speech")
    mids = (bounds[:-1] + bounds[1:]) / 2
    dur = np.diff(bounds)
    scored = ~_activity(zones, mids)
    dur = np.where(scored, dur, 0.0)
    r_act = np.array([_activity(ref.speakers[n], mids) for n in ref_names],
                     dtype=bool).reshape(-1, len(mids))
    h_act = np.array([_activity(hyp.speakers[n], mids) for n in hyp_names],
                     dtype=bool).reshape(-1, len(mids))
    overlap = (r_act[:, None, :] & h_act[None, :, :]) @ dur if len(mids) else np.zeros((0, 0))
    overlap = np.asarray(overlap).reshape(len(ref_names), len(hyp_names))
    pairs = best_mapping(overlap)
    n_ref = r_act.sum(axis=0)
    n_hyp = h_act.sum(axis=0)
    n_correct = np.zeros(len(mids))
    for r, h in pairs:
        n_correct += r_act[r] & h_act[h]
    scored_speech = float(n_ref @ dur)
    if scored_speech <= 0:
        raise UndefinedDERError("no scored reference speech")
    return DERReport(
        miss_seconds=float(np.maximum(n_ref - n_hyp, 0) @ dur),
        falsealarm_seconds=float(np.maximum(n_hyp - n_ref, 0) @ dur),
        confusion_seconds=float((np.minimum(n_ref, n_hyp) - n_correct) @ dur),
        scored_speech_seconds=scored_speech,
        mapping={ref_names[r]: hyp_names[h] for r, h in pairs},
    )


# --------------------------------------------------------------------------
# RTTM


def write_rttm(path, annotations: dict) -> None:
    """``annotations`` maps file id -> :class:`Annotation`."""
    lines = []
    for file_id, ann in annotations.items():
        for spk in sorted(ann.speakers):
            for on, off in ann.speakers[spk]:
                lines.append(f"SPEAKER {file_id} 1 {on:.3f} {off - on:.3f} <NA> <NA> {spk} <NA> <NA>")
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_rttm(path, source: str = "reference") -> dict:
    """File id -> :class:`Annotation`."""
    per_file = defaultdict(lambda: defaultdict(list))
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise ValueError(f"{path}:{lineno}: malformed RTTM line")
        onset, dur = float(fields[3]), float(fields[4])
        per_file[fields[1]][fields[7]].append((onset, onset + dur))
    return {fid: Annotation(dict(spk), source) for fid, spk in per_file.items()}


# --------------------------------------------------------------------------
# model evaluation


@dataclass
class EvalResult:
    n_channels: int
    with_median: bool
    sessions: dict  # session id -> DERReport
    aggregate: DERReport

    @property
    def der(self) -> float:
        return self.aggregate.der


def posteriors_to_annotation(y: np.ndarray, with_median: bool, hop: float = FRAME_HOP,
                             window: int = 11) -> Annotation:
    decision = binarize(y)
    if with_median:
        decision = median_filter(decision, window)
    return matrix_to_annotation(decision, hop)


def evaluate(model, sessions, n_channels: int, with_median: bool = False,
             collar: float = DEFAULT_COLLAR, predictor=None) -> EvalResult:
    """Score ``model`` on ``sessions`` using their first ``n_channels`` channels.

    ``sessions`` yields objects with ``session_id``, ``features`` (``[C, F, T]``)
    and ``reference`` (:class:`Annotation`).  ``predictor(session, x)``
    overrides the model, mapping a session and its ``[1, n_channels, F, T]``
    input to ``[S, T]`` posteriors.
    """
    reports = {}
    for sess in sessions:
        if sess.features.shape[0] < n_channels:
            raise ValueError(f"{sess.session_id} has only {sess.features.shape[0]} channels")
        x = sess.features[None, :n_channels]
        y = predictor(sess, x) if predictor is not None else model.infer(x)[0]
        reports[sess.session_id] = der(sess.reference, posteriors_to_annotation(y, with_median),
                                       collar)
    return EvalResult(n_channels, with_median, reports, DERReport.pooled(reports.values()))


def evaluate_grid(model, sessions, channel_counts, collar: float = DEFAULT_COLLAR) -> dict:
    """``{(n_channels, with_median): EvalResult}``, one forward pass per channel count."""
    results = {}
    for n_ch in channel_counts:
        posteriors = {s.session_id: model.infer(s.features[None, :n_ch])[0] for s in sessions}
        for with_median in (False, True):
            results[(n_ch, with_median)] = evaluate(
                model, sessions, n_ch, with_median, collar,
                predictor=lambda sess, _x: posteriors[sess.session_id])
    return results
