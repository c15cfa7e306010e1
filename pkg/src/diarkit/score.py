"""RTTM I/O and diarization error rate with collar and optimal speaker mapping.

DER is integrated exactly: the timeline is cut at every reference, hypothesis
and collar boundary, and every elementary interval has constant speaker sets.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .assignment import hungarian


class RttmParseError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class RttmSegment:
    session: str
    onset: float
    duration: float
    speaker: str

    def __post_init__(self):
        if not (math.isfinite(self.onset) and math.isfinite(self.duration)):
            raise ValueError("segment onset and duration must be finite")
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if self.duration <= 0:
            raise ValueError(f"non-positive duration {self.duration}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


def parse_rttm(text: str) -> list[RttmSegment]:
    segments = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise RttmParseError(f"line {lineno}: expected at least 8 fields, got {len(fields)}")
        try:
            onset, dur = float(fields[3]), float(fields[4])
            segments.append(RttmSegment(fields[1], onset, dur, fields[7]))
        except ValueError as exc:
            raise RttmParseError(f"line {lineno}: {exc}") from exc
    return segments


def read_rttm(path) -> list[RttmSegment]:
    with open(path) as fh:
        return parse_rttm(fh.read())


def format_rttm(segments: Iterable[RttmSegment]) -> str:
    return "".join(
        f"SPEAKER {s.session} 1 {s.onset:.3f} {s.duration:.3f} <NA> <NA> {s.speaker} <NA> <NA>\n"
        for s in segments)


def write_rttm(segments: Iterable[RttmSegment], path) -> None:
    with open(path, "w") as fh:
        fh.write(format_rttm(segments))


# ------------------------------------------------------------------ intervals
def merge_intervals(intervals: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    """Union of closed intervals; touching intervals merge."""
    out: list[list[float]] = []
    for a, b in sorted(intervals):
        if b <= a:
            continue
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def collar_zones(ref: Iterable[RttmSegment], collar: float = 0.25) -> list[tuple[float, float]]:
    """Excluded regions: ``collar`` seconds either side of every reference boundary."""
    if collar < 0:
        raise ValueError("collar must be >= 0")
    if collar == 0:
        return []
    zones = []
    # abutting same-speaker segments are one turn and get one pair of collars
    for ivs in _by_speaker(ref).values():
        for a, b in ivs:
            zones.append((a - collar, a + collar))
            zones.append((b - collar, b + collar))
    return merge_intervals(zones)


def apply_collar(ref: Iterable[RttmSegment], collar: float = 0.25,
                 end: float | None = None) -> list[tuple[float, float]]:
    """Scored regions in [0, end]: the complement of the collar zones."""
    ref = list(ref)
    if end is None:
        end = max((s.end for s in ref), default=0.0) + collar
    scored = []
    cursor = 0.0
    for a, b in collar_zones(ref, collar):
        if a > cursor:
            scored.append((cursor, min(a, end)))
        cursor = max(cursor, b)
    if cursor < end:
        scored.append((cursor, end))
    return [(a, b) for a, b in scored if b > a]


def _by_speaker(segments: Iterable[RttmSegment]) -> dict[str, list[tuple[float, float]]]:
    spk: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for s in segments:
        spk[s.speaker].append((s.onset, s.end))
    return {k: merge_intervals(v) for k, v in spk.items()}


def _elementary(ref_spk, hyp_spk, zones):
    """Yield (start, end, active ref set, active hyp set, scored) for each piece."""
    cuts = {0.0}
    for ivs in list(ref_spk.values()) + list(hyp_spk.values()):
        for a, b in ivs:
            cuts.update((a, b))
    for a, b in zones:
        cuts.update((max(a, 0.0), max(b, 0.0)))
    cuts = sorted(cuts)
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        r = frozenset(k for k, ivs in ref_spk.items() if _covers(ivs, mid))
        h = frozenset(k for k, ivs in hyp_spk.items() if _covers(ivs, mid))
        scored = not _covers(zones, mid)
        yield a, b, r, h, scored


def _covers(intervals, t: float) -> bool:
    # intervals are sorted and disjoint
    lo, hi = 0, len(intervals)
    while lo < hi:
        m = (lo + hi) // 2
        if intervals[m][1] <= t:
            lo = m + 1
        else:
            hi = m
    return lo < len(intervals) and intervals[lo][0] < t < intervals[lo][1]


def optimal_speaker_map(ref: Iterable[RttmSegment], hyp: Iterable[RttmSegment],
                        collar: float = 0.0) -> dict[str, str]:
    """Map hyp speakers to ref speakers maximizing co-active scored time."""
    ref, hyp = list(ref), list(hyp)
    ref_spk, hyp_spk = _by_speaker(ref), _by_speaker(hyp)
    if not ref_spk or not hyp_spk:
        return {}
    zones = collar_zones(ref, collar)
    return _map_from_sets(ref_spk, hyp_spk, list(_elementary(ref_spk, hyp_spk, zones)))


def _map_from_sets(ref_spk, hyp_spk, pieces) -> dict[str, str]:
    ref_names, hyp_names = sorted(ref_spk), sorted(hyp_spk)
    if not ref_names or not hyp_names:
        return {}
    ri = {k: i for i, k in enumerate(ref_names)}
    hi = {k: i for i, k in enumerate(hyp_names)}
    n = max(len(ref_names), len(hyp_names))
    overlap = np.zeros((n, n))
    for a, b, r, h, scored in pieces:
        if not scored:
            continue
        for hs in h:
            for rs in r:
                overlap[hi[hs], ri[rs]] += b - a
    perm = hungarian(-overlap)
    mapping = {}
    for i, j in enumerate(perm):
        if i < len(hyp_names) and j < len(ref_names) and overlap[i, j] > 0:
            mapping[hyp_names[i]] = ref_names[j]
    return mapping


@dataclass
class SessionScore:
    session: str
    scored_time: float
    missed_speech: float
    false_alarm: float
    speaker_confusion: float
    num_ref_speakers: int

    @property
    def der(self) -> float | None:
        if self.scored_time <= 0:
            return None
        return (self.missed_speech + self.false_alarm + self.speaker_confusion) / self.scored_time


@dataclass
class DerReport:
    scored_time: float = 0.0
    missed_speech: float = 0.0
    false_alarm: float = 0.0
    speaker_confusion: float = 0.0
    per_session: dict[str, SessionScore] = field(default_factory=dict)
    buckets: dict[str, "DerReport"] = field(default_factory=dict)

    @property
    def der(self) -> float:
        if self.scored_time <= 0:
            raise ValueError("DER undefined: no scored reference speech")
        return (self.missed_speech + self.false_alarm + self.speaker_confusion) / self.scored_time

    def add(self, s: SessionScore) -> None:
        self.scored_time += s.scored_time
        self.missed_speech += s.missed_speech
        self.false_alarm += s.false_alarm
        self.speaker_confusion += s.speaker_confusion
        self.per_session[s.session] = s

    def to_dict(self) -> dict:
        def comp(r):
            return {"scored": r.scored_time, "miss": r.missed_speech, "fa": r.false_alarm,
                    "conf": r.speaker_confusion,
                    "der": r.der if r.scored_time > 0 else None}

        return {
            "total": comp(self),
            "miss": self.missed_speech,
            "fa": self.false_alarm,
            "conf": self.speaker_confusion,
            "per_session": {k: {"scored": s.scored_time, "miss": s.missed_speech,
                                "fa": s.false_alarm, "conf": s.speaker_confusion,
                                "der": s.der, "num_speakers": s.num_ref_speakers}
                            for k, s in sorted(self.per_session.items())},
            "buckets": {k: comp(r) for k, r in self.buckets.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'bucket':>10} {'scored':>10} {'miss':>8} {'fa':>8} {'conf':>8} {'DER':>8}"]
        for name, r in list(self.buckets.items()) + [("total", self)]:
            der = f"{100 * r.der:7.2f}%" if r.scored_time > 0 else "     n/a"
            lines.append(f"{name:>10} {r.scored_time:10.2f} {r.missed_speech:8.2f} "
                         f"{r.false_alarm:8.2f} {r.speaker_confusion:8.2f} {der}")
        lines.append(f"DER {100 * self.der:.2f}%")
        return "\n".join(lines) + "\n"


def score_session(session: str, ref: list[RttmSegment], hyp: list[RttmSegment],
                  collar: float = 0.25) -> SessionScore:
    ref_spk, hyp_spk = _by_speaker(ref), _by_speaker(hyp)
    zones = collar_zones(ref, collar)
    pieces = list(_elementary(ref_spk, hyp_spk, zones))
    mapping = _map_from_sets(ref_spk, hyp_spk, pieces)
    scored = miss = fa = conf = 0.0
    for a, b, r, h, is_scored in pieces:
        if not is_scored:
            continue
        dt = b - a
        nr, nh = len(r), len(h)
        matched = sum(1 for hs in h if mapping.get(hs) in r)
        scored += nr * dt
        miss += max(0, nr - nh) * dt
        fa += max(0, nh - nr) * dt
        conf += (min(nr, nh) - matched) * dt
    return SessionScore(session, scored, miss, fa, conf, len(ref_spk))


def compute_der(ref: Iterable[RttmSegment], hyp: Iterable[RttmSegment], collar: float = 0.25,
                bucket_rule: Callable[[int], str] | None = None) -> DerReport:
    """Score all sessions; sessions missing from ``hyp`` count as fully missed."""
    ref_by, hyp_by = defaultdict(list), defaultdict(list)
    for s in ref:
        ref_by[s.session].append(s)
    for s in hyp:
        hyp_by[s.session].append(s)
    report = DerReport()
    for session in sorted(set(ref_by) | set(hyp_by)):
        report.add(score_session(session, ref_by[session], hyp_by[session], collar))
    if report.scored_time <= 0:
        raise ValueError("DER undefined: reference has no scored speech")
    if bucket_rule is not None:
        report.buckets = breakdown(report, bucket_rule)
    return report


def breakdown(report: DerReport, bucket_rule: Callable[[int], str]) -> dict[str, DerReport]:
    """Pool session components per bucket of reference speaker count."""
    buckets: dict[str, DerReport] = {}
    for s in report.per_session.values():
        label = bucket_rule(s.num_ref_speakers)
        buckets.setdefault(label, DerReport()).add(s)
    return dict(sorted(buckets.items()))


def voxconverse_buckets(n: int) -> str:
    return "1-10" if n <= 10 else "11+"


def callhome_buckets(n: int) -> str:
    return str(n)
