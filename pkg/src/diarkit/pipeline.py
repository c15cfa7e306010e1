"""From audio to RTTM: first-pass clustering, profiles, chunked TS-VAD inference,
binarization, median filtering and stitching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import tensor as tn
from .features import FeatureConfig, logmel
from .score import RttmSegment, merge_intervals
from .tensor import Tensor


# ------------------------------------------------------------------- framing
def chunk(length_frames: int, chunk_frames: int) -> list[tuple[int, int]]:
    """Consecutive [start, end) ranges tiling [0, length); the last may be short."""
    if chunk_frames < 1:
        raise ValueError("chunk_frames must be >= 1")
    return [(a, min(a + chunk_frames, length_frames)) for a in range(0, length_frames, chunk_frames)]


def binarize(probs, thr: float = 0.5) -> np.ndarray:
    """Element-wise ``probs >= thr`` as 0/1 integers."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (p >= thr).astype(np.int8)


def median_filter(decisions, taps: int = 11) -> np.ndarray:
    """Sliding median along time (axis 0) per speaker column, edges replicated."""
    if taps < 1 or taps % 2 == 0:
        raise ValueError(f"median filter needs an odd number of taps, got {taps}")
    d = np.asarray(decisions)
    squeeze = d.ndim == 1
    if squeeze:
        d = d[:, None]
    if d.shape[0] == 0:
        return d.copy()
    half = taps // 2
    padded = np.concatenate([np.repeat(d[:1], half, 0), d, np.repeat(d[-1:], half, 0)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, taps, axis=0)
    # binary input: the median is the majority vote
    out = (windows.sum(axis=-1) * 2 > taps).astype(d.dtype)
    return out[:, 0] if squeeze else out


def frames_to_segments(decisions, speakers: list[str], session: str,
                       frame_shift: float, offset: float = 0.0) -> list[RttmSegment]:
    d = np.asarray(decisions)
    segs = []
    for k, spk in enumerate(speakers):
        col = np.concatenate([[0], (d[:, k] > 0).astype(np.int8), [0]])
        edges = np.flatnonzero(np.diff(col))
        for a, b in zip(edges[::2], edges[1::2]):
            onset = round(offset + a * frame_shift, 6)
            segs.append(RttmSegment(session, onset, round((b - a) * frame_shift, 6), spk))
    return sorted(segs, key=lambda s: (s.onset, s.speaker))


def segments_to_frames(segments, speakers: list[str], n_frames: int, frame_shift: float,
                       offset: float = 0.0) -> np.ndarray:
    """Frame t is active when its center lies inside a segment."""
    out = np.zeros((n_frames, len(speakers)), dtype=np.int8)
    col = {s: i for i, s in enumerate(speakers)}
    centers = offset + (np.arange(n_frames) + 0.5) * frame_shift
    for s in segments:
        if s.speaker in col:
            out[(centers > s.onset) & (centers < s.end), col[s.speaker]] = 1
    return out


# ---------------------------------------------------------------- first pass
def energy_vad(feats: np.ndarray, threshold_db: float = 12.0, hangover: int = 30,
               min_level: float = -12.0) -> np.ndarray:
    """Frame-level speech mask from log-mel energy, with a hangover in frames.

    A frame is speech when its log energy is ``threshold_db`` above the 5th
    percentile (the noise floor); audio whose loudest frame is below
    ``min_level`` (natural-log units) is all silence.
    """
    energy = np.log(np.maximum(np.exp(feats).sum(axis=1), 1e-30))
    if energy.max() < min_level:
        return np.zeros(len(energy), dtype=bool)
    floor = np.percentile(energy, 5)
    raw = energy > floor + threshold_db / (10.0 / np.log(10.0))
    mask = raw.copy()
    last = -hangover - 1
    for t in range(len(raw)):
        if raw[t]:
            last = t
        elif t - last <= hangover:
            mask[t] = True
    return mask


def mask_to_regions(mask: np.ndarray, frame_shift: float) -> list[tuple[float, float]]:
    col = np.concatenate([[0], mask.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(col))
    return [(a * frame_shift, b * frame_shift) for a, b in zip(edges[::2], edges[1::2])]


def split_regions(regions, length: float) -> list[tuple[float, float]]:
    """Cut speech regions into pieces of about ``length`` seconds."""
    out = []
    for a, b in regions:
        n = max(1, int(round((b - a) / length)))
        edges = np.linspace(a, b, n + 1)
        out.extend(zip(edges[:-1], edges[1:]))
    return out


@dataclass
class FirstPassResult:
    segments: dict[str, list[RttmSegment]] = field(default_factory=dict)
    durations: dict[str, float] = field(default_factory=dict)
    profiles: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def speakers(self) -> list[str]:
        return sorted(self.segments)


def ahc_firstpass(segment_embeddings, segments: list[tuple[float, float]], threshold: float = 0.4,
                  session: str = "sess") -> FirstPassResult:
    """Average-linkage AHC over cosine distance; merging stops above ``threshold``."""
    emb = np.asarray(segment_embeddings, dtype=np.float64)
    if len(segments) == 0:
        return FirstPassResult()
    if len(segments) == 1:
        labels = np.array([1])
    else:
        z = linkage(emb, method="average", metric="cosine")
        labels = fcluster(z, t=threshold, criterion="distance") if threshold > 0 \
            else np.arange(1, len(segments) + 1)
    # relabel clusters by first appearance
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    result = FirstPassResult()
    by_spk: dict[str, list[tuple[float, float]]] = {}
    for lab, (a, b) in zip(labels, segments):
        by_spk.setdefault(f"fp{order[int(lab)]:02d}", []).append((a, b))
    for spk, ivs in by_spk.items():
        merged = merge_intervals(ivs)
        result.segments[spk] = [RttmSegment(session, round(a, 6), round(b - a, 6), spk)
                                for a, b in merged if b - a > 0]
        result.durations[spk] = float(sum(b - a for a, b in merged))
    return result


def profiles_from_firstpass(emb, fp: FirstPassResult, frame_shift: float,
                            min_dur: float = 2.0) -> tuple[np.ndarray, list[str], list[str]]:
    """Mean embedding over each speaker's detected regions.

    Speakers with less than ``min_dur`` seconds in total get no profile and
    are returned in the excluded list.  Returns (profiles, kept, excluded).
    """
    emb = np.asarray(emb.data if isinstance(emb, Tensor) else emb)
    kept, excluded, rows = [], [], []
    for spk in fp.speakers:
        if fp.durations.get(spk, 0.0) < min_dur:
            excluded.append(spk)
            continue
        frames = segments_to_frames(fp.segments[spk], [spk], len(emb), frame_shift)[:, 0] > 0
        if not frames.any():
            excluded.append(spk)
            continue
        rows.append(emb[frames].mean(axis=0))
        kept.append(spk)
        fp.profiles[spk] = rows[-1]
    profiles = np.stack(rows) if rows else np.zeros((0, emb.shape[1]))
    return profiles, kept, excluded


def stitch(tsvad_segments: list[RttmSegment], excluded_segments: list[RttmSegment]) -> list[RttmSegment]:
    """Union of both lists with same-speaker overlapping/abutting segments merged."""
    a = {s.speaker for s in tsvad_segments}
    b = {s.speaker for s in excluded_segments}
    if a & b:
        raise ValueError(f"speaker labels collide between inputs: {sorted(a & b)}")
    grouped: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for s in list(tsvad_segments) + list(excluded_segments):
        grouped.setdefault((s.session, s.speaker), []).append((s.onset, s.end))
    out = []
    for (session, spk), ivs in grouped.items():
        for x, y in merge_intervals(ivs):
            out.append(RttmSegment(session, round(x, 6), round(y - x, 6), spk))
    return sorted(out, key=lambda s: (s.session, s.onset, s.speaker))


# ------------------------------------------------------------------ inference
@dataclass
class InferenceConfig:
    threshold: float = 0.5
    median_taps: int = 11
    chunk_seconds: float = 60.0
    min_profile_dur: float = 2.0
    ahc_threshold: float = 0.4
    vad_threshold_db: float = 12.0
    vad_hangover: int = 30
    segment_length: float = 1.0
    eda_threshold: float = 0.5
    max_attractors: int = 12
    collar: float = 0.25


def segment_embeddings(emb: np.ndarray, segments, frame_shift: float) -> np.ndarray:
    """Mean frame embedding over each segment (at least one frame per segment)."""
    out = []
    for a, b in segments:
        i = min(int(a / frame_shift), len(emb) - 1)
        j = max(i + 1, int(b / frame_shift))
        out.append(emb[i:j].mean(axis=0))
    return np.stack(out) if out else np.zeros((0, emb.shape[1]))


def tsvad_chunked(model, feats: np.ndarray, profiles: np.ndarray, chunk_frames: int) -> np.ndarray:
    """Run TS-VAD on feature chunks and concatenate the activity matrices."""
    factor = model.cfg.downsample_factor
    total = len(feats) // factor
    outs = []
    with tn.no_grad():
        for a, b in chunk(total, chunk_frames):
            piece = feats[a * factor: b * factor]
            outs.append(model(Tensor(piece), Tensor(profiles)).data)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, len(profiles)))


def infer_session(session: str, model, cfg: InferenceConfig = InferenceConfig(),
                  audio=None, features=None, feature_config: FeatureConfig = FeatureConfig(),
                  profiles: np.ndarray | None = None, speakers: list[str] | None = None
                  ) -> list[RttmSegment]:
    """Diarize one session.

    TS-VAD models run the AHC first pass unless ``profiles`` (with matching
    ``speakers`` labels) are supplied.  EDA models run single-pass.
    """
    from .eda import EendEdaModel

    try:
        if features is None:
            if audio is None:
                raise ValueError("need audio or features")
            features = logmel(audio, feature_config)
        feats = np.asarray(features, dtype=np.float64)
        hop = feature_config.hop_ms / 1000.0
        if isinstance(model, EendEdaModel):
            return _infer_eda(session, model, feats, cfg, hop)
        return _infer_tsvad(session, model, feats, cfg, hop, profiles, speakers)
    except Exception as exc:
        raise RuntimeError(f"session {session}: {exc}") from exc


def _postprocess(probs, speakers, session, cfg, frame_shift):
    if probs.shape[1] == 0:
        return []
    dec = median_filter(binarize(probs, cfg.threshold), cfg.median_taps)
    return frames_to_segments(dec, speakers, session, frame_shift)


def _infer_tsvad(session, model, feats, cfg, hop, profiles, speakers):
    factor = model.cfg.downsample_factor
    frame_shift = hop * factor
    excluded_segments: list[RttmSegment] = []
    normed = feats - feats.mean(axis=0, keepdims=True)
    if profiles is None:
        mask = energy_vad(feats, cfg.vad_threshold_db, cfg.vad_hangover)
        regions = mask_to_regions(mask, hop)
        if not regions:
            return []
        pieces = split_regions(regions, cfg.segment_length)
        with tn.no_grad():
            emb = model.embed(Tensor(normed)).data
        fp = ahc_firstpass(segment_embeddings(emb, pieces, frame_shift), pieces,
                           cfg.ahc_threshold, session)
        profiles, speakers, excluded = profiles_from_firstpass(emb, fp, frame_shift, cfg.min_profile_dur)
        for spk in excluded:
            excluded_segments.extend(fp.segments[spk])
    if len(profiles) == 0:
        return stitch([], excluded_segments)
    chunk_frames = max(1, int(round(cfg.chunk_seconds / frame_shift)))
    probs = tsvad_chunked(model, normed, np.asarray(profiles), chunk_frames)
    segs = _postprocess(probs, list(speakers), session, cfg, frame_shift)
    return stitch(segs, excluded_segments)


def _infer_eda(session, model, feats, cfg, hop):
    stacked = model.prepare(feats)
    frame_shift = hop * model.cfg.subsample
    with tn.no_grad():
        probs, _ = model.infer(Tensor(stacked), cfg.eda_threshold, cfg.max_attractors)
    speakers = [f"spk{k:02d}" for k in range(probs.shape[1])]
    return _postprocess(probs.data, speakers, session, cfg, frame_shift)
