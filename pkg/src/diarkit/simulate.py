"""Seed-deterministic multi-speaker conversation simulator.

Speakers are synthetic: a pulse-train plus noise source shaped by a
speaker-specific formant envelope and syllabic amplitude modulation.  All
scheduling is done on an integer millisecond grid so the reference RTTM is
exact at 3-decimal precision.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureConfig, logmel, write_wav
from .score import RttmSegment, format_rttm, merge_intervals

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
SPLITS = {"train": 0, "dev": 1, "test": 2}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: int
    seed: int = 0

    @property
    def signature(self) -> dict:
        rng = np.random.default_rng([self.seed, self.id, 7919])
        # primary formant follows a low-discrepancy sequence over the mel axis,
        # so two ids never share it
        mel_lo, mel_hi = 2595 * math.log10(1 + 300 / 700), 2595 * math.log10(1 + 3400 / 700)
        frac = (self.id * _GOLDEN + 0.1) % 1.0
        primary = 700 * (10 ** ((mel_lo + frac * (mel_hi - mel_lo)) / 2595) - 1)
        others = rng.uniform(250.0, 5500.0, size=2)
        return {
            "formants": np.concatenate([[primary], others]),
            "bandwidths": np.concatenate([[0.12 * primary + 60.0], rng.uniform(120.0, 400.0, 2)]),
            "gains": np.array([1.0, *rng.uniform(0.3, 0.7, 2)]),
            "f0": float(rng.uniform(85.0, 260.0)),
            "syllable_rate": float(rng.uniform(3.0, 6.5)),
            "breathiness": float(rng.uniform(0.05, 0.3)),
        }


def synth_utterance(speaker: SyntheticSpeaker, length_s: float, seed: int,
                    sample_rate: int = 16000) -> np.ndarray:
    """Band-limited speaker-coloured signal of ``length_s`` seconds, RMS 1."""
    if length_s <= 0:
        raise ValueError("utterance length must be positive")
    n = int(round(length_s * sample_rate))
    sig = speaker.signature
    rng = np.random.default_rng([speaker.seed, speaker.id, int(seed) & 0xFFFFFFFF, 31])
    t = np.arange(n) / sample_rate
    f0 = sig["f0"] * (1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t
                                          + rng.uniform(0, 2 * np.pi)))
    phase = np.cumsum(f0 / sample_rate)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    source = pulses * math.sqrt(sample_rate / sig["f0"]) \
        + sig["breathiness"] * rng.standard_normal(n)
    spec = np.fft.rfft(source)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    env = np.full(freqs.shape, 0.01)
    for fc, bw, g in zip(sig["formants"], sig["bandwidths"], sig["gains"]):
        env += g * np.exp(-0.5 * ((freqs - fc) / bw) ** 2)
    env[freqs < 60.0] = 0.0
    y = np.fft.irfft(spec * env, n=n)
    rate = sig["syllable_rate"]
    am = 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    fade = min(n // 2, int(0.02 * sample_rate))
    if fade > 0:
        ramp = np.linspace(0.0, 1.0, fade)
        am[:fade] *= ramp
        am[n - fade:] *= ramp[::-1]
    y = y * am
    rms = math.sqrt(float(np.mean(y * y)))
    return y / rms if rms > 0 else y


@dataclass
class ConversationSpec:
    num_speakers: int = 2
    overlap_ratio: float = 0.0
    duration: float = 60.0
    utterance_range: tuple[float, float] = (1.5, 5.0)
    pause_range: tuple[float, float] = (0.6, 2.0)
    snr_db: float | None = 25.0
    seed: int = 0
    sample_rate: int = 16000
    speaker_pool: int = 40
    speaker_seed: int = 0
    session: str = "sess"

    def validate(self) -> None:
        if self.num_speakers < 1:
            raise SpecError("num_speakers must be >= 1")
        if self.num_speakers > self.speaker_pool:
            raise SpecError("num_speakers exceeds speaker_pool")
        if not 0.0 <= self.overlap_ratio < 0.5:
            raise SpecError(f"overlap_ratio must lie in [0, 0.5), got {self.overlap_ratio}")
        if self.num_speakers == 1 and self.overlap_ratio > 0:
            raise SpecError("overlap_ratio > 0 is infeasible with a single speaker")
        if self.duration <= 0:
            raise SpecError("duration must be positive")
        lo, hi = self.utterance_range
        if not 0 < lo <= hi:
            raise SpecError("bad utterance_range")
        lo, hi = self.pause_range
        if not 0 <= lo <= hi:
            raise SpecError("bad pause_range")


@dataclass
class SimulatedConversation:
    session: str
    audio: np.ndarray
    sample_rate: int
    segments: list[RttmSegment]
    overlap_ratio: float
    target_reached: bool
    scheduled_speech: dict[str, float] = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return len(self.audio) / self.sample_rate


def overlap_ratio(segments: list[RttmSegment]) -> float:
    """Fraction of speech time with two or more active speakers (event sweep)."""
    events = []
    for s in segments:
        events.append((s.onset, 1))
        events.append((s.end, -1))
    events.sort()
    active = 0
    speech = overlap = 0.0
    prev = None
    for t, delta in events:
        if prev is not None and t > prev:
            if active >= 1:
                speech += t - prev
            if active >= 2:
                overlap += t - prev
        active += delta
        prev = t
    return overlap / speech if speech > 0 else 0.0


def _place(lengths, speakers, pauses, overlaps, amount, order, duration_ms):
    """Lay turns out on the ms grid; the first ``amount`` transitions (fractional
    for the last one) in ``order`` are pulled into overlap."""
    ov = np.zeros(len(lengths), dtype=np.int64)
    whole = int(math.floor(amount))
    for k in order[:whole]:
        ov[k] = overlaps[k]
    if whole < len(order):
        k = order[whole]
        ov[k] = int(round(overlaps[k] * (amount - whole)))
    placed = []
    last_end: dict[int, int] = {}
    prev_end = 0
    min_gap = 1
    for k, (ln, spk) in enumerate(zip(lengths, speakers)):
        if k == 0:
            onset = 0 if pauses[0] == 0 else int(pauses[0])
        elif ov[k] > 0:
            onset = prev_end - int(ov[k])
        else:
            onset = prev_end + int(pauses[k])
        onset = max(onset, last_end.get(spk, -10 ** 9) + max(min_gap, int(pauses[k])))
        if onset >= duration_ms - 200:
            break
        end = min(onset + int(ln), duration_ms)
        placed.append((spk, onset, end))
        last_end[spk] = end
        prev_end = max(prev_end, end)
    return placed


def mix_conversation(spec: ConversationSpec) -> SimulatedConversation:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 11])
    pool = np.random.default_rng([spec.speaker_seed, spec.seed, 3]).permutation(spec.speaker_pool)
    ids = [int(i) for i in pool[: spec.num_speakers]]
    duration_ms = int(round(spec.duration * 1000))
    utt_lo, utt_hi = (int(round(v * 1000)) for v in spec.utterance_range)
    pau_lo, pau_hi = (int(round(v * 1000)) for v in spec.pause_range)

    speakers: list[int] = list(rng.permutation(ids))
    total = 0
    while total < 2 * duration_ms + 10_000 or len(speakers) < len(ids):
        if len(speakers) >= len(ids):
            choices = [i for i in ids if i != speakers[-1]] or ids
            speakers.append(int(rng.choice(choices)))
        total += utt_hi
    lengths = rng.integers(utt_lo, utt_hi + 1, size=len(speakers))
    pauses = rng.integers(pau_lo, pau_hi + 1, size=len(speakers))
    pauses[0] = 0
    frac = rng.uniform(0.3, 0.9, size=len(speakers))
    overlaps = np.zeros(len(speakers), dtype=np.int64)
    for k in range(1, len(speakers)):
        overlaps[k] = int(frac[k] * min(lengths[k - 1], lengths[k]))
    order = [int(k) for k in rng.permutation(np.arange(1, len(speakers)))]

    def realize(amount):
        placed = _place(lengths, speakers, pauses, overlaps, amount, order, duration_ms)
        segs = [RttmSegment(spec.session, a / 1000.0, (b - a) / 1000.0, f"spk{s:03d}")
                for s, a, b in placed if b > a]
        return placed, segs, overlap_ratio(segs)

    target = spec.overlap_ratio
    placed, segs, ratio = realize(0.0)
    reached = True
    if target > 0:
        lo, hi = 0.0, float(len(order))
        best = (abs(ratio - target), placed, segs, ratio)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            p, s, r = realize(mid)
            if abs(r - target) < best[0]:
                best = (abs(r - target), p, s, r)
            if r < target:
                lo = mid
            else:
                hi = mid
            if best[0] < 0.002:
                break
        _, placed, segs, ratio = best
        reached = abs(ratio - target) <= 0.05

    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    speech = np.zeros(n)
    scheduled: dict[str, float] = {}
    for k, (spk, a, b) in enumerate(placed):
        if b <= a:
            continue
        y = synth_utterance(SyntheticSpeaker(spk, spec.speaker_seed), (b - a) / 1000.0,
                            seed=spec.seed * 100_003 + k, sample_rate=sr)
        i0 = a * sr // 1000
        speech[i0: i0 + len(y)] += y[: n - i0]
        label = f"spk{spk:03d}"
        scheduled[label] = scheduled.get(label, 0.0) + (b - a) / 1000.0
    mix = speech
    if spec.snr_db is not None:
        active = np.abs(speech) > 0
        power = float(np.mean(speech[active] ** 2)) if active.any() else 1.0
        noise_rng = np.random.default_rng([spec.seed, 17])
        mix = speech + noise_rng.standard_normal(n) * math.sqrt(power / 10 ** (spec.snr_db / 10))
    peak = float(np.max(np.abs(mix))) if n else 0.0
    if peak > 0:
        mix = mix * (0.9 / peak)
    segs = sorted(segs, key=lambda s: (s.onset, s.speaker))
    return SimulatedConversation(spec.session, mix, sr, segs, ratio, reached, scheduled)


# ------------------------------------------------------------------- datasets
@dataclass
class SimulationConfig:
    n_conversations: int = 10
    min_speakers: int = 2
    max_speakers: int = 10
    max_overlap: float = 0.3
    overlap_fixed: float | None = None
    duration: float = 60.0
    utterance_min: float = 1.5
    utterance_max: float = 5.0
    pause_min: float = 0.6
    pause_max: float = 2.0
    snr_db: float | None = 25.0
    sample_rate: int = 16000
    speaker_pool: int = 40
    speaker_seed: int = 0
    seed: int = 0
    split: str = "train"
    write_features: bool = True

    def conversation_specs(self) -> list[ConversationSpec]:
        if self.split not in SPLITS:
            raise SpecError(f"unknown split {self.split!r}")
        if not 1 <= self.min_speakers <= self.max_speakers:
            raise SpecError("need 1 <= min_speakers <= max_speakers")
        if not 0 <= self.max_overlap < 0.5:
            raise SpecError(f"max_overlap must lie in [0, 0.5), got {self.max_overlap}")
        specs = []
        root = np.random.SeedSequence([self.seed, SPLITS[self.split]])
        for i, child in enumerate(root.spawn(self.n_conversations)):
            rng = np.random.default_rng(child)
            n_spk = int(rng.integers(self.min_speakers, self.max_speakers + 1))
            if self.overlap_fixed is not None:
                ov = self.overlap_fixed
            else:
                ov = float(rng.uniform(0.0, self.max_overlap))
            if n_spk == 1:
                ov = 0.0
            conv_seed = int(child.generate_state(1)[0])
            specs.append(ConversationSpec(
                num_speakers=n_spk, overlap_ratio=ov, duration=self.duration,
                utterance_range=(self.utterance_min, self.utterance_max),
                pause_range=(self.pause_min, self.pause_max), snr_db=self.snr_db,
                seed=conv_seed, sample_rate=self.sample_rate, speaker_pool=self.speaker_pool,
                speaker_seed=self.speaker_seed, session=f"{self.split}_{i:05d}"))
        return specs


@dataclass
class ManifestEntry:
    session: str
    audio: str
    rttm: str

    @property
    def features(self) -> str:
        return os.path.splitext(self.audio)[0] + ".npy"


def read_manifest(path) -> list[ManifestEntry]:
    base = Path(path).parent
    entries = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            sid, audio, rttm = line.rstrip("\n").split("\t")
            entries.append(ManifestEntry(sid, str(base / audio) if not os.path.isabs(audio) else audio,
                                         str(base / rttm) if not os.path.isabs(rttm) else rttm))
    return entries


def _generate_one(args):
    spec, out_dir, write_features, feat_cfg = args
    conv = mix_conversation(spec)
    wav_path = out_dir / "wav" / f"{spec.session}.wav"
    rttm_path = out_dir / "rttm" / f"{spec.session}.rttm"
    write_wav(wav_path, conv.audio, conv.sample_rate)
    rttm_path.write_text(format_rttm(conv.segments))
    if write_features:
        # features are computed from the quantized PCM so they match a WAV reload
        pcm = np.clip(np.round(conv.audio * 32767.0), -32768, 32767) / 32768.0
        np.save(out_dir / "wav" / f"{spec.session}.npy",
                logmel(pcm, feat_cfg).astype(np.float32))
    return spec, conv


def build_dataset(out_dir, cfg: SimulationConfig, jobs: int = 1,
                  feature_config: FeatureConfig | None = None) -> Path:
    """Write WAV, RTTM (and optionally log-mel .npy) files plus ``manifest.tsv``."""
    out_dir = Path(out_dir)
    specs = cfg.conversation_specs()
    feat_cfg = feature_config or FeatureConfig(sample_rate=cfg.sample_rate)
    try:
        (out_dir / "wav").mkdir(parents=True, exist_ok=True)
        (out_dir / "rttm").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    work = [(s, out_dir, cfg.write_features, feat_cfg) for s in specs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_generate_one, work))
    else:
        results = [_generate_one(w) for w in work]
    manifest = out_dir / "manifest.tsv"
    with open(manifest, "w") as fh:
        for spec, _ in results:
            fh.write(f"{spec.session}\twav/{spec.session}.wav\trttm/{spec.session}.rttm\n")
    with open(out_dir / "stats.tsv", "w") as fh:
        fh.write("session\tnum_speakers\ttarget_overlap\trealized_overlap\treached\n")
        for spec, conv in results:
            fh.write(f"{spec.session}\t{spec.num_speakers}\t{spec.overlap_ratio:.4f}\t"
                     f"{conv.overlap_ratio:.4f}\t{int(conv.target_reached)}\n")
    return manifest


def speech_per_speaker(segments: list[RttmSegment]) -> dict[str, float]:
    out: dict[str, list] = {}
    for s in segments:
        out.setdefault(s.speaker, []).append((s.onset, s.end))
    return {k: sum(b - a for a, b in merge_intervals(v)) for k, v in out.items()}
