"""Training loops for TS-VAD and EEND-EDA models on simulated datasets."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .eda import EendEdaModel, batch_pit_loss, existence_loss
from .features import FeatureConfig, logmel, read_wav
from .score import RttmSegment, read_rttm
from .simulate import read_manifest
from .tensor import Adam, LinearWarmupDecay, Tensor, TrainingError
from .tsvad import TsVadModel, bce_sum_loss, frame_labels, training_profiles

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 2e-4
    warmup_steps: int = 20_000
    total_steps: int = 200_000
    batch: int = 32
    chunk_seconds: float = 60.0
    seed: int = 0
    existence_weight: float = 1.0
    clip_norm: float = 5.0


@dataclass
class Session:
    session: str
    feats: np.ndarray          # [T0, n_mels], mean-normalized, float32
    segments: list[RttmSegment]

    @property
    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})


def normalize(feats: np.ndarray) -> np.ndarray:
    return feats - feats.mean(axis=0, keepdims=True)


def load_sessions(manifest, feature_config: FeatureConfig = FeatureConfig()) -> list[Session]:
    """Read features (cached .npy when present and matching, else from WAV) and RTTMs."""
    sessions = []
    for entry in read_manifest(manifest):
        feats = None
        npy = Path(entry.features)
        if npy.exists():
            cached = np.load(npy)
            if cached.shape[1] == feature_config.n_mels:
                feats = cached
        if feats is None:
            audio, _ = read_wav(entry.audio, feature_config.sample_rate)
            feats = logmel(audio, feature_config)
        segs = [s for s in read_rttm(entry.rttm) if s.session == entry.session]
        sessions.append(Session(entry.session, normalize(feats).astype(np.float32), segs))
    return sessions


@dataclass
class Example:
    feats: np.ndarray          # model input for the chunk
    labels: np.ndarray         # [T, S] at the model frame rate, active speakers only

    @property
    def n_speakers(self) -> int:
        return self.labels.shape[1]


def make_examples(sessions: list[Session], frame_factor: int, hop: float, chunk_seconds: float,
                  prepare: Callable[[np.ndarray], np.ndarray] | None = None) -> list[Example]:
    """Cut sessions into chunks; labels at hop * frame_factor seconds per frame."""
    shift = hop * frame_factor
    chunk_frames = max(1, int(round(chunk_seconds / shift)))
    out = []
    for sess in sessions:
        total = len(sess.feats) // frame_factor
        labels = frame_labels(sess.segments, sess.speakers, total, shift)
        for a in range(0, total, chunk_frames):
            b = min(a + chunk_frames, total)
            if b - a < max(1, chunk_frames // 4):
                continue
            lab = labels[a:b]
            lab = lab[:, lab.sum(axis=0) > 0]
            feats = sess.feats[a * frame_factor: b * frame_factor]
            if prepare is not None:
                feats = prepare(feats)
            out.append(Example(np.asarray(feats), lab))
    return out


def batches(examples: list[Example], batch: int, rng: np.random.Generator):
    """Endless stream of index batches with a uniform speaker count inside each batch."""
    groups: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        groups.setdefault(ex.n_speakers, []).append(i)
    while True:
        epoch = []
        for n in sorted(groups):
            idx = list(rng.permutation(groups[n]))
            epoch.extend(idx[i: i + batch] for i in range(0, len(idx), batch))
        for j in rng.permutation(len(epoch)):
            yield epoch[j]


def _pad(arrays: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(a) for a in arrays)
    out = np.zeros((len(arrays), n, *arrays[0].shape[1:]))
    mask = np.zeros((len(arrays), n))
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
        mask[i, : len(a)] = 1.0
    return out, mask


class LossLog:
    def __init__(self, path=None):
        self.rows: list[tuple[int, float, float]] = []
        self._fh = open(path, "w", newline="") if path else None
        if self._fh:
            self._writer = csv.writer(self._fh)
            self._writer.writerow(["step", "loss", "lr"])

    def add(self, step: int, loss: float, lr: float) -> None:
        self.rows.append((step, loss, lr))
        if self._fh:
            self._writer.writerow([step, repr(loss), repr(lr)])
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _optimizer(model, cfg: TrainConfig) -> Adam:
    return Adam(model.parameters(), LinearWarmupDecay(cfg.peak_lr, cfg.warmup_steps, cfg.total_steps),
                clip_norm=cfg.clip_norm)


def tsvad_step(model: TsVadModel, batch_examples: list[Example]) -> tn.Tensor:
    feats, _ = _pad([ex.feats for ex in batch_examples])
    labels, mask = _pad([ex.labels for ex in batch_examples])
    emb = model.embed(Tensor(feats))
    t = emb.shape[1]
    profiles = []
    for b, ex in enumerate(batch_examples):
        n = len(ex.labels)
        prof, kept, _ = training_profiles(emb[b, :n], ex.labels)
        profiles.append(prof)
    prof = tn.stack(profiles, axis=0)
    pred = model.matcher(emb, prof)
    return bce_sum_loss(pred, labels[:, :t], mask[:, :t])


def eda_step(model: EendEdaModel, batch_examples: list[Example], rng: np.random.Generator,
             alpha: float = 1.0) -> tn.Tensor:
    stacked, _ = _pad([ex.feats for ex in batch_examples])
    labels, mask = _pad([ex.labels for ex in batch_examples])
    n = batch_examples[0].n_speakers
    act, probs = model.forward_train(Tensor(stacked), n, rng)
    loss = existence_loss(probs, n) * alpha
    if n > 0:
        pit, _ = batch_pit_loss(act, labels, mask)
        loss = pit + loss
    return loss


def train(model, examples: list[Example], cfg: TrainConfig, steps: int | None = None,
          log_path=None, on_step: Callable[[int, float], None] | None = None) -> LossLog:
    """Run ``steps`` updates (default: cfg.total_steps).  Raises TrainingError on NaN."""
    rng = np.random.default_rng(cfg.seed)
    opt = _optimizer(model, cfg)
    stream = batches(examples, cfg.batch, rng)
    losses = LossLog(log_path)
    is_eda = isinstance(model, EendEdaModel)
    try:
        for step in range(1, (steps or cfg.total_steps) + 1):
            idx = next(stream)
            batch_examples = [examples[i] for i in idx]
            opt.zero_grad()
            if is_eda:
                loss = eda_step(model, batch_examples, rng, cfg.existence_weight)
            else:
                loss = tsvad_step(model, batch_examples)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}")
            loss.backward()
            lr = opt.step()
            losses.add(step, value, lr)
            if on_step is not None:
                on_step(step, value)
    finally:
        losses.close()
    return losses


def examples_for(model, sessions: list[Session], chunk_seconds: float, hop: float) -> list[Example]:
    """Chunked examples at the model's output frame rate."""
    if isinstance(model, EendEdaModel):
        return make_examples(sessions, model.cfg.subsample, hop, chunk_seconds, model.prepare)
    return make_examples(sessions, model.cfg.downsample_factor, hop, chunk_seconds)
