"""Scaled-down end-to-end experiments on simulated conversations.

Each experiment simulates (or reuses) a dataset, trains a toy model, and
evaluates it on held-out conversations.  The returned result dataclasses are
what the scripts print and what the acceptance tests check.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .eda import EendEdaModel, eda_preset
from .features import FeatureConfig
from .pipeline import InferenceConfig, infer_session
from .score import DerReport, callhome_buckets, compute_der
from .simulate import SimulationConfig, build_dataset, read_manifest
from .training import Session, TrainConfig, examples_for, load_sessions, train
from .tsvad import TsVadModel, frame_labels, preset, training_profiles

log = logging.getLogger(__name__)


def _dataset(out_dir: Path, cfg: SimulationConfig, features: FeatureConfig, jobs: int) -> Path:
    manifest = out_dir / "manifest.tsv"
    if manifest.exists():
        return manifest
    return build_dataset(out_dir, cfg, jobs=jobs, feature_config=features)


def _progress(every: int, start: float):
    def on_step(step: int, loss: float) -> None:
        if step % every == 0:
            log.info("step %d loss %.4f (%.0f s)", step, loss, time.time() - start)
    return on_step


# ---------------------------------------------------------------- TS-VAD
@dataclass
class TsVadToySpec:
    n_train: int = 200
    n_test: int = 20
    duration: float = 60.0
    min_speakers: int = 2
    max_speakers: int = 3
    max_overlap: float = 0.3
    seed: int = 1
    variant: str = "blstm_time_trans_spk"
    steps: int = 300
    batch: int = 4
    peak_lr: float = 3e-3
    warmup_steps: int = 30
    model_seed: int = 0
    collar: float = 0.25


@dataclass
class TsVadToyResult:
    oracle: DerReport
    first_pass: DerReport
    seconds: float
    timings: dict[str, float] = field(default_factory=dict)


def oracle_profiles(model: TsVadModel, session: Session) -> tuple[np.ndarray, list[str]]:
    """Training-rule profiles from the reference labels of a whole session."""
    factor = model.cfg.downsample_factor
    shift = 0.01 * factor
    with tn.no_grad():
        emb = model.embed(tn.Tensor(session.feats.astype(np.float64)))
    labels = frame_labels(session.segments, session.speakers, emb.shape[0], shift)
    prof, kept, _ = training_profiles(emb, labels)
    return prof.data, [session.speakers[k] for k in kept]


def run_tsvad_toy(work_dir, spec: TsVadToySpec = TsVadToySpec(), jobs: int = 1) -> TsVadToyResult:
    start = time.time()
    work_dir = Path(work_dir)
    feats_cfg = FeatureConfig()
    timings = {}
    sim = dict(min_speakers=spec.min_speakers, max_speakers=spec.max_speakers,
               max_overlap=spec.max_overlap, duration=spec.duration, seed=spec.seed)
    train_manifest = _dataset(work_dir / "train", SimulationConfig(n_conversations=spec.n_train,
                                                                   split="train", **sim), feats_cfg, jobs)
    test_manifest = _dataset(work_dir / "test", SimulationConfig(n_conversations=spec.n_test,
                                                                 split="test", **sim), feats_cfg, jobs)
    timings["simulate"] = time.time() - start

    model = TsVadModel(preset(spec.variant, "toy"), seed=spec.model_seed)
    sessions = load_sessions(train_manifest, feats_cfg)
    examples = examples_for(model, sessions, spec.duration, feats_cfg.hop_ms / 1000.0)
    cfg = TrainConfig(peak_lr=spec.peak_lr, warmup_steps=spec.warmup_steps,
                      total_steps=spec.steps, batch=spec.batch)
    t = time.time()
    train(model, examples, cfg, on_step=_progress(25, start))
    timings["train"] = time.time() - t

    t = time.time()
    test = load_sessions(test_manifest, feats_cfg)
    refs, oracle_hyp, firstpass_hyp = [], [], []
    for s in test:
        profiles, speakers = oracle_profiles(model, s)
        oracle_hyp += infer_session(s.session, model, features=s.feats, profiles=profiles,
                                    speakers=speakers, feature_config=feats_cfg)
        refs += s.segments
    # the first pass needs raw levels for its energy VAD
    for entry in read_manifest(test_manifest):
        raw = np.load(entry.features).astype(np.float64)
        firstpass_hyp += infer_session(entry.session, model, InferenceConfig(), features=raw,
                                       feature_config=feats_cfg)
    timings["evaluate"] = time.time() - t
    return TsVadToyResult(compute_der(refs, oracle_hyp, spec.collar),
                          compute_der(refs, firstpass_hyp, spec.collar),
                          time.time() - start, timings)


# ------------------------------------------------------------------- EDA
@dataclass
class EdaToySpec:
    n_train: int = 1500
    n_test: int = 100
    duration: float = 15.0
    min_speakers: int = 1
    max_speakers: int = 3
    max_overlap: float = 0.3
    seed: int = 2
    matcher: str = "dot"
    jsd_blocks: int = 1
    steps: int = 2500
    batch: int = 8
    peak_lr: float = 2e-3
    warmup_steps: int = 250
    model_seed: int = 0
    threshold: float = 0.5
    collar: float = 0.25


@dataclass
class EdaToyResult:
    count_accuracy: float
    der: DerReport
    seconds: float
    counts: list[tuple[int, int]] = field(default_factory=list)
    model: EendEdaModel | None = None
    test_manifest: Path | None = None


def evaluate_eda(model: EendEdaModel, manifest, threshold: float = 0.5, collar: float = 0.25,
                 feature_config: FeatureConfig = FeatureConfig(n_mels=40)):
    """Speaker-count accuracy, DER and (true, estimated) counts on a test manifest."""
    refs, hyps, counts = [], [], []
    infer_cfg = InferenceConfig(eda_threshold=threshold)
    for s in load_sessions(manifest, feature_config):
        with tn.no_grad():
            _, aset = model.infer(tn.Tensor(model.prepare(s.feats)), threshold)
        counts.append((len(s.speakers), aset.count))
        hyps += infer_session(s.session, model, infer_cfg, features=s.feats, feature_config=feature_config)
        refs += s.segments
    accuracy = float(np.mean([a == b for a, b in counts]))
    return accuracy, compute_der(refs, hyps, collar, bucket_rule=callhome_buckets), counts


def run_eda_toy(work_dir, spec: EdaToySpec = EdaToySpec(), jobs: int = 1) -> EdaToyResult:
    start = time.time()
    work_dir = Path(work_dir)
    feats_cfg = FeatureConfig(n_mels=40)
    sim = dict(min_speakers=spec.min_speakers, max_speakers=spec.max_speakers,
               max_overlap=spec.max_overlap, duration=spec.duration, seed=spec.seed)
    train_manifest = _dataset(work_dir / "train", SimulationConfig(n_conversations=spec.n_train,
                                                                   split="train", **sim), feats_cfg, jobs)
    test_manifest = _dataset(work_dir / "test", SimulationConfig(n_conversations=spec.n_test,
                                                                 split="test", **sim), feats_cfg, jobs)
    model = EendEdaModel(eda_preset(spec.matcher, "toy", jsd_blocks=spec.jsd_blocks,
                                    threshold=spec.threshold), seed=spec.model_seed)
    sessions = load_sessions(train_manifest, feats_cfg)
    examples = examples_for(model, sessions, spec.duration, feats_cfg.hop_ms / 1000.0)
    cfg = TrainConfig(peak_lr=spec.peak_lr, warmup_steps=spec.warmup_steps,
                      total_steps=spec.steps, batch=spec.batch)
    train(model, examples, cfg, on_step=_progress(50, start))

    accuracy, der, counts = evaluate_eda(model, test_manifest, spec.threshold, spec.collar, feats_cfg)
    return EdaToyResult(accuracy, der, time.time() - start, counts, model, test_manifest)


def two_speaker_spec(**overrides) -> EdaToySpec:
    """EDA-TS-VAD on 2-speaker mixtures (1 JSD block)."""
    base = dict(matcher="tsvad", jsd_blocks=1, min_speakers=2, max_speakers=2, seed=3,
                n_train=1000, steps=1000, warmup_steps=100)
    base.update(overrides)
    return EdaToySpec(**base)


@dataclass
class EdaSuiteResult:
    dot: EdaToyResult
    tsvad: EdaToyResult
    dot_two_speaker: DerReport      # the dot model on the 2-speaker test set


def run_eda_suite(work_dir, dot_spec: EdaToySpec = EdaToySpec(),
                  tsvad_spec: EdaToySpec | None = None, jobs: int = 1) -> EdaSuiteResult:
    """Dot model on 1-3 speakers, TS-VAD matcher on 2 speakers, both scored on the latter."""
    work_dir = Path(work_dir)
    tsvad_spec = tsvad_spec or two_speaker_spec()
    dot = run_eda_toy(work_dir / "dot", dot_spec, jobs)
    tsvad = run_eda_toy(work_dir / "tsvad", tsvad_spec, jobs)
    _, dot_two, _ = evaluate_eda(dot.model, tsvad.test_manifest, dot_spec.threshold, dot_spec.collar)
    return EdaSuiteResult(dot, tsvad, dot_two)
