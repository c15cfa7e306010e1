import numpy as np
import pytest

from diarkit.features import FeatureConfig
from diarkit.score import merge_intervals, parse_rttm
from diarkit.simulate import (ConversationSpec, SimulationConfig, SpecError, SyntheticSpeaker,
                              build_dataset, mix_conversation, overlap_ratio, read_manifest,
                              speech_per_speaker, synth_utterance)


def instantwise_overlap(segments, step=0.001):
    end = max(s.end for s in segments)
    t = (np.arange(int(np.ceil(end / step))) + 0.5) * step
    count = np.zeros_like(t)
    for spk in {s.speaker for s in segments}:
        active = np.zeros_like(t, dtype=bool)
        for s in segments:
            if s.speaker == spk:
                active |= (t > s.onset) & (t < s.end)
        count += active
    return np.sum(count >= 2) / np.sum(count >= 1)


def spectral_centroid(x, sr=16000):
    mag = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(len(x), 1 / sr)
    return float(np.sum(freqs * mag) / np.sum(mag))


# ---------------------------------------------------------------- speakers
def test_utterance_determinism_and_length():
    spk = SyntheticSpeaker(3)
    a = synth_utterance(spk, 0.5, seed=9)
    assert len(a) == 8000
    np.testing.assert_array_equal(a, synth_utterance(spk, 0.5, seed=9))
    assert np.sqrt(np.mean(a ** 2)) == pytest.approx(1.0)


def test_distinct_speakers_have_distinct_centroids():
    cents = [spectral_centroid(synth_utterance(SyntheticSpeaker(i), 2.0, seed=1)) for i in range(8)]
    assert min(abs(a - b) for i, a in enumerate(cents) for b in cents[i + 1:]) > 1.0


def test_utterance_length_must_be_positive():
    with pytest.raises(ValueError):
        synth_utterance(SyntheticSpeaker(0), 0.0, seed=0)


# ----------------------------------------------------------- conversations
def test_zero_overlap_target():
    conv = mix_conversation(ConversationSpec(num_speakers=3, overlap_ratio=0.0, duration=30.0, seed=4))
    assert instantwise_overlap(conv.segments) == 0.0
    assert conv.overlap_ratio == 0.0


def test_single_speaker():
    conv = mix_conversation(ConversationSpec(num_speakers=1, duration=20.0, seed=2))
    assert {s.speaker for s in conv.segments} == {conv.segments[0].speaker}
    assert conv.overlap_ratio == 0.0


def test_overlap_target_is_reached():
    conv = mix_conversation(ConversationSpec(num_speakers=2, overlap_ratio=0.3, duration=60.0, seed=5))
    measured = instantwise_overlap(conv.segments)
    assert 0.25 <= measured <= 0.35
    assert abs(measured - overlap_ratio(conv.segments)) < 1e-3
    assert conv.target_reached


def test_reference_within_audio():
    conv = mix_conversation(ConversationSpec(num_speakers=4, overlap_ratio=0.2, duration=30.0, seed=6))
    assert max(s.end for s in conv.segments) <= conv.duration + 1e-9


def test_scheduled_speech_matches_reference():
    conv = mix_conversation(ConversationSpec(num_speakers=3, overlap_ratio=0.1, duration=40.0, seed=8))
    got = speech_per_speaker(conv.segments)
    assert set(got) == set(conv.scheduled_speech)
    for spk, sched in conv.scheduled_speech.items():
        assert abs(got[spk] - sched) <= 0.010 + 1e-9


@pytest.mark.parametrize("kwargs", [dict(num_speakers=1, overlap_ratio=0.2),
                                    dict(num_speakers=0), dict(overlap_ratio=0.6),
                                    dict(duration=0.0), dict(utterance_range=(3.0, 1.0)),
                                    dict(num_speakers=50)])
def test_infeasible_specs(kwargs):
    with pytest.raises(SpecError):
        mix_conversation(ConversationSpec(**kwargs))


def test_mix_is_deterministic():
    spec = ConversationSpec(num_speakers=2, overlap_ratio=0.1, duration=15.0, seed=3)
    a, b = mix_conversation(spec), mix_conversation(spec)
    np.testing.assert_array_equal(a.audio, b.audio)
    assert a.segments == b.segments


# ----------------------------------------------------------------- dataset
def small_config(**kw):
    base = dict(n_conversations=3, min_speakers=1, max_speakers=3, duration=8.0, seed=1)
    base.update(kw)
    return SimulationConfig(**base)


def test_dataset_files_and_manifest(tmp_path):
    manifest = build_dataset(tmp_path / "d", small_config(), feature_config=FeatureConfig(n_mels=40))
    entries = read_manifest(manifest)
    assert len(entries) == 3
    for e in entries:
        segs = parse_rttm(open(e.rttm).read())
        assert all(s.session == e.session for s in segs)
        assert np.load(e.features).shape[1] == 40


def test_dataset_is_bit_identical(tmp_path):
    a = build_dataset(tmp_path / "a", small_config()).parent
    b = build_dataset(tmp_path / "b", small_config()).parent
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_splits_are_seed_disjoint():
    train = small_config(split="train").conversation_specs()
    test = small_config(split="test").conversation_specs()
    assert not {s.seed for s in train} & {s.seed for s in test}


def test_bad_dataset_config():
    with pytest.raises(SpecError):
        small_config(split="eval").conversation_specs()
    with pytest.raises(SpecError):
        small_config(min_speakers=4, max_speakers=2).conversation_specs()


def test_merge_intervals_used_for_speech_totals():
    assert merge_intervals([(0, 2), (1, 3), (5, 6)]) == [(0, 3), (5, 6)]
