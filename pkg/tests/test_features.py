import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diarkit.features import (FeatureConfig, frame_count, logmel, mel_centers, mel_filterbank,
                              read_wav, resample_nearest, stack_subsample, write_wav)


def test_one_second_gives_98_frames():
    assert logmel(np.zeros(16000)).shape == (98, 80)
    assert frame_count(16000, FeatureConfig()) == (16000 - 400) // 160 + 1


def test_silence_is_log_floor():
    cfg = FeatureConfig(n_mels=40)
    out = logmel(np.zeros(4000), cfg)
    assert np.all(out == np.log(cfg.log_floor))


@pytest.mark.parametrize("freq", [250.0, 1000.0, 3000.0])
def test_tone_peaks_at_nearest_center(freq):
    cfg = FeatureConfig()
    t = np.arange(16000) / 16000
    out = logmel(np.sin(2 * np.pi * freq * t), cfg)
    nearest = int(np.argmin(np.abs(mel_centers(cfg) - freq)))
    assert np.all(out.argmax(axis=1) == nearest)


def test_filterbank_peaks_are_unit():
    fb = mel_filterbank(FeatureConfig(n_mels=40))
    assert fb.shape == (257, 40)
    assert np.all(fb >= 0) and fb.max() <= 1.0 + 1e-12
    assert np.all(fb.sum(axis=0) > 0)


def test_empty_and_short_audio_raise():
    with pytest.raises(ValueError):
        logmel(np.zeros(0))
    with pytest.raises(ValueError):
        logmel(np.zeros(399))


def test_stack_subsample_examples():
    x = np.arange(15 * 40, dtype=float).reshape(15, 40)
    out = stack_subsample(x)
    assert out.shape == (1, 600)
    # frame 0 is the center: 7 replicated copies of row 0 precede it
    np.testing.assert_array_equal(out[0].reshape(15, 40), np.concatenate([np.repeat(x[:1], 7, 0), x[:8]]))
    assert stack_subsample(np.zeros((100, 40))).shape == (10, 600)
    const = stack_subsample(np.full((50, 40), 3.0))
    assert np.all(const == 3.0)
    with pytest.raises(ValueError):
        stack_subsample(np.zeros((14, 40)))


@given(st.integers(15, 80), st.integers(1, 12))
def test_stack_subsample_matches_loop(t0, factor):
    rng = np.random.default_rng(t0 * 31 + factor)
    x = rng.normal(size=(t0, 3))
    out = stack_subsample(x, stack=5, factor=factor)
    assert out.shape == (t0 // factor, 15)
    for t in range(t0 // factor):
        rows = [x[min(max(t * factor + k, 0), t0 - 1)] for k in range(-2, 3)]
        np.testing.assert_array_equal(out[t], np.concatenate(rows))


def test_wav_round_trip(tmp_path, rng):
    audio = rng.uniform(-0.9, 0.9, size=1234)
    write_wav(tmp_path / "a.wav", audio, 8000)
    back, sr = read_wav(tmp_path / "a.wav")
    assert sr == 8000 and back.shape == audio.shape
    assert np.abs(back - audio).max() < 2 / 32768
    up, sr = read_wav(tmp_path / "a.wav", sample_rate=16000)
    assert sr == 16000 and len(up) == 2468


def test_resample_identity():
    x = np.arange(10.0)
    np.testing.assert_array_equal(resample_nearest(x, 16000, 16000), x)
    np.testing.assert_array_equal(resample_nearest(x, 16000, 8000), x[::2])
