"""Audio I/O and log-mel filterbank features."""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.hop_ms > self.window_ms:
            raise ValueError("hop must not exceed window")
        if self.n_mels < 1:
            raise ValueError("need at least one mel bin")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_centers(cfg: FeatureConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """HTK-style triangular filters with unit peak, 0 Hz to Nyquist; [n_fft//2+1, n_mels]."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    fb = np.zeros((freqs.size, cfg.n_mels))
    for m in range(cfg.n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (center - lo)
        down = (hi - freqs) / (hi - center)
        fb[:, m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def frame_count(n_samples: int, cfg: FeatureConfig) -> int:
    if n_samples < cfg.win_length:
        return 0
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def logmel(audio, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log mel-filterbank energies, one row per hop, no centering: [T0, n_mels]."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size == 0:
        raise ValueError("empty audio")
    n = frame_count(audio.size, cfg)
    if n == 0:
        raise ValueError(f"audio shorter than one window ({audio.size} < {cfg.win_length} samples)")
    frames = np.lib.stride_tricks.sliding_window_view(audio, cfg.win_length)[:: cfg.hop_length][:n]
    window = np.hanning(cfg.win_length + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    return np.log(np.maximum(power @ mel_filterbank(cfg), cfg.log_floor))


def stack_subsample(frames, stack: int = 15, factor: int = 10) -> np.ndarray:
    """Concatenate ``stack`` frames centered on every ``factor``-th frame.

    Edges are padded by replication.  Output is [floor(T0 / factor), stack * D].
    """
    frames = np.asarray(frames, dtype=np.float64)
    t0, dim = frames.shape
    if t0 < stack:
        raise ValueError(f"need at least {stack} frames to stack, got {t0}")
    half = stack // 2
    padded = np.concatenate([np.repeat(frames[:1], half, axis=0), frames,
                             np.repeat(frames[-1:], stack - 1 - half, axis=0)])
    centers = np.arange(t0 // factor) * factor
    idx = centers[:, None] + np.arange(stack)[None, :]
    return padded[idx].reshape(len(centers), stack * dim)


# ------------------------------------------------------------------- WAV I/O
def read_wav(path, sample_rate: int | None = None) -> tuple[np.ndarray, int]:
    """16-bit PCM mono WAV -> float samples in [-1, 1); optional NN resampling."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: only mono audio is supported")
        sr = wf.getframerate()
        data = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    audio = data.astype(np.float64) / 32768.0
    if sample_rate is not None and sample_rate != sr:
        audio = resample_nearest(audio, sr, sample_rate)
        sr = sample_rate
    return audio, sr


def write_wav(path, audio, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(audio) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def resample_nearest(audio: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    n_out = int(round(len(audio) * dst_rate / src_rate))
    idx = np.minimum(np.round(np.arange(n_out) * src_rate / dst_rate).astype(np.int64),
                     len(audio) - 1)
    return audio[idx]
