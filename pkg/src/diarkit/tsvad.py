"""Target-speaker voice activity detection over an arbitrary set of profiles.

Shapes: features [B, T0, D], frame embeddings [B, T, E], profiles [B, S, P],
ISD/JSD tensors [B, T, S, F], activities [B, T, S].  Unbatched inputs (no
leading B) are accepted by the public functions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tn
from .layers import BLSTM, Linear, Module, TransformerEncoderLayer
from .tensor import Tensor


class JsdVariant(str, enum.Enum):
    CONCAT = "concat"                       # original TS-VAD, fixed speaker count
    BLSTM_BLSTM = "blstm_blstm"             # BLSTM on both axes (order dependent)
    TRANS_TRANS = "trans_trans"
    BLSTM_TIME_TRANS_SPK = "blstm_time_trans_spk"


@dataclass(frozen=True)
class BlstmSpec:
    hidden: int
    proj: int


@dataclass(frozen=True)
class TransformerSpec:
    heads: int
    dim: int
    ffn: int


@dataclass(frozen=True)
class TsVadConfig:
    n_mels: int = 80
    downsample: tuple[int, int] = (4, 2)
    frontend_channels: tuple[int, int] = (128, 128)
    embed_dim: int = 128
    profile_dim: int = 128
    isd_proj: int = 384
    isd_hidden: int = 128
    isd_out: int = 256
    variant: JsdVariant = JsdVariant.BLSTM_TIME_TRANS_SPK
    jsd_blocks: int = 2
    max_speakers: int = 10
    concat_blstm: BlstmSpec = BlstmSpec(256, 192)
    time_blstm: BlstmSpec = BlstmSpec(160, 160)
    spk_blstm: BlstmSpec = BlstmSpec(160, 160)
    time_trans: TransformerSpec = TransformerSpec(4, 256, 256)
    spk_trans: TransformerSpec = TransformerSpec(4, 160, 160)
    time_positional_encoding: bool = False

    @property
    def downsample_factor(self) -> int:
        return int(np.prod(self.downsample))


def preset(variant: JsdVariant | str, scale: str = "full", **overrides) -> TsVadConfig:
    """Layer sizes for each JSD variant; ``scale="toy"`` divides every dim by 4."""
    variant = JsdVariant(variant)
    cfg = TsVadConfig(variant=variant)
    if variant is JsdVariant.TRANS_TRANS:
        cfg = replace(cfg, spk_trans=TransformerSpec(4, 256, 256))
    if scale == "toy":
        def q(n):
            return max(1, n // 4)

        cfg = replace(
            cfg,
            frontend_channels=tuple(q(c) for c in cfg.frontend_channels),
            embed_dim=q(cfg.embed_dim), profile_dim=q(cfg.profile_dim),
            isd_proj=q(cfg.isd_proj), isd_hidden=q(cfg.isd_hidden), isd_out=q(cfg.isd_out),
            concat_blstm=BlstmSpec(q(cfg.concat_blstm.hidden), q(cfg.concat_blstm.proj)),
            time_blstm=BlstmSpec(q(cfg.time_blstm.hidden), q(cfg.time_blstm.proj)),
            spk_blstm=BlstmSpec(q(cfg.spk_blstm.hidden), q(cfg.spk_blstm.proj)),
            time_trans=TransformerSpec(cfg.time_trans.heads, q(cfg.time_trans.dim), q(cfg.time_trans.ffn)),
            spk_trans=TransformerSpec(cfg.spk_trans.heads, q(cfg.spk_trans.dim), q(cfg.spk_trans.ffn)),
        )
    elif scale != "full":
        raise ValueError(f"unknown scale {scale!r}")
    return replace(cfg, **overrides)


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return x.reshape(1, *x.shape), True
    return x, False


class FrontEnd(Module):
    """Two strided 1-D convolutions (kernel == stride) with GELU, then a linear map to E."""

    def __init__(self, n_mels: int, strides: tuple[int, ...], channels: tuple[int, ...],
                 out_dim: int, rng: np.random.Generator):
        self.strides = tuple(strides)
        self.factor = int(np.prod(strides))
        dims = [n_mels, *channels]
        self.convs = [Linear(dims[i] * s, dims[i + 1], rng) for i, s in enumerate(strides)]
        self.out = Linear(dims[-1], out_dim, rng)
        self.out_dim = out_dim

    def __call__(self, feats: Tensor) -> Tensor:
        feats, squeeze = _batched(tn.as_tensor(feats), 3)
        b, t0, _ = feats.shape
        if t0 < self.factor:
            raise ValueError(f"front-end needs at least {self.factor} frames, got {t0}")
        x = feats[:, : (t0 // self.factor) * self.factor]
        for conv, s in zip(self.convs, self.strides):
            t = x.shape[1] // s
            x = tn.gelu(conv(x.reshape(b, t, s * x.shape[2])))
        y = self.out(x)
        return y.reshape(*y.shape[1:]) if squeeze else y


def frontend_encode(features, fe: FrontEnd) -> Tensor:
    return fe(features)


class IsdModule(Module):
    """Per-speaker detector: [E ; p_s] -> linear -> BLSTM -> BLSTM."""

    def __init__(self, embed_dim: int, profile_dim: int, proj: int, hidden: int, out: int,
                 rng: np.random.Generator):
        self.embed_dim, self.profile_dim = embed_dim, profile_dim
        self.proj = Linear(embed_dim + profile_dim, proj, rng)
        self.blstm1 = BLSTM(proj, hidden, rng, proj=out)
        self.blstm2 = BLSTM(out, hidden, rng, proj=out)
        self.out_dim = out

    def __call__(self, emb: Tensor, profiles: Tensor) -> Tensor:
        emb, squeeze = _batched(tn.as_tensor(emb), 3)
        profiles, _ = _batched(tn.as_tensor(profiles), 3)
        b, t, e = emb.shape
        s = profiles.shape[1]
        if profiles.shape[2] != self.profile_dim or e != self.embed_dim:
            raise tn.ShapeError(f"ISD expects embeddings [..,{self.embed_dim}] and profiles "
                                f"[..,{self.profile_dim}], got {emb.shape} and {profiles.shape}")
        if s < 1:
            raise ValueError("need at least one profile")
        e_rep = tn.broadcast_to(emb.reshape(b, 1, t, e), (b, s, t, e))
        p_rep = tn.broadcast_to(profiles.reshape(b, s, 1, self.profile_dim), (b, s, t, self.profile_dim))
        x = tn.concat([e_rep, p_rep], axis=-1).reshape(b * s, t, e + self.profile_dim)
        x = self.blstm2(self.blstm1(self.proj(x)))
        x = tn.transpose(x.reshape(b, s, t, self.out_dim), (0, 2, 1, 3))
        return x.reshape(*x.shape[1:]) if squeeze else x


def isd_forward(emb, profiles, isd: IsdModule) -> Tensor:
    return isd(emb, profiles)


def _time_axis(layer, x: Tensor) -> Tensor:
    b, t, s, f = x.shape
    y = tn.transpose(x, (0, 2, 1, 3)).reshape(b * s, t, f)
    y = layer(y)
    return tn.transpose(y.reshape(b, s, t, y.shape[-1]), (0, 2, 1, 3))


def _speaker_axis(layer, x: Tensor) -> Tensor:
    b, t, s, f = x.shape
    y = layer(x.reshape(b * t, s, f))
    return y.reshape(b, t, s, y.shape[-1])


class JointSpeakerDetector(Module):
    """JSD: alternate time-axis and speaker-axis sequence layers over [B, T, S, F]."""

    def __init__(self, cfg: TsVadConfig, in_dim: int, rng: np.random.Generator):
        self.variant = JsdVariant(cfg.variant)
        self.max_speakers = cfg.max_speakers
        self.time_layers: list = []
        self.spk_layers: list = []
        self.concat = None
        v = self.variant
        if v is JsdVariant.CONCAT:
            spec = cfg.concat_blstm
            self.concat = BLSTM(in_dim * cfg.max_speakers, spec.hidden, rng, proj=spec.proj)
            self.out_dim = spec.proj
            return
        dim = in_dim
        for _ in range(cfg.jsd_blocks):
            if v is JsdVariant.TRANS_TRANS:
                tt, st = cfg.time_trans, cfg.spk_trans
                if dim != tt.dim:
                    raise ValueError(f"time transformer dim {tt.dim} != input dim {dim}")
                self.time_layers.append(TransformerEncoderLayer(
                    tt.dim, tt.heads, tt.ffn, rng, use_positional_encoding=cfg.time_positional_encoding))
                dim = tt.dim
            else:
                spec = cfg.time_blstm
                self.time_layers.append(BLSTM(dim, spec.hidden, rng, proj=spec.proj))
                dim = spec.proj
            if v is JsdVariant.BLSTM_BLSTM:
                spec = cfg.spk_blstm
                self.spk_layers.append(BLSTM(dim, spec.hidden, rng, proj=spec.proj))
                dim = spec.proj
            else:
                st = cfg.spk_trans
                if dim != st.dim:
                    raise ValueError(f"speaker transformer dim {st.dim} != input dim {dim}")
                # no positional encoding on the speaker axis: profile order must not matter
                self.spk_layers.append(TransformerEncoderLayer(st.dim, st.heads, st.ffn, rng))
        self.out_dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(tn.as_tensor(x), 4)
        b, t, s, f = x.shape
        if self.variant is JsdVariant.CONCAT:
            if s != self.max_speakers:
                raise ValueError(f"concat JSD needs exactly {self.max_speakers} profiles, got {s}")
            y = self.concat(x.reshape(b, t, s * f))
        else:
            y = x
            for tl, sl in zip(self.time_layers, self.spk_layers):
                y = _speaker_axis(sl, _time_axis(tl, y))
        return y.reshape(*y.shape[1:]) if squeeze else y


def jsd_forward(x, jsd: JointSpeakerDetector) -> Tensor:
    return jsd(x)


class TsVadMatcher(Module):
    """ISD + JSD + sigmoid head: embeddings and profiles -> activities."""

    def __init__(self, cfg: TsVadConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.isd = IsdModule(cfg.embed_dim, cfg.profile_dim, cfg.isd_proj, cfg.isd_hidden,
                             cfg.isd_out, rng)
        self.jsd = JointSpeakerDetector(cfg, cfg.isd_out, rng)
        n_out = cfg.max_speakers if cfg.variant == JsdVariant.CONCAT else 1
        self.head = Linear(self.jsd.out_dim, n_out, rng)

    def __call__(self, emb: Tensor, profiles: Tensor) -> Tensor:
        emb, squeeze = _batched(tn.as_tensor(emb), 3)
        profiles, _ = _batched(tn.as_tensor(profiles), 3)
        y = self.jsd(self.isd(emb, profiles))
        if self.cfg.variant == JsdVariant.CONCAT:
            # the projected concat BLSTM output is not split per speaker, so the
            # head maps it straight to max_speakers activities
            act = tn.sigmoid(self.head(y))
        else:
            b, t, s, _ = y.shape
            act = tn.sigmoid(self.head(y)).reshape(b, t, s)
        return act.reshape(*act.shape[1:]) if squeeze else act


class TsVadModel(Module):
    def __init__(self, cfg: TsVadConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.frontend = FrontEnd(cfg.n_mels, cfg.downsample, cfg.frontend_channels,
                                 cfg.embed_dim, rng)
        self.matcher = TsVadMatcher(cfg, rng)

    def embed(self, features) -> Tensor:
        return self.frontend(features)

    def __call__(self, features, profiles) -> Tensor:
        return self.matcher(self.frontend(features), profiles)


def tsvad_forward(features, profiles, model: TsVadModel) -> Tensor:
    return model(features, profiles)


# --------------------------------------------------------------------- losses
def bce_sum_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Masked BCE summed over frames and speakers, normalized by (valid T) * S."""
    pred = tn.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {pred.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("targets must be binary")
    s = pred.shape[-1]
    if mask is None:
        mask = np.ones(pred.shape[:-1])
    mask = np.asarray(mask, dtype=np.float64)
    n_valid = float(mask.sum())
    if n_valid == 0:
        raise ValueError("mask excludes every frame")
    bce = tn.binary_cross_entropy(pred, target)
    return (bce * Tensor(mask[..., None])).sum() * (1.0 / (n_valid * s))


# ------------------------------------------------------------------- profiles
def training_profiles(emb, labels) -> tuple[Tensor, list[int], list[int]]:
    """Mean embedding of each speaker over frames where it is the only active speaker.

    Falls back to all its active frames when it never speaks alone.  Speakers
    silent in the chunk are dropped.  Returns (profiles, kept, excluded).
    """
    emb = tn.as_tensor(emb)
    labels = np.asarray(labels)
    t, s = labels.shape
    if emb.shape[0] != t:
        raise ValueError(f"{emb.shape[0]} embeddings vs {t} label frames")
    solo = (labels.sum(axis=1) == 1)[:, None] & (labels > 0)
    weights, kept, excluded = [], [], []
    for k in range(s):
        col = solo[:, k] if solo[:, k].any() else labels[:, k] > 0
        if not col.any():
            excluded.append(k)
            continue
        weights.append(col / col.sum())
        kept.append(k)
    if not kept:
        return Tensor(np.zeros((0, emb.shape[1]))), kept, excluded
    return tn.matmul(Tensor(np.stack(weights)), emb), kept, excluded


def pad_profiles_baseline(profiles, n: int = 10, durations=None):
    """Zero-pad to ``n`` profiles, or keep the ``n`` longest-speaking ones.

    Returns (padded [n, P], kept indices, excluded indices).
    """
    profiles = np.asarray(profiles.data if isinstance(profiles, Tensor) else profiles,
                          dtype=np.float64)
    s, p = profiles.shape
    if s <= n:
        out = np.zeros((n, p))
        out[:s] = profiles
        return out, list(range(s)), []
    if durations is None:
        raise ValueError("durations are required to rank more than n profiles")
    order = sorted(range(s), key=lambda i: (-durations[i], i))
    kept = sorted(order[:n])
    return profiles[kept], kept, sorted(order[n:])


def frame_labels(segments, speakers: list[str], n_frames: int, frame_shift: float,
                 offset: float = 0.0) -> np.ndarray:
    """Multi-hot [n_frames, S]; a frame is active if > 50% of its span is speech."""
    labels = np.zeros((n_frames, len(speakers)), dtype=np.float64)
    col = {spk: i for i, spk in enumerate(speakers)}
    starts = offset + np.arange(n_frames) * frame_shift
    cover = np.zeros((n_frames, len(speakers)))
    for seg in segments:
        if seg.speaker not in col:
            continue
        a = np.maximum(starts, seg.onset)
        b = np.minimum(starts + frame_shift, seg.end)
        cover[:, col[seg.speaker]] += np.maximum(0.0, b - a)
    labels[cover > 0.5 * frame_shift] = 1.0
    return labels
