"""Encoder-decoder attractors (EEND-EDA) with dot-product or TS-VAD matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tn
from .assignment import hungarian
from .features import stack_subsample
from .layers import LSTM, Linear, Module, TransformerEncoderLayer
from .tensor import Tensor
from .tsvad import JsdVariant, TsVadConfig, TsVadMatcher, bce_sum_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EendEdaConfig:
    n_mels: int = 40
    stack: int = 15
    subsample: int = 10
    dim: int = 320
    layers: int = 6
    heads: int = 10
    ffn: int = 1024
    matcher: str = "tsvad"            # "dot" or "tsvad"
    jsd_blocks: int = 2
    isd_proj: int = 384
    isd_hidden: int = 128
    isd_out: int = 256
    time_hidden: int = 160
    spk_heads: int = 4
    max_attractors: int = 12
    threshold: float = 0.5
    # the attractor LSTM only ever sees time-shuffled frames in training, so
    # inference feeds it a fixed-seed shuffle as well
    infer_shuffle: bool = True
    shuffle_seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.n_mels * self.stack

    def matcher_config(self) -> TsVadConfig:
        from .tsvad import BlstmSpec, TransformerSpec

        return TsVadConfig(
            embed_dim=self.dim, profile_dim=self.dim, isd_proj=self.isd_proj,
            isd_hidden=self.isd_hidden, isd_out=self.isd_out,
            variant=JsdVariant.BLSTM_TIME_TRANS_SPK, jsd_blocks=self.jsd_blocks,
            time_blstm=BlstmSpec(self.time_hidden, self.time_hidden),
            spk_trans=TransformerSpec(self.spk_heads, self.time_hidden, self.time_hidden))


def eda_preset(matcher: str = "tsvad", scale: str = "full", **overrides) -> EendEdaConfig:
    cfg = EendEdaConfig(matcher=matcher)
    if scale == "toy":
        cfg = replace(cfg, dim=80, ffn=256, isd_proj=96, isd_hidden=32, isd_out=64,
                      time_hidden=40, layers=2)
    elif scale != "full":
        raise ValueError(f"unknown scale {scale!r}")
    return replace(cfg, **overrides)


class EendEncoder(Module):
    """Linear input projection followed by transformer layers (no positional encoding)."""

    def __init__(self, in_dim: int, dim: int, layers: int, heads: int, ffn: int,
                 rng: np.random.Generator):
        self.in_dim = in_dim
        self.proj = Linear(in_dim, dim, rng)
        self.layers = [TransformerEncoderLayer(dim, heads, ffn, rng) for _ in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise tn.ShapeError(f"encoder expects feature dim {self.in_dim}, got {x.shape}")
        y = self.proj(x)
        for layer in self.layers:
            y = layer(y)
        return y


def eend_encode(stacked_features, enc: EendEncoder) -> Tensor:
    return enc(tn.as_tensor(stacked_features))


def shuffle_time(emb, seed) -> Tensor:
    """Permute frames (axis -2) with a seed-deterministic uniform permutation."""
    emb = tn.as_tensor(emb)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if emb.ndim == 2:
        return emb[rng.permutation(emb.shape[0])]
    b, t = emb.shape[:2]
    perms = np.stack([rng.permutation(t) for _ in range(b)])
    return emb[np.arange(b)[:, None], perms]


@dataclass
class AttractorSet:
    attractors: np.ndarray
    existence_probs: np.ndarray
    count: int


class EdaModule(Module):
    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or dim
        self.dim = dim
        self.encoder = LSTM(dim, hidden, rng)
        self.decoder = LSTM(dim, hidden, rng)
        self.exist = Linear(hidden, 1, rng)

    def __call__(self, emb: Tensor, decode_n: int) -> tuple[Tensor, Tensor]:
        """emb [B, T, d] -> (attractors [B, n, H], existence probabilities [B, n])."""
        if decode_n < 1:
            raise ValueError("decode_n must be >= 1")
        _, state = self.encoder(emb)
        zeros = Tensor(np.zeros((emb.shape[0], decode_n, self.dim)))
        att, _ = self.decoder(zeros, state)
        probs = tn.sigmoid(self.exist(att)).reshape(emb.shape[0], decode_n)
        return att, probs


def eda_extract(emb, eda: EdaModule, decode_n: int) -> AttractorSet:
    emb = tn.as_tensor(emb)
    single = emb.ndim == 2
    if single:
        emb = emb.reshape(1, *emb.shape)
    att, probs = eda(emb, decode_n)
    a, p = att.data[0], probs.data[0]
    return AttractorSet(a, p, count_speakers(p, 0.5, decode_n))


def count_speakers(probs, threshold: float = 0.5, max_speakers: int | None = None) -> int:
    """Number of leading probabilities >= threshold (decoding stops at the first below)."""
    probs = np.asarray(probs).reshape(-1)
    below = np.flatnonzero(probs < threshold)
    if below.size:
        return int(below[0])
    cap = len(probs) if max_speakers is None else min(max_speakers, len(probs))
    log.warning("existence probabilities never fell below %.2f; truncating at %d speakers",
                threshold, cap)
    return cap


def dot_match(emb, attractors) -> Tensor:
    """sigmoid(E A^T): [.., T, d] x [.., S, d] -> [.., T, S]."""
    emb, attractors = tn.as_tensor(emb), tn.as_tensor(attractors)
    return tn.sigmoid(tn.matmul(emb, tn.swapaxes(attractors, -1, -2)))


def tsvad_match(emb, attractors, matcher: TsVadMatcher) -> Tensor:
    return matcher(emb, attractors)


class EendEdaModel(Module):
    def __init__(self, cfg: EendEdaConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = EendEncoder(cfg.input_dim, cfg.dim, cfg.layers, cfg.heads, cfg.ffn, rng)
        self.eda = EdaModule(cfg.dim, rng)
        if cfg.matcher == "tsvad":
            self.matcher = TsVadMatcher(cfg.matcher_config(), rng)
        elif cfg.matcher == "dot":
            self.matcher = None
        else:
            raise ValueError(f"unknown matcher {cfg.matcher!r}")

    def prepare(self, feats: np.ndarray) -> np.ndarray:
        """Log-mel [T0, n_mels] -> mean-normalized stacked frames [T, n_mels * stack]."""
        feats = np.asarray(feats, dtype=np.float64)
        feats = feats - feats.mean(axis=0, keepdims=True)
        return stack_subsample(feats, self.cfg.stack, self.cfg.subsample)

    def match(self, emb: Tensor, attractors: Tensor) -> Tensor:
        if self.matcher is None:
            return dot_match(emb, attractors)
        return self.matcher(emb, attractors)

    def forward_train(self, stacked: Tensor, n_speakers: int, rng: np.random.Generator,
                      shuffle: bool = True) -> tuple[Tensor, Tensor]:
        """Decode n+1 attractors from shuffled embeddings; match the first n.

        Returns (activities [B, T, n], existence probabilities [B, n+1]).
        """
        stacked = tn.as_tensor(stacked)
        if stacked.ndim == 2:
            stacked = stacked.reshape(1, *stacked.shape)
        emb = self.encoder(stacked)
        eda_in = shuffle_time(emb, rng) if shuffle else emb
        att, probs = self.eda(eda_in, n_speakers + 1)
        if n_speakers == 0:
            return Tensor(np.zeros((*emb.shape[:2], 0))), probs
        return self.match(emb, att[:, :n_speakers]), probs

    def infer(self, stacked: Tensor, threshold: float | None = None,
              max_attractors: int | None = None) -> tuple[Tensor, AttractorSet]:
        """Single-pass inference on one session [T, D]."""
        threshold = self.cfg.threshold if threshold is None else threshold
        max_attractors = max_attractors or self.cfg.max_attractors
        stacked = tn.as_tensor(stacked)
        squeeze = stacked.ndim == 2
        if squeeze:
            stacked = stacked.reshape(1, *stacked.shape)
        emb = self.encoder(stacked)
        eda_in = shuffle_time(emb, self.cfg.shuffle_seed) if self.cfg.infer_shuffle else emb
        att, probs = self.eda(eda_in, max_attractors)
        n = count_speakers(probs.data[0], threshold, max_attractors)
        aset = AttractorSet(att.data[0, :n], probs.data[0], n)
        if n == 0:
            act = Tensor(np.zeros((emb.shape[1], 0)))
            return act, aset
        act = self.match(emb, att[:, :n])
        return (act.reshape(*act.shape[1:]) if squeeze else act), aset


def eda_tsvad_forward(stacked, model: EendEdaModel, threshold: float | None = None):
    return model.infer(stacked, threshold)


# --------------------------------------------------------------------- losses
def existence_loss(probs, true_n: int) -> Tensor:
    """Mean BCE of existence probabilities against [1] * true_n + [0]."""
    probs = tn.as_tensor(probs)
    if probs.shape[-1] != true_n + 1:
        raise ValueError(f"expected {true_n + 1} existence probabilities, got {probs.shape[-1]}")
    target = np.zeros(probs.shape)
    target[..., :true_n] = 1.0
    return tn.binary_cross_entropy(probs, target).mean()


def pair_costs(pred: np.ndarray, target: np.ndarray, mask=None, eps: float = 1e-12) -> np.ndarray:
    """C[i, j] = masked mean BCE of prediction column i against target column j."""
    p = np.clip(np.asarray(pred, dtype=np.float64), eps, 1 - eps)
    t = np.asarray(target, dtype=np.float64)
    m = np.ones(len(p)) if mask is None else np.asarray(mask, dtype=np.float64)
    lp, lq = np.log(p) * m[:, None], np.log(1 - p) * m[:, None]
    return -(lp.T @ t + lq.T @ (1 - t)) / m.sum()


def pit_bce_loss(pred, target, mask=None) -> tuple[Tensor, np.ndarray]:
    """Permutation-free BCE for one sequence [T, S]; returns (loss, perm).

    ``perm[i]`` is the target column assigned to prediction column i.
    """
    pred = tn.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} speaker counts differ")
    perm = hungarian(pair_costs(pred.data, target, mask))
    return bce_sum_loss(pred, target[:, perm], mask), perm


def batch_pit_loss(pred: Tensor, targets: np.ndarray, masks: np.ndarray | None = None):
    """PIT over a batch [B, T, S]: each element gets its own assignment."""
    targets = np.asarray(targets, dtype=np.float64)
    permuted = np.empty_like(targets)
    perms = []
    for b in range(targets.shape[0]):
        m = None if masks is None else masks[b]
        perm = hungarian(pair_costs(pred.data[b], targets[b], m))
        permuted[b] = targets[b][:, perm]
        perms.append(perm)
    return bce_sum_loss(pred, permuted, masks), perms


def combined_loss(activities, labels, mask, probs, true_n: int, alpha: float = 1.0) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    act = tn.as_tensor(activities)
    if act.ndim == 3:
        pit, _ = batch_pit_loss(act, labels, mask)
    else:
        pit, _ = pit_bce_loss(act, labels, mask)
    if alpha == 0:
        return pit
    return pit + existence_loss(probs, true_n) * alpha
