"""A fast numerical self-check used by ``diarkit selftest``."""

from __future__ import annotations

import itertools
import tempfile
from pathlib import Path

import numpy as np

from . import tensor as tn
from .assignment import hungarian
from .layers import BLSTM, TransformerEncoderLayer
from .score import RttmSegment, compute_der
from .tensor import Tensor


def _check_layers(rng) -> bool:
    x = rng.normal(size=(2, 5, 8))
    blstm = BLSTM(8, 4, rng, proj=6)
    trans = TransformerEncoderLayer(8, 2, 12, rng)
    ok = True
    for layer in (blstm, trans):
        for _, p in layer.named_parameters():
            picks = [tuple(int(rng.integers(n)) for n in p.shape) for _ in range(3)]
            err = tn.grad_check(lambda _p, _l=layer: (_l(Tensor(x)) ** 2).sum(), p, indices=picks)
            ok &= err < 1e-4
    return bool(ok)


def _check_hungarian(rng) -> bool:
    for _ in range(20):
        c = rng.integers(0, 5, size=(5, 5)).astype(float)
        best = min(itertools.permutations(range(5)), key=lambda p: (sum(c[i, p[i]] for i in range(5)), p))
        if tuple(hungarian(c)) != best:
            return False
    return True


def _check_der() -> bool:
    ref = [RttmSegment("s", 0.0, 10.0, "a"), RttmSegment("s", 10.0, 5.0, "b")]
    hyp = [RttmSegment("s", 0.0, 10.0, "x"), RttmSegment("s", 10.0, 5.0, "y")]
    return compute_der(ref, ref).der == 0.0 and compute_der(ref, hyp).der == 0.0


def _check_checkpoint(rng) -> bool:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .config import Config, ModelSection

    cfg = Config(model=ModelSection("blstm_time_trans_spk", "toy"))
    model = cfg.model.build()
    feats = Tensor(rng.normal(size=(64, 80)))
    prof = Tensor(rng.normal(size=(2, 32)))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(model, cfg, path)
        loaded, _ = load_checkpoint(path)
    with tn.no_grad():
        return bool(np.array_equal(model(feats, prof).data, loaded(feats, prof).data))


def run_selftest(verbose: bool = False) -> bool:
    rng = np.random.default_rng(0)
    checks = [("layer gradients", lambda: _check_layers(rng)),
              ("hungarian vs brute force", lambda: _check_hungarian(rng)),
              ("DER identities", _check_der),
              ("checkpoint round trip", lambda: _check_checkpoint(rng))]
    all_ok = True
    for name, fn in checks:
        ok = fn()
        all_ok &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name}")
    return bool(all_ok)
