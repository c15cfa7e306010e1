import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diarkit.eda import (EdaModule, EendEdaModel, EendEncoder, batch_pit_loss, combined_loss,
                         count_speakers, dot_match, eda_extract, eda_preset, eda_tsvad_forward,
                         existence_loss, pit_bce_loss, shuffle_time)
from diarkit.tensor import ShapeError, Tensor, grad_check
from diarkit.tsvad import bce_sum_loss
from oracles import bce_loop, exhaustive_pit


def tiny(matcher="tsvad", **kw):
    base = dict(n_mels=4, stack=3, subsample=2, dim=8, layers=1, heads=2, ffn=12, isd_proj=8,
                isd_hidden=6, isd_out=8, time_hidden=8, spk_heads=2, jsd_blocks=1, max_attractors=5)
    base.update(kw)
    return eda_preset(matcher, "full", **base)


# ----------------------------------------------------------------- counting
def test_count_speakers_examples(caplog):
    assert count_speakers([0.9, 0.8, 0.2]) == 2
    assert count_speakers([0.3, 0.9]) == 0
    with caplog.at_level(logging.WARNING):
        assert count_speakers(np.full(12, 0.9), 0.5, 12) == 12
    assert "truncating" in caplog.text


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(0, 1), st.floats(0, 1))
def test_count_speakers_monotone_in_threshold(probs, a, b):
    lo, hi = sorted((a, b))
    assert count_speakers(probs, hi) <= count_speakers(probs, lo)


# ----------------------------------------------------------------- matching
def test_dot_match_examples(rng):
    emb = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert np.all(dot_match(emb, np.array([[0.0, 0.0]])).data == 0.5)
    att = 10 * emb[:1] / np.linalg.norm(emb[0])
    assert dot_match(emb, att).data[0, 0] > 0.9999


def test_dot_match_loop_oracle(rng):
    e, a = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    out = dot_match(e, a).data
    for t in range(6):
        for s in range(3):
            z = sum(e[t, k] * a[s, k] for k in range(4))
            assert abs(out[t, s] - 1 / (1 + np.exp(-z))) < 1e-10


def test_matchers_are_attractor_order_equivariant(rng):
    model = EendEdaModel(tiny(), seed=1)
    emb = Tensor(rng.normal(size=(1, 7, 8)))
    att = rng.normal(size=(1, 4, 8))
    perm = np.array([3, 1, 0, 2])
    a = model.match(emb, Tensor(att[:, perm])).data
    b = model.match(emb, Tensor(att)).data[..., perm]
    assert np.abs(a - b).max() < 1e-6
    np.testing.assert_array_equal(dot_match(emb, att[:, perm]).data, dot_match(emb, att).data[..., perm])
    assert model.match(emb, Tensor(att[:, :1])).shape == (1, 7, 1)


def test_two_jsd_blocks_have_more_parameters():
    one = EendEdaModel(eda_preset("tsvad", "toy", jsd_blocks=1)).num_parameters()
    two = EendEdaModel(eda_preset("tsvad", "toy", jsd_blocks=2)).num_parameters()
    assert two > one


# ------------------------------------------------------------------ encoder
def test_encoder_zero_layers_is_projection(rng):
    enc = EendEncoder(6, 8, 2, 2, 12, rng)
    for layer in enc.layers:
        for mod in (layer.attn.q, layer.attn.k, layer.attn.v, layer.attn.out, layer.ff1, layer.ff2):
            for p in mod.parameters().values():
                p.data[...] = 0.0
    x = Tensor(rng.normal(size=(5, 6)))
    np.testing.assert_array_equal(enc(x).data, enc.proj(x).data)


def test_encoder_permutation_and_errors(rng):
    enc = EendEncoder(6, 8, 2, 2, 12, rng)
    x = rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    np.testing.assert_allclose(enc(Tensor(x[perm])).data, enc(Tensor(x)).data[perm], atol=1e-10)
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((5, 7))))


def test_encoder_gradients(rng):
    enc = EendEncoder(6, 8, 1, 2, 12, rng)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 8)))
    assert grad_check(lambda t: (enc(t) * w).sum(), x) < 1e-4


# ------------------------------------------------------------------ shuffle
def test_shuffle_time(rng):
    x = rng.normal(size=(9, 3))
    one = rng.normal(size=(1, 3))
    np.testing.assert_array_equal(shuffle_time(one, 0).data, one)
    y = shuffle_time(x, 5).data
    np.testing.assert_array_equal(np.sort(y, axis=0), np.sort(x, axis=0))
    np.testing.assert_array_equal(y, shuffle_time(x, 5).data)


def test_shuffle_keeps_pit_loss_when_labels_follow(rng):
    emb, att = rng.normal(size=(10, 4)), rng.normal(size=(2, 4))
    labels = (rng.random((10, 2)) > 0.5).astype(float)
    perm = np.random.default_rng(3).permutation(10)
    base, _ = pit_bce_loss(dot_match(emb, att), labels)
    shuffled, _ = pit_bce_loss(dot_match(shuffle_time(emb, 3), att), labels[perm])
    assert abs(base.item() - shuffled.item()) < 1e-12


# ---------------------------------------------------------------------- EDA
def test_eda_extract_shapes(rng):
    eda = EdaModule(8, rng)
    out = eda_extract(rng.normal(size=(6, 8)), eda, 1)
    assert out.attractors.shape == (1, 8) and out.existence_probs.shape == (1,)
    with pytest.raises(ValueError):
        eda(Tensor(np.zeros((1, 6, 8))), 0)


def test_zero_input_decoder_recurrence(rng):
    eda = EdaModule(8, rng)
    for p in eda.decoder.parameters().values():
        p.data[...] = 0.0
    emb = Tensor(rng.normal(size=(1, 6, 8)))
    _, (_, c) = eda.encoder(emb)
    att, probs = eda(emb, 4)
    c = c.data[0]
    for k in range(4):
        c = 0.5 * c
        np.testing.assert_allclose(att.data[0, k], 0.5 * np.tanh(c), atol=1e-14)
    w, b = eda.exist.weight.data[:, 0], eda.exist.bias.data[0]
    np.testing.assert_allclose(probs.data[0], 1 / (1 + np.exp(-(att.data[0] @ w + b))), atol=1e-14)


# -------------------------------------------------------------------- model
def test_inference_high_threshold_gives_silence(rng):
    model = EendEdaModel(tiny(), seed=0)
    act, aset = eda_tsvad_forward(Tensor(rng.normal(size=(7, 12))), model, threshold=0.99)
    assert aset.count == 0 and act.shape == (7, 0)
    assert aset.attractors.shape == (0, 8)


def test_inference_shapes(rng):
    model = EendEdaModel(tiny("dot"), seed=0)
    act, aset = model.infer(Tensor(rng.normal(size=(7, 12))), threshold=0.0)
    assert aset.count == 5 and act.shape == (7, 5)


def test_inference_shuffle_is_seeded_and_keeps_frame_order(rng):
    x = Tensor(rng.normal(size=(9, 12)))
    model = EendEdaModel(tiny("dot"), seed=0)
    act, aset = model.infer(x, threshold=0.0)
    again, _ = model.infer(x, threshold=0.0)
    assert act.data.tobytes() == again.data.tobytes()
    emb = model.encoder(x.reshape(1, 9, 12))
    att, probs = model.eda(shuffle_time(emb, 0), 5)
    np.testing.assert_array_equal(aset.existence_probs, probs.data[0])
    np.testing.assert_array_equal(act.data, dot_match(emb, att).data[0])
    plain = EendEdaModel(tiny("dot", infer_shuffle=False), seed=0)
    _, p_plain = plain.eda(emb, 5)
    np.testing.assert_array_equal(plain.infer(x, threshold=0.0)[1].existence_probs, p_plain.data[0])


def test_forward_train_decodes_one_extra(rng):
    model = EendEdaModel(tiny(), seed=0)
    act, probs = model.forward_train(Tensor(rng.normal(size=(2, 7, 12))), 3, rng)
    assert act.shape == (2, 7, 3) and probs.shape == (2, 4)


def test_prepare(rng):
    model = EendEdaModel(tiny(), seed=0)
    feats = rng.normal(size=(20, 4)) + 5.0
    out = model.prepare(feats)
    assert out.shape == (10, 12)
    np.testing.assert_allclose(out[:, 4:8].mean(axis=0), (feats - feats.mean(0))[::2].mean(0), atol=1e-12)


def test_unknown_matcher():
    with pytest.raises(ValueError):
        EendEdaModel(tiny("cosine"))


# ------------------------------------------------------------------- losses
def test_existence_loss_examples(rng):
    assert existence_loss(Tensor(np.full(4, 0.5)), 3).item() == pytest.approx(np.log(2), abs=1e-15)
    eps = 1e-9
    assert existence_loss(Tensor(np.array([1 - eps, 1 - eps, eps])), 2).item() < 1e-8
    p = rng.uniform(0.05, 0.95, size=4)
    target = np.array([1, 1, 1, 0.0])
    assert abs(existence_loss(Tensor(p), 3).item() - bce_loop(p[None], target[None])) < 1e-10
    with pytest.raises(ValueError):
        existence_loss(Tensor(p), 2)


def test_pit_examples(rng):
    target = (rng.random((12, 3)) > 0.5).astype(float)
    eps = 1e-7
    pred = np.clip(target[:, [2, 0, 1]], eps, 1 - eps)
    loss, perm = pit_bce_loss(Tensor(pred), target)
    assert perm.tolist() == [2, 0, 1] and loss.item() < 1e-6
    single = rng.uniform(0.1, 0.9, size=(8, 1))
    t1 = (rng.random((8, 1)) > 0.5).astype(float)
    assert pit_bce_loss(Tensor(single), t1)[0].item() == bce_sum_loss(Tensor(single), t1).item()
    with pytest.raises(ValueError):
        pit_bce_loss(Tensor(pred), target[:, :2])


@pytest.mark.parametrize("s", [1, 2, 3, 4, 5, 6])
def test_pit_matches_exhaustive(s, rng):
    for _ in range(5):
        pred = rng.uniform(0.02, 0.98, size=(9, s))
        target = (rng.random((9, s)) > 0.5).astype(float)
        mask = (rng.random(9) > 0.2).astype(float)
        mask[0] = 1.0
        loss, _ = pit_bce_loss(Tensor(pred), target, mask)
        assert abs(loss.item() - exhaustive_pit(pred, target, mask)) < 1e-10


def test_pit_invariant_to_target_permutation(rng):
    pred = rng.uniform(0.02, 0.98, size=(9, 4))
    target = (rng.random((9, 4)) > 0.5).astype(float)
    a = pit_bce_loss(Tensor(pred), target)[0].item()
    b = pit_bce_loss(Tensor(pred), target[:, [3, 1, 0, 2]])[0].item()
    assert abs(a - b) < 1e-10


def test_batch_pit_uses_per_element_assignments(rng):
    pred = rng.uniform(0.02, 0.98, size=(3, 9, 2))
    target = (rng.random((3, 9, 2)) > 0.5).astype(float)
    loss, perms = batch_pit_loss(Tensor(pred), target)
    expected = np.mean([exhaustive_pit(pred[b], target[b]) for b in range(3)])
    assert abs(loss.item() - expected) < 1e-10 and len(perms) == 3


def test_combined_loss(rng):
    act = rng.uniform(0.02, 0.98, size=(9, 2))
    labels = (rng.random((9, 2)) > 0.5).astype(float)
    probs = rng.uniform(0.05, 0.95, size=3)
    pit, _ = pit_bce_loss(Tensor(act), labels)
    assert combined_loss(Tensor(act), labels, None, Tensor(probs), 2, alpha=0.0).item() == pit.item()
    total = combined_loss(Tensor(act), labels, None, Tensor(probs), 2, alpha=0.7).item()
    assert abs(total - (pit.item() + 0.7 * existence_loss(Tensor(probs), 2).item())) < 1e-12
    with pytest.raises(ValueError):
        combined_loss(Tensor(act), labels, None, Tensor(probs), 2, alpha=-1.0)


@pytest.mark.parametrize("matcher", ["dot", "tsvad"])
def test_combined_loss_gradients(matcher, rng):
    model = EendEdaModel(tiny(matcher), seed=2)
    x = Tensor(rng.normal(size=(1, 6, 12)))
    labels = (rng.random((1, 6, 2)) > 0.5).astype(float)
    _, perms = batch_pit_loss(model.forward_train(x, 2, np.random.default_rng(0))[0], labels)
    fixed = labels[:, :, perms[0]]

    def loss():
        act, probs = model.forward_train(x, 2, np.random.default_rng(0))
        return bce_sum_loss(act, fixed) + existence_loss(probs, 2)

    for name, param in model.named_parameters():
        idx = [tuple(int(rng.integers(n)) for n in param.shape) for _ in range(2)]
        assert grad_check(lambda _: loss(), param, indices=idx) < 1e-4, name
