import math

import numpy as np
import pytest
import torch

from mixedkoop.adapkoopnet import (AdapKoopnet, LossWeights, ModelConfig, Predictor, TrainingDivergedError,
                                   dwa_update, lifted_paths, load_predictor, loss_components, loss_total,
                                   temporal_encoding, train)
from mixedkoop.dataio import DatasetSplit, split_and_normalize, synthetic_corpus

TINY = dict(context=4, horizon=2)


@pytest.fixture(scope="module")
def tiny_split():
    s = synthetic_corpus(n_runs=2, n_vehicles=3, seed=3, duration=40.0, stride=8, **TINY)
    return split_and_normalize(s, seed=0)


def _net(**kw):
    return AdapKoopnet(ModelConfig.desk(**{**TINY, **kw}))


def _ctx(n=3, P=4, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=(n, P, 5)))


# --------------------------------------------------------------------------- temporal encoding / ITE


def test_temporal_encoding_examples():
    te = temporal_encoding(6, 8)
    np.testing.assert_array_equal(te[0, 0::2], 0.0)
    np.testing.assert_array_equal(te[0, 1::2], 1.0)
    assert te[1, 0] == pytest.approx(0.84147, abs=1e-5)
    assert np.all(np.abs(temporal_encoding(50, 16)) <= 1.0)
    with pytest.raises(ValueError):
        temporal_encoding(3, 5)


def test_ite_examples():
    net = _net()
    ctx = _ctx()
    te = net.te[:4]
    with torch.no_grad():
        net.embed.weight.zero_()
        net.embed.bias.zero_()
        torch.testing.assert_close(net.ite(ctx), te.expand(3, -1, -1), rtol=0, atol=0)
        net.embed.bias.fill_(-1e3)
        torch.testing.assert_close(net.ite(ctx), te.expand(3, -1, -1), rtol=0, atol=0)


def test_ite_matches_numpy_reimplementation():
    net = _net()
    ctx = _ctx(seed=1)
    W, b = net.embed.weight.detach().numpy(), net.embed.bias.detach().numpy()
    want = np.maximum(ctx.numpy() @ W.T + b, 0.0) + temporal_encoding(4, 8)
    np.testing.assert_allclose(net.ite(ctx).detach().numpy(), want, atol=1e-9)


# --------------------------------------------------------------------------- attention blocks


def test_dti_singleton_and_softmax_rows():
    net = _net(context=1)
    x = torch.randn(2, 1, 8, dtype=torch.float64)
    _, w = net.dti(x)
    torch.testing.assert_close(w, torch.ones_like(w))
    net = _net()
    _, w = net.dti(net.ite(_ctx(seed=2)))
    torch.testing.assert_close(w.sum(-1), torch.ones(w.shape[:-1], dtype=torch.float64), atol=1e-6, rtol=0)
    assert torch.all(w >= 0)


def test_dti_layer_norm_statistics():
    net = _net()
    net.dti.ln2.eps = 0.0  # the pre-affine statistics without the stabiliser
    out, _ = net.dti(net.ite(_ctx(seed=3)))
    torch.testing.assert_close(out.mean(-1), torch.zeros(out.shape[:-1], dtype=torch.float64), atol=1e-6, rtol=0)
    torch.testing.assert_close(out.var(-1, unbiased=False), torch.ones(out.shape[:-1], dtype=torch.float64),
                               atol=1e-6, rtol=0)


def test_dsr_scenario_distribution():
    net = _net()
    h_dti, _ = net.dti(net.ite(_ctx(seed=4)))
    h_tc, h_tok, h_ds, _ = net.dsr_forward(h_dti)
    assert h_ds.shape == (3, 3) and h_tc.shape == h_dti.shape and h_tok.shape == (3, 8)
    torch.testing.assert_close(h_ds.sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-6, rtol=0)
    with torch.no_grad():
        net.scenario_head.weight.zero_()
        net.scenario_head.bias.zero_()
    torch.testing.assert_close(net.dsr_forward(h_dti)[2], torch.full((3, 3), 1 / 3, dtype=torch.float64))


def _permute_block(src, dst, perm):
    """Copy an encoder block with its model-width axis permuted."""
    with torch.no_grad():
        for name in ("q", "k", "v"):
            getattr(dst.attn, name).weight.copy_(getattr(src.attn, name).weight[:, perm])
        dst.attn.out.weight.copy_(src.attn.out.weight[perm])
        dst.attn.out.bias.copy_(src.attn.out.bias[perm])
        dst.ff1.weight.copy_(src.ff1.weight[:, perm])
        dst.ff1.bias.copy_(src.ff1.bias)
        dst.ff2.weight.copy_(src.ff2.weight[perm])
        dst.ff2.bias.copy_(src.ff2.bias[perm])
        for ln in ("ln1", "ln2"):
            getattr(dst, ln).weight.copy_(getattr(src, ln).weight[perm])
            getattr(dst, ln).bias.copy_(getattr(src, ln).bias[perm])


def test_dsr_permutation_equivariance():
    a, b = _net(seed=0), _net(seed=1)
    perm = torch.as_tensor(np.random.default_rng(5).permutation(8))
    _permute_block(a.dsr, b.dsr, perm)
    with torch.no_grad():
        b.se.copy_(a.se[perm])
        b.scenario_head.weight.copy_(a.scenario_head.weight[:, perm])
        b.scenario_head.bias.copy_(a.scenario_head.bias)
    x = torch.randn(4, 4, 8, dtype=torch.float64)
    ha = a.dsr_forward(x)
    hb = b.dsr_forward(x[..., perm])
    torch.testing.assert_close(hb[2], ha[2], atol=1e-9, rtol=0)
    torch.testing.assert_close(hb[0], ha[0][..., perm], atol=1e-9, rtol=0)


def test_dcse_examples():
    net = _net()
    row = torch.randn(8, dtype=torch.float64)
    h_tc = row.expand(2, 4, 8)
    h_ds = torch.full((2, 3), 1 / 3, dtype=torch.float64)
    dc, w = net.dcse_forward(h_tc, h_ds)
    torch.testing.assert_close(dc, row.expand(2, 8))
    h_tc = torch.randn(2, 4, 8, dtype=torch.float64)
    _, w = net.dcse_forward(h_tc, h_ds)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, dtype=torch.float64), atol=1e-6, rtol=0)
    with torch.no_grad():
        net.ds_fc.zero_()
        net.ds_fc[:, 0] = 3.0 * torch.arange(8, dtype=torch.float64) / 8
    one_hot = torch.tensor([[1.0, 0, 0]] * 2, dtype=torch.float64)
    mix = torch.tensor([[0.2, 0.4, 0.4]] * 2, dtype=torch.float64)
    assert (net.dcse_forward(h_tc, one_hot)[0] - net.dcse_forward(h_tc, mix)[0]).abs().max() > 1e-3
    with torch.no_grad():
        net.ds_fc[:] = net.ds_fc[:, :1]  # equal columns: the scenario no longer matters
    torch.testing.assert_close(net.dcse_forward(h_tc, one_hot)[0], net.dcse_forward(h_tc, mix)[0])


def test_glu_gate():
    net = _net()
    es = torch.randn(5, 2, dtype=torch.float64)
    dc = torch.randn(5, 8, dtype=torch.float64)
    assert net.encode_state(es, dc).shape == (5, 8)
    with torch.no_grad():
        net.gate.weight.zero_()
        net.gate.bias.fill_(-1e3)
    assert net.encode_state(es, dc).abs().max() < 1e-12
    with torch.no_grad():
        net.gate.bias.zero_()
        z = torch.relu(net.state_embed(es))
        for layer in net.state_layers:
            z = torch.tanh(layer(z))
        value = net.gate_value(torch.cat([dc, z], -1))
    torch.testing.assert_close(net.encode_state(es, dc), 0.5 * value)


# --------------------------------------------------------------------------- linear part


def test_evolve_examples():
    net = _net(d_model=2, attention_heads=1, d_att=2)
    with torch.no_grad():
        net.A.copy_(torch.eye(2))
        net.B.zero_()
    s0 = torch.tensor([[1.0, -2.0]], dtype=torch.float64)
    out = net.evolve(s0, torch.randn(1, 3, dtype=torch.float64))
    torch.testing.assert_close(out, s0.expand(1, 3, 2)[:, :, :] + 0 * out)
    with torch.no_grad():
        net.A.copy_(torch.diag(torch.tensor([2.0, 0.0])))
        net.B.copy_(torch.tensor([[1.0], [0.0]]))
    out = net.evolve(torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.ones(1, 2, dtype=torch.float64))
    torch.testing.assert_close(out[0, :, 0], torch.tensor([3.0, 7.0], dtype=torch.float64))


def test_decode_examples():
    net = _net()
    with torch.no_grad():
        net.decoder.weight.zero_()
        net.decoder.weight[0, 0] = net.decoder.weight[1, 1] = 1.0
    s = torch.zeros(1, 8, dtype=torch.float64)
    s[0, :2] = torch.tensor([3.0, 5.0])
    torch.testing.assert_close(net.decode(s), torch.tensor([[3.0, 5.0]], dtype=torch.float64))
    s = torch.randn(4, 8, dtype=torch.float64)
    torch.testing.assert_close(net.decode(2.5 * s), 2.5 * net.decode(s))
    assert net.decoder.bias is None


def test_zero_decoder_predicts_feature_means(tiny_split):
    net = _net()
    with torch.no_grad():
        net.decoder.weight.zero_()
    pred = Predictor(net, tiny_split.normalizer).predict_multistep(tiny_split.test)
    mean = tiny_split.normalizer.mean
    np.testing.assert_allclose(pred[..., 0], mean[0], atol=1e-12)
    np.testing.assert_allclose(pred[..., 1], mean[1], atol=1e-12)


def test_predictor_determinism_and_shape_checks(tiny_split):
    p = Predictor(_net(), tiny_split.normalizer)
    w = tiny_split.test[0]
    a, b = p.predict_multistep(w), p.predict_multistep(w)
    assert a.shape == (2, 2)
    np.testing.assert_array_equal(a, b)
    long = synthetic_corpus(n_runs=1, n_vehicles=2, seed=0, duration=30.0, stride=50)
    with pytest.raises(ValueError, match="expects"):
        p.predict_multistep(long)


def test_forced_scenario(tiny_split):
    p = Predictor(_net(), tiny_split.normalizer)
    w = tiny_split.test[0]
    own = p.scenario_probs(w)[0]
    np.testing.assert_allclose(p.predict_with_forced_scenario(w, own), p.predict_multistep(w), atol=1e-9)
    with torch.no_grad():
        p.net.ds_fc.zero_()
        p.net.ds_fc[:, 1] = 4.0 * torch.arange(8, dtype=torch.float64) / 8
    e = np.eye(3)[0]
    gap = p.predict_with_forced_scenario(w, e) - p.predict_with_forced_scenario(w, np.eye(3)[1])
    assert np.sqrt(np.mean(gap ** 2)) > 0
    with pytest.raises(ValueError, match="probability"):
        p.predict_with_forced_scenario(w, [0.5, 0.6, -0.1])
    with pytest.raises(ValueError):
        Predictor(_net(variant="koopnet"), tiny_split.normalizer).predict_with_forced_scenario(w, e)


def test_attention_maps_are_distributions(tiny_split):
    maps = Predictor(_net(), tiny_split.normalizer).attention_maps(tiny_split.test[0])
    for k in ("dti", "dsr", "dcse"):
        np.testing.assert_allclose(maps[k].sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(maps["scenario"].sum(), 1.0, atol=1e-6)


# --------------------------------------------------------------------------- losses and weighting


class _IdentityDecoder:
    def decode(self, s):
        return s


def test_loss_components_hand_computation():
    # d = 2, F = 1, identity read-out
    s_enc = torch.tensor([[[1.0, 2.0], [3.0, 5.0]]])
    s_pred = torch.tensor([[[2.0, 4.0]]])
    es_true = torch.tensor([[[1.0, 1.0], [3.0, 3.0]]])
    L_C, L_P, L_E = loss_components(_IdentityDecoder(), s_enc, s_pred, es_true)
    assert L_C.item() == pytest.approx((0 + 1 + 0 + 4) / 4)
    assert L_P.item() == pytest.approx((1 + 1) / 2)
    assert L_E.item() == pytest.approx((1 + 1) / 2)
    perfect = loss_components(_IdentityDecoder(), es_true, es_true[:, 1:], es_true)
    assert all(c.item() == 0 for c in perfect)


def test_loss_total_weighting(tiny_split):
    net = _net()
    batch = torch.as_tensor(tiny_split.normalizer.normalize_window(tiny_split.train.data[:8]))
    total, comps = loss_total(net, batch, (1.0, 0.0, 0.0))
    assert total.item() == comps["L_C"].item()
    s_enc, s_pred, es_true = lifted_paths(net, batch)
    assert s_enc.shape == (8, 3, 8) and s_pred.shape == (8, 2, 8) and es_true.shape == (8, 3, 2)
    total, comps = loss_total(net, batch, LossWeights((0.5, 2.0, 1.5)))
    assert total.item() == pytest.approx(0.5 * comps["L_C"].item() + 2 * comps["L_P"].item()
                                         + 1.5 * comps["L_E"].item(), rel=1e-12)


def test_dwa_examples():
    assert dwa_update([]).alpha == (1.0, 1.0, 1.0)
    assert dwa_update([(1, 2, 3)]).alpha == (1.0, 1.0, 1.0)
    np.testing.assert_allclose(dwa_update([(4, 2, 8), (2, 1, 4)]).alpha, 1.0)
    a = dwa_update([(4, 4, 4), (2, 4, 2)]).alpha
    assert a[1] > a[0] and a[1] > a[2] and sum(a) == pytest.approx(3.0)
    r = np.array([0.5, 1.0, 0.5])
    want = 3 * np.exp(r / 2) / np.exp(r / 2).sum()
    np.testing.assert_allclose(a, want, atol=1e-12)


# --------------------------------------------------------------------------- training


def test_one_step_decreases_loss(tiny_split):
    norm = tiny_split.normalizer
    batch = tiny_split.train[np.arange(8)]
    one = DatasetSplit(batch, batch, batch, norm, 0)
    cfg = ModelConfig.desk(max_epochs=1, batch=8, lr=1e-3, **TINY)
    x = torch.as_tensor(norm.normalize_window(batch.data))
    before = loss_total(AdapKoopnet(cfg), x)[0].item()
    predictor, _ = train(one, cfg)
    after = loss_total(predictor.net, x)[0].item()
    assert after < before


def test_training_is_deterministic(tiny_split):
    cfg = ModelConfig.desk(max_epochs=1, **TINY)
    h1 = train(tiny_split, cfg)[1]
    h2 = train(tiny_split, cfg)[1]
    assert h1[0]["train_loss"] == h2[0]["train_loss"] and h1[0]["val_loss"] == h2[0]["val_loss"]


def test_history_rows_and_lr_decay(tiny_split):
    cfg = ModelConfig.desk(max_epochs=3, lr_decay=0.5, **TINY)
    _, hist = train(tiny_split, cfg)
    assert [h["epoch"] for h in hist] == [1, 2, 3]
    assert hist[0]["alpha"] == [1.0, 1.0, 1.0] and hist[1]["alpha"] == [1.0, 1.0, 1.0]
    assert sum(hist[2]["alpha"]) == pytest.approx(3.0)
    assert hist[2]["lr"] == pytest.approx(cfg.lr * 0.5 ** 3)


def test_divergence_names_epoch_and_batch(tiny_split):
    bad = tiny_split.train.data.copy()
    bad[:, :, 0] = np.nan
    broken = DatasetSplit(type(tiny_split.train)(bad, 4, 2), tiny_split.val, tiny_split.test,
                          tiny_split.normalizer, 0)
    with pytest.raises(TrainingDivergedError, match="epoch 0, batch 0"):
        train(broken, ModelConfig.desk(max_epochs=1, **TINY))


def test_export_equivalence_and_round_trip(tmp_path, tiny_split):
    predictor, _ = train(tiny_split, ModelConfig.desk(max_epochs=2, **TINY))
    model = predictor.export_koopman_blocks()
    assert model.A.shape == (8, 8) and model.B.shape == (8, 1) and model.C.shape == (2, 8)
    w = tiny_split.test
    np.testing.assert_allclose(model.predict(w.context_features, w.future_lead_v),
                               predictor.predict_multistep(w), atol=1e-9)
    path = predictor.save(tmp_path / "m.ckpt")
    back = load_predictor(path)
    assert back.epoch == 2 and len(back.history) == 2
    exported = back.export_koopman_blocks()
    for k in ("A", "B", "C"):
        np.testing.assert_array_equal(getattr(exported, k), getattr(model, k))
    np.testing.assert_array_equal(back.predict_multistep(w), predictor.predict_multistep(w))


def test_resume_continues_epoch_counter(tiny_split):
    first, _ = train(tiny_split, ModelConfig.desk(max_epochs=2, **TINY))
    resumed, hist = train(tiny_split, first.config, resume=first, epochs=2)
    assert resumed.epoch == 4 and [h["epoch"] for h in hist] == [1, 2, 3, 4]
    assert hist[2]["lr"] == pytest.approx(first.config.lr * first.config.lr_decay ** 3)


@pytest.mark.parametrize("variant", ["koopnet", "s-adapkoopnet"])
def test_ablation_variants_build_and_train(tiny_split, variant):
    cfg = ModelConfig.desk(variant=variant, max_epochs=1, **TINY)
    predictor, hist = train(tiny_split, cfg)
    assert math.isfinite(hist[0]["train_loss"])
    if variant == "s-adapkoopnet":
        assert predictor.net.dim == 4
    else:
        assert not hasattr(predictor.net, "embed")
    w = tiny_split.test
    model = predictor.export_koopman_blocks()
    np.testing.assert_allclose(model.predict(w.context_features, w.future_lead_v),
                               predictor.predict_multistep(w), atol=1e-9)


@pytest.mark.slow
def test_forced_argmax_on_confident_window(desk_predictor, desk_split):
    probs = desk_predictor.scenario_probs(desk_split.test)
    confident = np.flatnonzero(probs.max(axis=1) > 0.95)
    if confident.size == 0:
        pytest.skip("trained desk model has no window with scenario probability above 0.95")
    w = desk_split.test[confident]
    k = probs[confident].argmax(axis=1)
    gaps = []
    for i in range(len(w)):
        forced = desk_predictor.predict_with_forced_scenario(w[i], np.eye(3)[k[i]])
        gaps.append(np.sqrt(np.mean((forced[:, 0] - desk_predictor.predict_multistep(w[i])[:, 0]) ** 2)))
    assert max(gaps) < 0.1
