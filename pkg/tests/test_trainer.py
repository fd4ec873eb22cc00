import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcvae.dataio import PackedDataset, SplitSpec, prepare, synth_generate
from rcvae.errors import DataError, FormatError, NumericError, UnsupportedVersionError
from rcvae.labels import LabelKey
from rcvae.model import RcvaeConfig, forward
from rcvae.numcore import Rng
from rcvae.trainer import (EarlyStopping, TrainConfig, checkpoint_from_bytes, fit_final, load_checkpoint,
                           loss_total, save_checkpoint, train, train_model, validate)


def tiny_data(n_batteries=8, n_cycles=8, H=4, W=4):
    recs = synth_generate(Rng(1), n_batteries, n_cycles, n_points=60)
    return prepare(recs, SplitSpec(seed=0, n_cycles=n_cycles), H, W)


def cfg_for(ds, **kw):
    base = dict(d_x=ds.d_x, embed_dim=4, latent_dim=2, hidden=16, enc_layers=4, dec_layers=4)
    base.update(kw)
    return RcvaeConfig(**base)


def trace_fn(values):
    return lambda params, vocab, epoch: values[epoch - 1]


def test_loss_perfect():
    x = np.array([[0.2], [0.7]])
    assert loss_total(x, x, np.zeros((1, 1)), np.zeros((1, 1))) == (0.0, 0.0, 0.0)


def test_loss_hand_case_mse():
    total, mse, kld = loss_total(np.array([[1.0], [1.0]]), np.array([[0.0], [1.0]]), np.zeros((1, 1)),
                                 np.zeros((1, 1)), k=1)
    assert (total, mse, kld) == (0.5, 0.5, 0.0)


@pytest.mark.parametrize("k", [1, 4])
def test_loss_hand_case_kld(k):
    x = np.full((3, k), 0.5)
    mu = np.zeros((1, k))
    mu[0, 0] = 1.0
    total, mse, kld = loss_total(x, x, mu, np.zeros((1, k)), k=k)
    assert kld == pytest.approx(0.5, abs=1e-12) and total == pytest.approx(0.5 / k, abs=1e-12)


def test_loss_k_must_match_batch():
    with pytest.raises(DataError):
        loss_total(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((1, 3)), np.zeros((1, 3)), k=2)


def test_loss_nonfinite():
    with pytest.raises(NumericError):
        loss_total(np.array([[np.nan]]), np.array([[0.0]]), np.zeros((1, 1)), np.zeros((1, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_loss_invariant_to_sample_order(seed, k):
    rng = Rng(seed)
    x, xh = rng.uniform(5 * k).reshape(5, k), rng.uniform(5 * k).reshape(5, k)
    mu, lv = rng.normal((3, k)), rng.normal((3, k))
    perm = rng.permutation(k)
    a = loss_total(xh, x, mu, lv)
    b = loss_total(xh[:, perm], x[:, perm], mu[:, perm], lv[:, perm])
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kld_nonnegative(seed):
    rng = Rng(seed)
    _, _, kld = loss_total(np.zeros((1, 4)), np.zeros((1, 4)), rng.normal((3, 4)), 3 * rng.normal((3, 4)))
    assert kld >= 0


def test_early_stop_trace():
    es = EarlyStopping(3)
    out = [es.update(e, v) for e, v in enumerate([5, 4, 4, 4, 4], start=1)]
    assert [s for _, s in out] == [False, False, False, False, True]
    assert es.best_epoch == 2


def test_train_stops_on_trace():
    ds = tiny_data()
    cfg = TrainConfig(max_epochs=20, patience=3, batch_size=16, seed=0)
    res = train_model(ds.train, ds.val, cfg_for(ds.train), cfg, validate_fn=trace_fn([5, 4, 4, 4, 4] + [4] * 15))
    assert res.state.epoch == 5 and res.state.best_epoch == 2 and res.state.stopped_early


def test_train_no_trigger_on_decreasing_trace():
    ds = tiny_data()
    cfg = TrainConfig(max_epochs=10, patience=3, batch_size=16, seed=0)
    res = train_model(ds.train, ds.val, cfg_for(ds.train), cfg, validate_fn=trace_fn(list(range(10, 0, -1))))
    assert res.state.epoch == 10 and res.state.counter == 0 and not res.state.stopped_early


def test_best_not_last_weights_returned():
    ds = tiny_data()
    cfg = TrainConfig(max_epochs=6, patience=10, batch_size=16, seed=0)
    snaps = {}

    def record(params, vocab, epoch):
        snaps[epoch] = params.copy()
        return [3, 1, 2, 2, 2, 2][epoch - 1]

    res = train_model(ds.train, ds.val, cfg_for(ds.train), cfg, validate_fn=record)
    np.testing.assert_array_equal(res.params.decoder[0].weight, snaps[2].decoder[0].weight)


def test_descent_on_toy_dataset():
    recs = synth_generate(Rng(1), 8, 8, n_points=60)
    prep = prepare(recs, SplitSpec(seed=0, n_cycles=8), 4, 4)
    full = prep.train.concat(prep.val).concat(prep.test)
    assert len(full) == 64
    cfg = TrainConfig(max_epochs=50, patience=100, batch_size=16, seed=0)
    res = train_model(full, None, cfg_for(full), cfg)
    assert res.state.train_loss[-1] < res.state.train_loss[0]


def test_validate_perfect_and_fixed_stream():
    ds = tiny_data()
    res = train_model(ds.train, None, cfg_for(ds.train), TrainConfig(max_epochs=2, batch_size=16))
    a = validate(res.params, res.vocab, ds.val)
    assert a == validate(res.params, res.vocab, ds.val)


def test_validate_constant_predictor_on_uniform_data():
    # the mean |U - 0.5| of uniforms is 0.25; use a model whose decoder outputs exactly 0.5
    X = Rng(3).uniform(200 * 96).reshape(200, 96)
    labels = [LabelKey(100, 1 + i % 5) for i in range(200)]
    ds = PackedDataset(X, labels, ["b"] * 200, 4, 4)
    res = train_model(ds, None, cfg_for(ds), TrainConfig(max_epochs=1, batch_size=64))
    for layer in [res.params.decoder_in] + res.params.decoder:
        layer.weight[:] = 0.0
        layer.bias[:] = 0.0
    assert validate(res.params, res.vocab, ds) == pytest.approx(0.25, abs=0.01)


def test_fit_final_modes():
    ds = tiny_data()
    mcfg = cfg_for(ds.train)
    tcfg = TrainConfig(max_epochs=4, patience=2, batch_size=16)
    ck, st_ = fit_final(ds.train, ds.val, mcfg, tcfg, ds.scaler, mode="fixed")
    assert st_.epoch == 4 and len(ck.vocab) > 0
    ck2, _ = fit_final(ds.train, ds.val, mcfg, tcfg, ds.scaler, mode="holdout")
    assert ck2.epochs_run >= 1


@pytest.fixture(scope="module")
def checkpoint():
    ds = tiny_data()
    ck, _ = train(ds.train, ds.val, cfg_for(ds.train), TrainConfig(max_epochs=3, batch_size=16), scaler=ds.scaler)
    return ck


def test_checkpoint_round_trip_bytes(tmp_path, checkpoint):
    save_checkpoint(checkpoint, tmp_path / "a.rcva")
    loaded = load_checkpoint(tmp_path / "a.rcva")
    save_checkpoint(loaded, tmp_path / "b.rcva")
    assert (tmp_path / "a.rcva").read_bytes() == (tmp_path / "b.rcva").read_bytes()
    assert loaded.vocab == checkpoint.vocab and loaded.layout == checkpoint.layout


def test_checkpoint_functional_identity(tmp_path, checkpoint):
    loaded = checkpoint_from_bytes(checkpoint.to_bytes())
    rng = Rng(8)
    n = 100
    x = rng.uniform(checkpoint.config.d_x * n).reshape(checkpoint.config.d_x, n)
    idx = (rng.uniform(n) * len(checkpoint.vocab)).astype(int)
    eps = rng.normal((checkpoint.config.latent_dim, n))
    a = forward(checkpoint.params, x, idx, eps=eps).x_hat
    b = forward(loaded.params, x, idx, eps=eps).x_hat
    assert np.array_equal(a, b)


def test_checkpoint_truncated(checkpoint):
    data = checkpoint.to_bytes()
    for cut in (0, 3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError, match="offset"):
            checkpoint_from_bytes(data[:cut])


def test_checkpoint_bad_magic(checkpoint):
    with pytest.raises(FormatError):
        checkpoint_from_bytes(b"XXXX" + checkpoint.to_bytes()[4:])


def test_checkpoint_future_version(checkpoint):
    data = bytearray(checkpoint.to_bytes())
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError):
        checkpoint_from_bytes(bytes(data))


def test_checkpoint_trailing_bytes(checkpoint):
    with pytest.raises(FormatError):
        checkpoint_from_bytes(checkpoint.to_bytes() + b"\0")


def test_divergence_reports_epoch():
    ds = tiny_data()
    cfg = TrainConfig(max_epochs=3, batch_size=16, lr=1e300)
    with pytest.raises(NumericError, match="epoch"):
        train_model(ds.train, None, cfg_for(ds.train), cfg)
