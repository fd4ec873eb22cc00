import numpy as np
import pytest

from gradcheck_util import fd_max_rel_error, random_smooth_point

from rcvae.errors import ShapeError, StateError
from rcvae.labels import LabelKey, LabelVocab, build_vocab
from rcvae.model import (RcvaeConfig, RcvaeParams, decode, encode, forward, generate, loss_and_grads,
                         loss_terms, reparameterize, LatentStats)
from rcvae.numcore import Rng


def zero_params(cfg, n_labels=2):
    p = RcvaeParams.init(cfg, n_labels, Rng(0))
    for arr in p.named_arrays().values():
        arr[...] = 0.0
    return p


def test_config_invariants():
    with pytest.raises(ValueError):
        RcvaeConfig(d_x=4, enc_layers=1)
    with pytest.raises(ValueError):
        RcvaeConfig(d_x=4, latent_dim=9, hidden=8)


def test_encode_combined_length():
    cfg = RcvaeConfig(d_x=8, embed_dim=4, latent_dim=2, hidden=5, enc_layers=2, dec_layers=2)
    p = RcvaeParams.init(cfg, 1, Rng(0))
    assert p.encoder[0].in_dim == 12


def test_zero_network_stats_and_output():
    cfg = RcvaeConfig(d_x=6, embed_dim=3, latent_dim=2, hidden=4, enc_layers=2, dec_layers=2)
    p = zero_params(cfg)
    s = encode(p, np.ones(6), np.ones(3))
    assert np.all(s.mu == 0) and np.all(s.logvar == 0)
    assert np.all(decode(p, np.ones(2), np.ones(3)) == 0.5)


def test_encode_decode_pure():
    cfg = RcvaeConfig(d_x=6, embed_dim=3, latent_dim=2, hidden=4, enc_layers=2, dec_layers=3)
    p = RcvaeParams.init(cfg, 1, Rng(1))
    x, v, z = Rng(2).normal(6), Rng(3).normal(3), Rng(4).normal(2)
    a, b = encode(p, x, v), encode(p, x, v)
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.logvar, b.logvar)
    np.testing.assert_array_equal(decode(p, z, v), decode(p, z, v))
    assert decode(p, z, v).shape == (6,)


def test_shape_errors():
    cfg = RcvaeConfig(d_x=6, embed_dim=3, latent_dim=2, hidden=4, enc_layers=2, dec_layers=2)
    p = RcvaeParams.init(cfg, 1, Rng(0))
    with pytest.raises(ShapeError):
        encode(p, np.ones(5), np.ones(3))
    with pytest.raises(ShapeError):
        decode(p, np.ones(3), np.ones(3))


def test_reparameterize():
    s = LatentStats(np.array([1.0, 2.0]), np.array([0.0, 0.0]))
    np.testing.assert_allclose(reparameterize(s, [0.5, -0.5]), [1.5, 1.5])
    np.testing.assert_array_equal(reparameterize(s, [0.0, 0.0]), s.mu)
    tiny = LatentStats(np.array([1.0]), np.array([-np.inf]))
    assert reparameterize(tiny, [3.0])[0] == pytest.approx(1.0, abs=1e-3)


def test_forward_with_zero_eps_decodes_mean():
    cfg = RcvaeConfig(d_x=6, embed_dim=3, latent_dim=2, hidden=4, enc_layers=2, dec_layers=2)
    p = RcvaeParams.init(cfg, 2, Rng(5))
    x = Rng(6).uniform(6)
    r = forward(p, x, [1], eps=np.zeros(2))
    v = p.embedding.weight[1]
    np.testing.assert_array_equal(r.x_hat[:, 0], decode(p, encode(p, x, v).mu, v))


def test_forward_needs_noise_source():
    cfg = RcvaeConfig(d_x=6, embed_dim=3, latent_dim=2, hidden=4, enc_layers=2, dec_layers=2)
    with pytest.raises(StateError):
        forward(RcvaeParams.init(cfg, 1, Rng(0)), np.ones(6), [0])


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient(seed):
    cfg = RcvaeConfig(d_x=5, embed_dim=3, latent_dim=2, hidden=4, enc_layers=2, dec_layers=2)
    p, x, idx, eps = random_smooth_point(cfg, 3, 4, seed)
    assert fd_max_rel_error(p, x, idx, eps) < 1e-5


def test_logvar_clamp_blocks_gradient():
    cfg = RcvaeConfig(d_x=4, embed_dim=2, latent_dim=2, hidden=3, enc_layers=2, dec_layers=2)
    p = RcvaeParams.init(cfg, 1, Rng(0))
    p.logvar_head.bias[:] = 50.0  # far above the clamp
    _, grads = loss_and_grads(p, Rng(1).uniform(4), [0], np.ones(2))
    assert not np.any(grads["logvar_head.bias"])


def test_different_labels_different_outputs():
    cfg = RcvaeConfig(d_x=6, embed_dim=2, latent_dim=2, hidden=4, enc_layers=2, dec_layers=2)
    p = RcvaeParams.init(cfg, 2, Rng(3))
    p.embedding.weight[:] = [[1.0, 0.0], [0.0, 1.0]]
    x = Rng(4).uniform(6)
    a = forward(p, x, [0], eps=np.zeros(2)).x_hat
    b = forward(p, x, [1], eps=np.zeros(2)).x_hat
    assert not np.array_equal(a, b)


def test_generate_contract():
    cfg = RcvaeConfig(d_x=6, embed_dim=3, latent_dim=2, hidden=4, enc_layers=2, dec_layers=2)
    vocab = build_vocab(["800_20", "600_20"])
    p = RcvaeParams.init(cfg, 2, Rng(0))
    out, used = generate(p, vocab, LabelKey(800, 20), 3, Rng(9))
    assert out.shape == (3, 6) and np.all((out > 0) & (out < 1))
    again, _ = generate(p, vocab, LabelKey(800, 20), 3, Rng(9))
    np.testing.assert_array_equal(out, again)
    _, used = generate(p, vocab, LabelKey(805, 22), 1, Rng(9), weight=0.5)
    assert used == LabelKey(800, 20)


def test_generate_empty_vocab():
    cfg = RcvaeConfig(d_x=6, embed_dim=3, latent_dim=2, hidden=4, enc_layers=2, dec_layers=2)
    p = RcvaeParams.init(cfg, 1, Rng(0))
    with pytest.raises(StateError):
        generate(p, LabelVocab([]), LabelKey(10, 1), 1, Rng(0))


def test_decoder_output_in_unit_interval_for_extreme_inputs():
    cfg = RcvaeConfig(d_x=6, embed_dim=3, latent_dim=2, hidden=4, enc_layers=2, dec_layers=2)
    p = RcvaeParams.init(cfg, 1, Rng(0))
    out = decode(p, np.array([30.0, -30.0]), np.array([5.0, -5.0, 5.0]))
    assert np.all((out > 0) & (out < 1))
