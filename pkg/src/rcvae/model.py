"""Label-embedding conditioned VAE over flattened quasi-video features.

Layout (``h`` is a single hidden width shared by every hidden layer)::

    encoder:  [v ; x] -> E1 (D+d_X -> h) -> E2..E_Lenc (h -> h) -> a_L
    heads:    mu = W_mu a_L + b_mu,  logvar = W_s a_L + b_s      (h -> J)
    sample:   z = mu + exp(logvar / 2) * eps
    decoder:  [z ; v] -> input projection (J+D -> h)
              -> D1..D_{Ldec-1} (h -> h) -> D_Ldec (h -> d_X, sigmoid)

Every numbered layer except E1 and D_Ldec is square, so any one of them can
be bypassed at inference without a shape change.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError
from .labels import DEFAULT_MATCH_WEIGHT, EmbeddingTable, LabelVocab, match_similar
from .numcore import (
    Activation,
    AffineLayer,
    Rng,
    as_column_batch,
    backward,
    check_finite,
    stack_forward,
)

LOGVAR_MIN, LOGVAR_MAX = -20.0, 20.0


@dataclass(frozen=True)
class RcvaeConfig:
    d_x: int
    embed_dim: int = 16
    latent_dim: int = 8
    hidden: int = 64
    enc_layers: int = 4
    dec_layers: int = 4

    def __post_init__(self):
        for name in ("d_x", "embed_dim", "latent_dim", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.enc_layers < 2 or self.dec_layers < 2:
            raise ValueError("encoder and decoder need at least 2 layers each")
        if self.hidden < self.latent_dim:
            raise ValueError(f"hidden width {self.hidden} must be >= latent dim {self.latent_dim}")

    def as_ints(self) -> tuple:
        return (self.d_x, self.embed_dim, self.latent_dim, self.hidden, self.enc_layers, self.dec_layers)


@dataclass
class RcvaeParams:
    config: RcvaeConfig
    encoder: list
    mu_head: AffineLayer
    logvar_head: AffineLayer
    decoder_in: AffineLayer
    decoder: list
    embedding: EmbeddingTable

    def __post_init__(self):
        c = self.config
        expect_enc = [(c.embed_dim + c.d_x, c.hidden)] + [(c.hidden, c.hidden)] * (c.enc_layers - 1)
        expect_dec = [(c.hidden, c.hidden)] * (c.dec_layers - 1) + [(c.hidden, c.d_x)]
        got_enc = [(l.in_dim, l.out_dim) for l in self.encoder]
        got_dec = [(l.in_dim, l.out_dim) for l in self.decoder]
        if got_enc != expect_enc or got_dec != expect_dec:
            raise ShapeError("layer shapes do not match the configuration")
        for head in (self.mu_head, self.logvar_head):
            if (head.in_dim, head.out_dim) != (c.hidden, c.latent_dim):
                raise ShapeError("latent head shape does not match the configuration")
        if (self.decoder_in.in_dim, self.decoder_in.out_dim) != (c.latent_dim + c.embed_dim, c.hidden):
            raise ShapeError("decoder input projection does not match the configuration")
        if self.embedding.dim != c.embed_dim:
            raise ShapeError("embedding dim does not match the configuration")

    @classmethod
    def init(cls, config: RcvaeConfig, n_labels: int, rng: Rng) -> "RcvaeParams":
        c = config
        relu, ident, sig = Activation.RELU, Activation.IDENTITY, Activation.SIGMOID
        g = AffineLayer.glorot
        encoder = [g(c.embed_dim + c.d_x, c.hidden, relu, rng.spawn("enc", 0))]
        encoder += [g(c.hidden, c.hidden, relu, rng.spawn("enc", i)) for i in range(1, c.enc_layers)]
        decoder = [g(c.hidden, c.hidden, relu, rng.spawn("dec", i)) for i in range(c.dec_layers - 1)]
        decoder.append(g(c.hidden, c.d_x, sig, rng.spawn("dec", c.dec_layers - 1)))
        return cls(
            config=c,
            encoder=encoder,
            mu_head=g(c.hidden, c.latent_dim, ident, rng.spawn("mu")),
            logvar_head=g(c.hidden, c.latent_dim, ident, rng.spawn("logvar")),
            decoder_in=g(c.latent_dim + c.embed_dim, c.hidden, relu, rng.spawn("dec_in")),
            decoder=decoder,
            embedding=EmbeddingTable.init(n_labels, c.embed_dim, rng.spawn("embedding")),
        )

    def layers(self):
        """``(name, layer)`` pairs in canonical order."""
        out = [(f"encoder.{i}", l) for i, l in enumerate(self.encoder)]
        out += [("mu_head", self.mu_head), ("logvar_head", self.logvar_head), ("decoder_in", self.decoder_in)]
        out += [(f"decoder.{i}", l) for i, l in enumerate(self.decoder)]
        return out

    def named_arrays(self) -> dict:
        """Every trainable array by path; the arrays are live views, not copies."""
        arrays = {}
        for name, layer in self.layers():
            arrays[f"{name}.weight"] = layer.weight
            arrays[f"{name}.bias"] = layer.bias
        arrays["embedding.weight"] = self.embedding.weight
        return arrays

    def copy(self) -> "RcvaeParams":
        return RcvaeParams(
            self.config,
            [l.copy() for l in self.encoder],
            self.mu_head.copy(),
            self.logvar_head.copy(),
            self.decoder_in.copy(),
            [l.copy() for l in self.decoder],
            self.embedding.copy(),
        )


@dataclass
class LatentStats:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class ForwardResult:
    x_hat: np.ndarray
    stats: LatentStats
    z: np.ndarray
    eps: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def _encoder_skip(params, skip) -> frozenset:
    # numbered encoder layers are 1-based
    return frozenset(k - 1 for k in skip)


def _decoder_stack(params):
    return [params.decoder_in] + list(params.decoder)


def _decoder_skip(params, skip) -> frozenset:
    # index 0 of the stack is the unnumbered input projection
    return frozenset(int(k) for k in skip)


def _encode_batch(params, x, v, skip=()):
    c = params.config
    if x.shape[0] != c.d_x or v.shape[0] != c.embed_dim:
        raise ShapeError(f"encode expects x of {c.d_x} and v of {c.embed_dim} rows, got {x.shape[0]}, {v.shape[0]}")
    if x.shape[1] != v.shape[1]:
        raise ShapeError("x and v batch sizes differ")
    combined = np.vstack([v, x])
    a, tape = stack_forward(params.encoder, combined, _encoder_skip(params, skip))
    mu = params.mu_head.weight @ a + params.mu_head.bias
    raw = params.logvar_head.weight @ a + params.logvar_head.bias
    logvar = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
    check_finite(mu, "mu")
    check_finite(logvar, "logvar")
    return LatentStats(mu, logvar), (tape, a, raw)


def _decode_batch(params, z, v, skip=()):
    c = params.config
    if z.shape[0] != c.latent_dim or v.shape[0] != c.embed_dim:
        raise ShapeError(f"decode expects z of {c.latent_dim} and v of {c.embed_dim} rows")
    if z.shape[1] != v.shape[1]:
        raise ShapeError("z and v batch sizes differ")
    out, tape = stack_forward(_decoder_stack(params), np.vstack([z, v]), _decoder_skip(params, skip))
    return out, tape


def _restore_ndim(arr, like_1d):
    return arr[:, 0] if like_1d else arr


def encode(params: RcvaeParams, x, v, skip=()) -> LatentStats:
    """Latent mean and clamped log-variance for features ``x`` under condition ``v``."""
    one = np.ndim(x) == 1
    stats, _ = _encode_batch(params, as_column_batch(x), as_column_batch(v), skip)
    return LatentStats(_restore_ndim(stats.mu, one), _restore_ndim(stats.logvar, one))


def reparameterize(stats: LatentStats, eps) -> np.ndarray:
    logvar = np.clip(stats.logvar, LOGVAR_MIN, LOGVAR_MAX)
    return stats.mu + np.exp(0.5 * logvar) * np.asarray(eps, dtype=np.float64)


def decode(params: RcvaeParams, z, v, skip=()) -> np.ndarray:
    one = np.ndim(z) == 1
    out, _ = _decode_batch(params, as_column_batch(z), as_column_batch(v), skip)
    return _restore_ndim(out, one)


def forward(params: RcvaeParams, x, indices, eps=None, rng: Rng | None = None,
            skip_encoder=(), skip_decoder=(), zero_embedding: bool = False) -> ForwardResult:
    """Embed, concatenate, encode, sample, concatenate, decode.

    ``x`` is ``(d_X, B)`` (or one vector) and ``indices`` the vocabulary index
    of each column's label. Noise comes from ``eps`` if given, else ``rng``.
    """
    x = as_column_batch(x)
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if indices.shape[0] != x.shape[1]:
        raise ShapeError(f"{indices.shape[0]} labels for a batch of {x.shape[1]}")
    v = params.embedding.lookup(indices)
    if zero_embedding:
        v = np.zeros_like(v)
    stats, (enc_tape, a_last, raw_logvar) = _encode_batch(params, x, v, skip_encoder)
    if eps is None:
        if rng is None:
            raise StateError("forward needs either eps or an rng")
        eps = rng.normal(stats.mu.shape)
    eps = as_column_batch(eps).reshape(stats.mu.shape)
    z = reparameterize(stats, eps)
    x_hat, dec_tape = _decode_batch(params, z, v, skip_decoder)
    cache = {"enc_tape": enc_tape, "dec_tape": dec_tape, "a_last": a_last, "raw_logvar": raw_logvar,
             "indices": indices, "x": x}
    return ForwardResult(x_hat, stats, z, eps, cache)


def loss_terms(x_hat, x, mu, logvar):
    """``(total, mse, kld)``: MSE over every element, KLD summed over batch and
    latent dims, total = MSE + KLD / K with K the number of samples."""
    x_hat, x = as_column_batch(x_hat), as_column_batch(x)
    mu, logvar = as_column_batch(mu), as_column_batch(logvar)
    if x_hat.shape != x.shape or mu.shape != logvar.shape or mu.shape[1] != x.shape[1]:
        raise ShapeError("loss inputs have inconsistent shapes")
    for arr, what in ((x_hat, "reconstruction"), (x, "target"), (mu, "mu"), (logvar, "logvar")):
        check_finite(arr, what)
    k = x.shape[1]
    mse = float(np.mean((x - x_hat) ** 2))
    kld = float(-0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar)))
    return mse + kld / k, mse, kld


def loss_and_grads(params: RcvaeParams, x, indices, eps):
    """Total loss on one batch and its gradient for every trainable array.

    Returns ``((total, mse, kld), grads)`` with ``grads`` keyed like
    :meth:`RcvaeParams.named_arrays`.
    """
    res = forward(params, x, indices, eps=eps)
    x = res.cache["x"]
    mu, logvar = res.stats.mu, res.stats.logvar
    total, mse, kld = loss_terms(res.x_hat, x, mu, logvar)
    c = params.config
    k = x.shape[1]

    g_xhat = 2.0 * (res.x_hat - x) / x.size
    dec_grads, g_dec_in = backward(res.cache["dec_tape"], g_xhat)
    g_z, g_v_dec = g_dec_in[: c.latent_dim], g_dec_in[c.latent_dim:]

    std = np.exp(0.5 * logvar)
    g_mu = g_z + mu / k
    g_logvar = g_z * res.eps * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / k
    raw = res.cache["raw_logvar"]
    g_logvar = g_logvar * ((raw >= LOGVAR_MIN) & (raw <= LOGVAR_MAX))

    a = res.cache["a_last"]
    grads = {}
    grads["mu_head.weight"] = g_mu @ a.T
    grads["mu_head.bias"] = g_mu.sum(axis=1, keepdims=True)
    grads["logvar_head.weight"] = g_logvar @ a.T
    grads["logvar_head.bias"] = g_logvar.sum(axis=1, keepdims=True)
    g_a = params.mu_head.weight.T @ g_mu + params.logvar_head.weight.T @ g_logvar
    enc_grads, g_enc_in = backward(res.cache["enc_tape"], g_a)
    g_v = g_v_dec + g_enc_in[: c.embed_dim]

    for i, (gw, gb) in enumerate(enc_grads):
        grads[f"encoder.{i}.weight"], grads[f"encoder.{i}.bias"] = gw, gb
    grads["decoder_in.weight"], grads["decoder_in.bias"] = dec_grads[0]
    for i, (gw, gb) in enumerate(dec_grads[1:]):
        grads[f"decoder.{i}.weight"], grads[f"decoder.{i}.bias"] = gw, gb
    grads["embedding.weight"] = params.embedding.scatter_grad(res.cache["indices"], g_v)
    return (total, mse, kld), grads


def reconstruct(params: RcvaeParams, X, indices, eps, **ablation) -> np.ndarray:
    """Reconstructions for row-major samples ``X`` of shape ``(N, d_X)``; returns ``(N, d_X)``."""
    X = np.asarray(X, dtype=np.float64)
    res = forward(params, X.T, indices, eps=np.asarray(eps).reshape(params.config.latent_dim, -1), **ablation)
    return res.x_hat.T


def generate(params: RcvaeParams, vocab: LabelVocab, query, count: int, rng: Rng,
             weight: float = DEFAULT_MATCH_WEIGHT, zero_embedding: bool = False):
    """Draw ``count`` feature vectors for condition ``query``.

    Unseen conditions are replaced by their nearest vocabulary label. Returns
    ``(samples, used_label)`` with ``samples`` shaped ``(count, d_X)``.
    """
    if len(vocab) == 0:
        raise StateError("cannot generate with an empty vocabulary")
    if count < 1:
        raise ValueError("count must be >= 1")
    if params.embedding.num_embeddings != len(vocab):
        raise ShapeError("embedding rows do not match the vocabulary")
    key = match_similar(vocab, query, weight)
    v = np.repeat(params.embedding.lookup([vocab.index(key)]), count, axis=1)
    if zero_embedding:
        v = np.zeros_like(v)
    z = rng.normal((params.config.latent_dim, count))
    out, _ = _decode_batch(params, z, v)
    return out.T, key
