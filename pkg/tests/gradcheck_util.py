"""Finite-difference oracle for the full model loss."""
import numpy as np

from rcvae.model import RcvaeParams, forward, loss_and_grads, loss_terms
from rcvae.numcore import Rng

KINK_MARGIN = 1e-4


def _min_abs_preactivation(params, x, idx, eps):
    r = forward(params, x, idx, eps=eps)
    recs = r.cache["enc_tape"].records + r.cache["dec_tape"].records
    return min(np.abs(rec.pre).min() for rec in recs)


def random_smooth_point(cfg, n_labels, batch, seed, tries=50):
    """Params with random biases plus inputs whose ReLU pre-activations all keep
    a margin from 0, so central differences never straddle a kink."""
    for t in range(tries):
        rng = Rng(seed).spawn("gradcheck", t)
        p = RcvaeParams.init(cfg, n_labels, rng.spawn("init"))
        for _, layer in p.layers():
            layer.bias[:] = 0.1 * rng.normal(layer.bias.shape)
        x = rng.uniform(cfg.d_x * batch).reshape(cfg.d_x, batch)
        idx = [int(i) for i in (rng.uniform(batch) * n_labels).astype(int)]
        eps = rng.normal((cfg.latent_dim, batch))
        if _min_abs_preactivation(p, x, idx, eps) > KINK_MARGIN:
            return p, x, idx, eps
    raise RuntimeError("no kink-free point found")


def fd_max_rel_error(params, x, idx, eps, h=1e-6):
    """Max over every parameter entry of |analytic - central FD| / max(1, |.|)."""

    def total():
        r = forward(params, x, idx, eps=eps)
        return loss_terms(r.x_hat, x, r.stats.mu, r.stats.logvar)[0]

    _, grads = loss_and_grads(params, x, idx, eps)
    worst = 0.0
    for name, arr in params.named_arrays().items():
        g = grads[name]
        assert g.shape == arr.shape, name
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            up = total()
            arr[i] = old - h
            down = total()
            arr[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - g[i]) / max(1.0, abs(num), abs(g[i])))
    return worst
