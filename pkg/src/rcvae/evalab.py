"""Test-set metrics and the layer/embedding ablation harness."""
from __future__ import annotations

import csv
import dataclasses
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .dataio import TYPES, PackedDataset, scale_invert, unpack_array
from .errors import ShapeError, SpecError
from .labels import resolve_labels
from .model import RcvaeConfig, reconstruct
from .numcore import Rng

log = logging.getLogger(__name__)

REPORT_SEED = 20240
REPORT_HEADER = ("detach", "mae_total", "rmse_total") + tuple(
    f"{m}_{t}" for t in TYPES for m in ("mae", "rmse")
)
UNITS = {"V": "V", "I": "C", "T": "degC", "Qc": "Ah"}


def _pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    if x.shape != x_hat.shape:
        raise ShapeError(f"length mismatch: {x.size} vs {x_hat.size}")
    if x.size == 0:
        raise ShapeError("metrics need at least one value")
    return x, x_hat


def mae(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    return float(np.mean(np.abs(x - x_hat)))


def rmse(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    return float(np.sqrt(np.mean((x - x_hat) ** 2)))


@dataclass
class MetricsReport:
    """Per-type errors in physical units plus weighted totals on scaled values."""

    detach: str
    mae: dict
    rmse: dict
    mae_total: float
    rmse_total: float
    mae_scaled: dict
    rmse_scaled: dict
    n_samples: int
    n_values: int
    type_weights: dict
    matched: list = field(default_factory=list)
    units: dict = field(default_factory=lambda: dict(UNITS))

    def row(self) -> dict:
        out = {"detach": self.detach, "mae_total": self.mae_total, "rmse_total": self.rmse_total}
        for t in TYPES:
            out[f"mae_{t}"] = self.mae[t]
            out[f"rmse_{t}"] = self.rmse[t]
        return out


@dataclass(frozen=True)
class AblationSpec:
    """What to remove: ``target`` in {"none", "encoder", "decoder", "embedding"};
    ``layer`` is the 1-based index for encoder/decoder targets."""

    target: str = "none"
    layer: int | None = None
    mode: str = "skip"

    def __post_init__(self):
        if self.target not in ("none", "encoder", "decoder", "embedding"):
            raise SpecError(f"unknown ablation target {self.target!r}")
        if self.mode not in ("skip", "retrain"):
            raise SpecError(f"unknown ablation mode {self.mode!r}")
        if (self.layer is None) != (self.target in ("none", "embedding")):
            raise SpecError(f"target {self.target!r} {'needs' if self.layer is None else 'takes no'} layer index")

    @property
    def name(self) -> str:
        if self.target == "none":
            return "None"
        if self.target == "embedding":
            return "Embedding"
        return f"{self.target.capitalize()}_{self.layer}"

    @classmethod
    def parse(cls, name: str, mode: str = "skip") -> "AblationSpec":
        text = name.strip()
        if text.lower() == "none":
            return cls("none", None, mode)
        if text.lower() == "embedding":
            return cls("embedding", None, mode)
        m = re.fullmatch(r"(?i)(encoder|decoder)_(\d+)", text)
        if not m:
            raise SpecError(f"cannot parse ablation spec {name!r}")
        return cls(m.group(1).lower(), int(m.group(2)), mode)

    def validate(self, config: RcvaeConfig) -> None:
        if self.target == "encoder" and not 2 <= self.layer <= config.enc_layers:
            raise SpecError(f"Encoder_{self.layer} is not removable (valid: 2..{config.enc_layers})")
        if self.target == "decoder" and not 1 <= self.layer <= config.dec_layers - 1:
            raise SpecError(f"Decoder_{self.layer} is not removable (valid: 1..{config.dec_layers - 1})")
        if self.mode == "retrain" and self.target == "embedding":
            raise SpecError("retrain mode removes layers only; use skip mode for the embedding")
        if self.mode == "retrain" and self.target in ("encoder", "decoder"):
            count = config.enc_layers if self.target == "encoder" else config.dec_layers
            if count - 1 < 2:
                raise SpecError(f"retraining without {self.name} leaves fewer than 2 layers")


def sweep_specs(config: RcvaeConfig, mode: str = "skip") -> list:
    """Every removable layer, then the baseline and the embedding.

    Order interleaves decoder and encoder by layer number:
    Decoder_1, Decoder_2, Encoder_2, Decoder_3, Encoder_3, ..., None, Embedding.
    """
    specs = []
    for k in range(1, max(config.enc_layers, config.dec_layers) + 1):
        if k <= config.dec_layers - 1:
            specs.append(AblationSpec("decoder", k, mode))
        if 2 <= k <= config.enc_layers:
            specs.append(AblationSpec("encoder", k, mode))
    specs.append(AblationSpec("none", None, mode))
    specs.append(AblationSpec("embedding", None, "skip"))
    return specs


def report_eps(config: RcvaeConfig, n: int, seed: int = REPORT_SEED) -> np.ndarray:
    return Rng(seed).spawn("report").normal((config.latent_dim, n))


def metrics_from_reconstruction(X, X_hat, scaler, H, W, detach="None", type_weights=None,
                                matched=()) -> MetricsReport:
    """Build a report from scaled features ``X`` and reconstructions ``X_hat`` (both ``(N, d_X)``)."""
    X, X_hat = np.asarray(X, dtype=np.float64), np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape or X.size == 0:
        raise ShapeError("reconstruction does not match targets")
    weights = {t: 1.0 for t in TYPES} if type_weights is None else {t: float(type_weights[t]) for t in TYPES}
    s, s_hat = unpack_array(X, H, W), unpack_array(X_hat, H, W)
    p, p_hat = scale_invert(scaler, s), scale_invert(scaler, s_hat)
    m, r, ms, rs = {}, {}, {}, {}
    for i, t in enumerate(TYPES):
        m[t], r[t] = mae(p[:, i], p_hat[:, i]), rmse(p[:, i], p_hat[:, i])
        ms[t], rs[t] = mae(s[:, i], s_hat[:, i]), rmse(s[:, i], s_hat[:, i])
    wsum = sum(weights.values())
    mae_total = sum(weights[t] * ms[t] for t in TYPES) / wsum
    rmse_total = float(np.sqrt(sum(weights[t] * rs[t] ** 2 for t in TYPES) / wsum))
    return MetricsReport(detach, m, r, float(mae_total), rmse_total, ms, rs, X.shape[0], s.size,
                         weights, list(matched))


def _evaluate(ckpt, test_set: PackedDataset, spec: AblationSpec, weight, seed, type_weights):
    weight = ckpt.match_weight if weight is None else weight
    idx, matched = resolve_labels(ckpt.vocab, test_set.labels, weight)
    for q, used in matched:
        log.info("test label %s matched to training label %s", q, used)
    kwargs = {}
    if spec.target == "encoder":
        kwargs["skip_encoder"] = (spec.layer,)
    elif spec.target == "decoder":
        kwargs["skip_decoder"] = (spec.layer,)
    elif spec.target == "embedding":
        kwargs["zero_embedding"] = True
    eps = report_eps(ckpt.config, len(test_set), seed)
    X_hat = reconstruct(ckpt.params, test_set.X, idx, eps, **kwargs)
    return metrics_from_reconstruction(test_set.X, X_hat, ckpt.scaler, test_set.H, test_set.W,
                                       spec.name, type_weights, matched)


def report(ckpt, test_set: PackedDataset, weight: float | None = None, seed: int = REPORT_SEED,
           type_weights=None) -> MetricsReport:
    """Reconstruct every test sample (unseen labels matched to training ones) and score it."""
    return _evaluate(ckpt, test_set, AblationSpec(), weight, seed, type_weights)


def ablate(ckpt, spec: AblationSpec, test_set: PackedDataset, weight: float | None = None,
           seed: int = REPORT_SEED, type_weights=None, train_set=None, val_set=None,
           train_config=None) -> MetricsReport:
    """Score the model with one component removed.

    Skip mode bypasses the layer (or zeroes the condition vectors) at
    inference. Retrain mode trains a fresh model one layer shallower with the
    same hyperparameters and scores that instead.
    """
    spec.validate(ckpt.config)
    if spec.mode == "skip" or spec.target == "none":
        return _evaluate(ckpt, test_set, spec, weight, seed, type_weights)

    from .trainer import train

    if train_set is None or train_config is None:
        raise SpecError("retrain mode needs train_set and train_config")
    c = ckpt.config
    new_cfg = dataclasses.replace(
        c,
        enc_layers=c.enc_layers - (spec.target == "encoder"),
        dec_layers=c.dec_layers - (spec.target == "decoder"),
    )
    retrained, _ = train(train_set, val_set, new_cfg, train_config, scaler=ckpt.scaler)
    retrained.match_weight = ckpt.match_weight
    rep = _evaluate(retrained, test_set, AblationSpec(), weight, seed, type_weights)
    rep.detach = spec.name
    return rep


def ablation_sweep(ckpt, test_set: PackedDataset, mode: str = "skip", **kwargs) -> list:
    return [ablate(ckpt, spec, test_set, **kwargs) for spec in sweep_specs(ckpt.config, mode)]


def _fmt(value) -> str:
    return value if isinstance(value, str) else repr(float(value))


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for rep in reports:
            row = rep.row()
            w.writerow([_fmt(row[h]) for h in REPORT_HEADER])


def nearest_centroid_accuracy(centroids: dict, samples: dict) -> float:
    """Fraction of samples whose nearest centroid (Euclidean) is their own class.

    ``centroids`` maps class -> vector; ``samples`` maps class -> ``(n, d)`` array.
    """
    names = list(centroids)
    C = np.stack([np.asarray(centroids[k], dtype=np.float64) for k in names])
    correct = total = 0
    for k, S in samples.items():
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        d = ((S[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        correct += int(np.sum(np.argmin(d, axis=1) == names.index(k)))
        total += S.shape[0]
    return correct / total
