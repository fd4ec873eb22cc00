"""Mini-batch training with validation-driven early stopping, and the
binary checkpoint format."""
from __future__ import annotations

import io
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import PACK_LAYOUT, TYPES, PackedDataset, ScalerParams
from .errors import DataError, FormatError, NumericError, UnsupportedVersionError
from .labels import DEFAULT_MATCH_WEIGHT, EmbeddingTable, LabelKey, LabelVocab, build_vocab, resolve_labels
from .model import RcvaeConfig, RcvaeParams, loss_and_grads, loss_terms, reconstruct
from .numcore import Activation, AdamState, AffineLayer, Rng, adam_step, as_column_batch

log = logging.getLogger(__name__)

MAGIC = b"RCVA"
VERSION = 1


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    patience: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    match_weight: float = DEFAULT_MATCH_WEIGHT

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience is not None and self.patience >= self.max_epochs:
            log.debug("patience %s >= max_epochs %s: early stopping cannot trigger", self.patience, self.max_epochs)


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = float("inf")
    best_epoch: int = 0
    counter: int = 0
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    stopped_early: bool = False


class EarlyStopping:
    """Save-on-improve bookkeeping.

    ``update`` returns ``(improved, stop)``: the counter resets on a strict
    improvement and otherwise increments; training stops once the counter
    reaches ``patience`` consecutive non-improving epochs.
    """

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.counter = 0

    def update(self, epoch: int, value: float):
        if value < self.best:
            self.best, self.best_epoch, self.counter = value, epoch, 0
            return True, False
        self.counter += 1
        stop = self.patience is not None and self.counter >= self.patience
        return False, stop


def loss_total(x_hat, x, mu, logvar, k: int | None = None):
    """``(total, mse, kld)`` for a batch laid out as columns."""
    batch = as_column_batch(x).shape[1]
    if k is not None and k != batch:
        raise DataError(f"K={k} does not match the batch size {batch}")
    return loss_terms(x_hat, x, mu, logvar)


def validation_eps(config: RcvaeConfig, n: int, seed: int) -> np.ndarray:
    return Rng(seed).spawn("validation").normal((config.latent_dim, n))


def validate(params: RcvaeParams, vocab: LabelVocab, dataset: PackedDataset, seed: int = 0,
             weight: float = DEFAULT_MATCH_WEIGHT) -> float:
    """Mean absolute error over all scaled features of ``dataset``.

    Noise is drawn from a fixed validation stream, so repeated calls (and
    successive epochs) compare like with like.
    """
    if len(dataset) == 0:
        raise DataError("validation set is empty")
    idx, _ = resolve_labels(vocab, dataset.labels, weight)
    eps = validation_eps(params.config, len(dataset), seed)
    x_hat = reconstruct(params, dataset.X, idx, eps)
    return float(np.mean(np.abs(dataset.X - x_hat)))


@dataclass
class TrainResult:
    params: RcvaeParams
    vocab: LabelVocab
    state: TrainState


def train_model(train_set: PackedDataset, val_set: PackedDataset | None, model_config: RcvaeConfig,
                config: TrainConfig, validate_fn: Callable | None = None, early_stop: bool = True,
                progress: Callable | None = None) -> TrainResult:
    """The epoch loop: train on mini-batches, validate, keep the best weights.

    ``validate_fn(params, vocab, epoch) -> float`` overrides the default
    validation MAE (used to inject traces in tests). With ``early_stop``
    false, or no validation signal at all, every epoch runs and the final
    weights are returned.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    if model_config.d_x != train_set.d_x:
        raise DataError(f"model expects d_X={model_config.d_x}, data has {train_set.d_x}")
    vocab = build_vocab(train_set.labels)
    root = Rng(config.seed)
    params = RcvaeParams.init(model_config, len(vocab), root.spawn("init"))
    arrays = params.named_arrays()
    adam = AdamState(lr=config.lr)
    indices = vocab.indices(train_set.labels)
    X = train_set.X
    n = len(train_set)

    if validate_fn is None and val_set is not None and len(val_set):
        def validate_fn(p, voc, epoch):
            return validate(p, voc, val_set, seed=config.seed, weight=config.match_weight)

    monitor = early_stop and validate_fn is not None
    stopper = EarlyStopping(config.patience if monitor else None)
    state = TrainState()
    best = params.copy()

    for epoch in range(1, config.max_epochs + 1):
        stream = root.spawn("epoch", epoch)
        order = stream.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            eps = stream.normal((model_config.latent_dim, batch.size))
            try:
                (total, _, _), grads = loss_and_grads(params, X[batch].T, indices[batch], eps)
                if not np.isfinite(total):
                    raise NumericError("non-finite training loss")
                adam_step(adam, arrays, grads)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}: {exc}") from exc
            running += total * batch.size
        state.epoch = epoch
        state.train_loss.append(running / n)

        if validate_fn is not None:
            val = float(validate_fn(params, vocab, epoch))
            state.val_mae.append(val)
            improved, stop = stopper.update(epoch, val)
            if improved and monitor:
                best = params.copy()
            state.best_val, state.best_epoch, state.counter = stopper.best, stopper.best_epoch, stopper.counter
        else:
            stop = False
        if progress is not None:
            progress(epoch, state)
        if monitor and stop:
            state.stopped_early = True
            break

    final = best if monitor else params.copy()
    return TrainResult(final, vocab, state)


@dataclass
class Checkpoint:
    config: RcvaeConfig
    params: RcvaeParams
    vocab: LabelVocab
    scaler: ScalerParams
    H: int
    W: int
    seed: int = 0
    layout: str = PACK_LAYOUT
    rng_algorithm: str = Rng.algorithm
    epochs_run: int = 0
    best_epoch: int = 0
    best_val: float = float("nan")
    match_weight: float = DEFAULT_MATCH_WEIGHT

    def to_bytes(self) -> bytes:
        return _encode_checkpoint(self)

    def save(self, path) -> None:
        save_checkpoint(self, path)


def train(train_set: PackedDataset, val_set: PackedDataset | None, model_config: RcvaeConfig,
          config: TrainConfig, scaler: ScalerParams | None = None, **kwargs):
    """Train and package the best model as a :class:`Checkpoint`.

    Returns ``(checkpoint, state)``.
    """
    result = train_model(train_set, val_set, model_config, config, **kwargs)
    if scaler is None:
        scaler = ScalerParams(np.zeros(len(TYPES)), np.ones(len(TYPES)))
    ckpt = Checkpoint(
        config=model_config, params=result.params, vocab=result.vocab, scaler=scaler,
        H=train_set.H, W=train_set.W, seed=config.seed, epochs_run=result.state.epoch,
        best_epoch=result.state.best_epoch, best_val=result.state.best_val,
        match_weight=config.match_weight,
    )
    return ckpt, result.state


def fit_final(train_set: PackedDataset, val_set: PackedDataset, model_config: RcvaeConfig,
              config: TrainConfig, scaler: ScalerParams | None = None, mode: str = "holdout",
              holdout_fraction: float = 0.05, progress=None):
    """Final fit on train+val merged.

    ``mode="holdout"`` carves a small seeded holdout from the merged set as
    the early-stopping signal; ``mode="fixed"`` trains for ``max_epochs``
    without early stopping.
    """
    merged = train_set.concat(val_set) if val_set is not None and len(val_set) else train_set
    if mode == "fixed":
        return train(merged, None, model_config, config, scaler=scaler, early_stop=False, progress=progress)
    if mode != "holdout":
        raise ValueError(f"unknown final-fit mode {mode!r}")
    n = len(merged)
    n_hold = max(1, int(round(n * holdout_fraction)))
    if n_hold >= n:
        raise DataError("merged training set too small for a holdout")
    order = Rng(config.seed).spawn("holdout").permutation(n)
    hold, rest = merged.subset(order[:n_hold]), merged.subset(order[n_hold:])
    return train(rest, hold, model_config, config, scaler=scaler, progress=progress)


# Binary persistence ------------------------------------------------------

def _put_str(buf, text: str):
    raw = text.encode("utf-8")
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)


def _put_matrix(buf, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    rows, cols = arr.shape
    buf.write(struct.pack("<QQ", rows, cols))
    buf.write(arr.tobytes(order="C"))


def _encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    ints = ckpt.config.as_ints() + (ckpt.H, ckpt.W)
    buf.write(struct.pack("<Q", len(ints)))
    buf.write(struct.pack(f"<{len(ints)}Q", *ints))
    _put_str(buf, ckpt.layout)
    arrays = ckpt.params.named_arrays()
    buf.write(struct.pack("<Q", len(arrays)))
    for arr in arrays.values():
        _put_matrix(buf, arr)
    buf.write(struct.pack("<Q", len(ckpt.vocab)))
    for key in ckpt.vocab:
        _put_str(buf, str(key))
    for lo, hi in zip(ckpt.scaler.mins, ckpt.scaler.maxs):
        buf.write(struct.pack("<dd", lo, hi))
    _put_str(buf, ckpt.rng_algorithm)
    buf.write(struct.pack("<Q", ckpt.seed))
    buf.write(struct.pack("<QQdd", ckpt.epochs_run, ckpt.best_epoch, ckpt.best_val, ckpt.match_weight))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint: needed {n} bytes, {len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<Q")
        at = self.pos
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("invalid UTF-8 string", at) from None

    def matrix(self) -> np.ndarray:
        rows, cols = self.unpack("<QQ")
        nbytes = rows * cols * 8
        return np.frombuffer(self.take(nbytes), dtype="<f8").reshape(rows, cols).astype(np.float64)


def _decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic; not an RCVA checkpoint", 0)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    (n_ints,) = r.unpack("<Q")
    if n_ints != 8:
        raise FormatError(f"expected 8 configuration integers, found {n_ints}", r.pos - 8)
    d_x, embed, latent, hidden, n_enc, n_dec, H, W = r.unpack("<8Q")
    try:
        config = RcvaeConfig(d_x, embed, latent, hidden, n_enc, n_dec)
    except ValueError as exc:
        raise FormatError(f"invalid configuration: {exc}", r.pos) from None
    layout = r.string()
    (n_arrays,) = r.unpack("<Q")
    expected = n_enc + n_dec + 3
    if n_arrays != 2 * expected + 1:
        raise FormatError(f"expected {2 * expected + 1} matrices, found {n_arrays}", r.pos - 8)

    relu, ident, sig = Activation.RELU, Activation.IDENTITY, Activation.SIGMOID
    acts = [relu] * n_enc + [ident, ident, relu] + [relu] * (n_dec - 1) + [sig]
    layers = []
    for act in acts:
        w, b = r.matrix(), r.matrix()
        layers.append(AffineLayer(w, b, act))
    emb = EmbeddingTable(r.matrix())
    (n_vocab,) = r.unpack("<Q")
    keys = []
    for _ in range(n_vocab):
        at = r.pos
        try:
            keys.append(LabelKey.parse(r.string()))
        except DataError as exc:
            raise FormatError(str(exc), at) from None
    mins, maxs = [], []
    for _ in TYPES:
        lo, hi = r.unpack("<dd")
        mins.append(lo)
        maxs.append(hi)
    rng_id = r.string()
    (seed,) = r.unpack("<Q")
    epochs_run, best_epoch, best_val, weight = r.unpack("<QQdd")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", r.pos)
    try:
        params = RcvaeParams(
            config, layers[:n_enc], layers[n_enc], layers[n_enc + 1], layers[n_enc + 2],
            layers[n_enc + 3:], emb,
        )
        vocab = LabelVocab(keys)
        scaler = ScalerParams(mins, maxs)
    except (ValueError, DataError) as exc:
        raise FormatError(f"inconsistent checkpoint contents: {exc}") from None
    if emb.num_embeddings != len(vocab):
        raise FormatError("embedding rows do not match vocabulary size")
    return Checkpoint(config, params, vocab, scaler, H, W, seed, layout, rng_id,
                      epochs_run, best_epoch, best_val, weight)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write (temp file in the target directory, then rename)."""
    path = Path(path)
    data = _encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return _decode_checkpoint(fh.read())


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    return _decode_checkpoint(data)
