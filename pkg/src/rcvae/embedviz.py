"""2-D views of the learned condition embeddings: exact t-SNE, k-means
clustering and per-cluster EOL/ECL annotation."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import SpecError
from .labels import DEFAULT_MATCH_WEIGHT, LabelKey
from .numcore import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    seed: int = 0
    entropy_tol: float = 1e-5


@dataclass
class TsneResult:
    points: np.ndarray
    kl_history: list
    entropies: np.ndarray = field(repr=False)
    conditional: np.ndarray = field(repr=False)
    degenerate: bool = False


def _sq_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_probs(d: np.ndarray, beta: float):
    # d excludes the diagonal; shift by the minimum for stability
    shifted = d - d.min()
    p = np.exp(-shifted * beta)
    s = p.sum()
    p /= s
    entropy = float(np.log(s) + beta * np.sum(shifted * p))
    return p, entropy


def conditional_affinities(X, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Row-normalized Gaussian affinities with per-point bandwidths.

    The precision of each row is found by bisection so that the row's
    Shannon entropy (nats) matches ``log(perplexity)`` to within ``tol``.
    Returns ``(P, entropies)`` with a zero diagonal.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    D = _sq_distances(X)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    entropies = np.zeros(n)
    for i in range(n):
        d = np.delete(D[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        scale = np.median(d[d > 0]) if np.any(d > 0) else 1.0
        beta = 1.0 / scale
        for _ in range(max_iter):
            p, h = _row_probs(d, beta)
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        P[i, np.arange(n) != i] = p
        entropies[i] = h
    return P, entropies


def _kl(P, Q):
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_2d(E, config: TsneConfig = TsneConfig()) -> TsneResult:
    """Exact t-SNE of the rows of ``E`` into two dimensions."""
    E = np.asarray(E, dtype=np.float64)
    n = E.shape[0]
    if n < 4:
        raise SpecError(f"t-SNE needs at least 4 points, got {n}")
    if not config.perplexity < (n - 1) / 3.0:
        raise SpecError(f"perplexity {config.perplexity} must be < (N-1)/3 = {(n - 1) / 3.0:.3f}")
    rng = Rng(config.seed)
    if np.allclose(E, E[0]):
        warnings.warn("all embedding rows are identical; returning a random layout", RuntimeWarning)
        return TsneResult(1e-4 * rng.normal((n, 2)), [], np.zeros(n), np.zeros((n, n)), True)

    Pc, entropies = conditional_affinities(E, config.perplexity, config.entropy_tol)
    P = (Pc + Pc.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)

    Y = 1e-4 * rng.normal((n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    for it in range(config.iterations):
        exag = config.exaggeration if it < config.exaggeration_iters else 1.0
        momentum = 0.5 if it < config.exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        np.fill_diagonal(Q, 1.0)
        history.append(_kl(P, Q))
        W = (exag * P - Q) * num
        np.fill_diagonal(W, 0.0)
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same = np.sign(grad) == np.sign(velocity)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - config.learning_rate * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
    num = 1.0 / (1.0 + _sq_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    np.fill_diagonal(Q, 1.0)
    history.append(_kl(P, Q))
    return TsneResult(Y, history, entropies, Pc)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list
    n_iter: int


def _kmeans_pp(X, k, rng: Rng):
    n = X.shape[0]
    chosen = [int(rng.uniform(1)[0] * n) % n]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        w = d2.copy()
        w[chosen] = 0.0
        if w.sum() > 0:
            idx = rng.choice_weighted(w)
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(remaining[int(rng.uniform(1)[0] * remaining.size) % remaining.size])
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return X[chosen].copy()


def cluster(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's k-means from k-means++ seeds.

    Stops after ``max_iter`` rounds or when no centroid moves more than ``tol``.
    A cluster that empties keeps its previous centroid.
    """
    X = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise SpecError("k must be >= 1")
    if k > X.shape[0]:
        raise SpecError(f"k={k} exceeds the number of points ({X.shape[0]})")
    C = _kmeans_pp(X, k, Rng(seed).spawn("kmeans++"))
    history = []
    labels = np.zeros(X.shape[0], dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d = np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(X.shape[0]), labels].sum()))
        new = C.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
        shift = float(np.max(np.sqrt(np.sum((new - C) ** 2, axis=1))))
        C = new
        if shift < tol:
            break
    d = np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d, axis=1)
    history.append(float(d[np.arange(X.shape[0]), labels].sum()))
    return KMeansResult(labels, C, history, it)


@dataclass
class ClusterAnnotation:
    cluster: int
    members: list
    mean_eol: float
    mean_ecl: float
    origin_distance: float

    @property
    def size(self) -> int:
        return len(self.members)


def annotate(assignments, labels, weight: float = DEFAULT_MATCH_WEIGHT, n_clusters: int | None = None) -> list:
    """Mean EOL, mean ECL and weighted distance from (0, 0) for each cluster."""
    assignments = np.asarray(assignments, dtype=np.int64)
    labels = list(labels)
    if assignments.shape[0] != len(labels):
        raise SpecError("assignments must cover every label")
    n_clusters = int(assignments.max()) + 1 if n_clusters is None else n_clusters
    out = []
    for c in range(n_clusters):
        members = [labels[i] for i in np.nonzero(assignments == c)[0]]
        if not members:
            log.warning("cluster %d is empty; dropped", c)
            continue
        mean_eol = float(np.mean([m.eol for m in members]))
        mean_ecl = float(np.mean([m.ecl for m in members]))
        dist = weight * abs(mean_eol) + (1.0 - weight) * abs(mean_ecl)
        out.append(ClusterAnnotation(c, members, mean_eol, mean_ecl, dist))
    return out


def write_points_csv(labels, points, assignments, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("label", "x", "y", "cluster"))
        for lab, (x, y), c in zip(labels, points, assignments):
            w.writerow([str(lab), repr(float(x)), repr(float(y)), int(c)])


def write_annotations_csv(annotations, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cluster", "mean_eol", "mean_ecl", "origin_distance", "size"))
        for a in annotations:
            w.writerow([a.cluster, repr(a.mean_eol), repr(a.mean_ecl), repr(a.origin_distance), a.size])


def write_svg(points, assignments, annotations, path) -> None:
    """Scatter plot coloured by cluster, each cluster tagged with its annotation."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = np.asarray(points)
    plt.rcParams["svg.hashsalt"] = "rcvae"
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.scatter(points[:, 0], points[:, 1], c=assignments, cmap="tab10", s=12)
    for a in annotations:
        cx, cy = points[np.asarray(assignments) == a.cluster].mean(axis=0)
        ax.annotate(f"{a.mean_eol:.0f}/{a.mean_ecl:.0f}/{a.origin_distance:.0f}", (cx, cy), fontsize=8)
    ax.set_xlabel("t-SNE 1")
    ax.set_ylabel("t-SNE 2")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def analyze(E, labels, k: int = 6, weight: float = DEFAULT_MATCH_WEIGHT, config: TsneConfig | None = None):
    """t-SNE projection, clustering and annotation in one call.

    Perplexity is capped just below ``(N-1)/3`` for small vocabularies.
    Returns ``(tsne_result, kmeans_result, annotations)``.
    """
    config = config or TsneConfig()
    n = np.asarray(E).shape[0]
    cap = (n - 1) / 3.0
    if config.perplexity >= cap:
        config = TsneConfig(**{**config.__dict__, "perplexity": max(cap * 0.95, 1.0)})
    emb = tsne_2d(E, config)
    km = cluster(emb.points, min(k, n), seed=config.seed)
    return emb, km, annotate(km.labels, labels, weight, n_clusters=min(k, n))


__all__ = [
    "TsneConfig", "TsneResult", "conditional_affinities", "tsne_2d", "KMeansResult", "cluster",
    "ClusterAnnotation", "annotate", "analyze", "write_points_csv", "write_annotations_csv", "write_svg",
    "LabelKey",
]
