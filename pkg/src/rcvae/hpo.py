"""Gaussian-process / expected-improvement search over training hyperparameters."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm

from .errors import HpoError, RcvaeError, SpecError
from .numcore import Rng

log = logging.getLogger(__name__)

TRIAL_LOG_HEADER = ("trial", "eta", "h", "J", "D", "K", "val_mae", "status")


@dataclass(frozen=True)
class Dim:
    name: str
    low: float
    high: float
    kind: str = "float"  # "float", "log" or "int"

    def __post_init__(self):
        if self.kind not in ("float", "log", "int"):
            raise SpecError(f"unknown dimension kind {self.kind!r}")
        if not self.high > self.low:
            raise SpecError(f"empty range for {self.name}")
        if self.kind == "log" and self.low <= 0:
            raise SpecError(f"log dimension {self.name} needs a positive lower bound")

    def from_unit(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.kind == "log":
            lo, hi = math.log(self.low), math.log(self.high)
            return min(max(math.exp(lo + u * (hi - lo)), self.low), self.high)
        value = self.low + u * (self.high - self.low)
        if self.kind == "int":
            return int(min(max(round(value), self.low), self.high))
        return value

    def to_unit(self, value) -> float:
        if self.kind == "log":
            lo, hi = math.log(self.low), math.log(self.high)
            return (math.log(value) - lo) / (hi - lo)
        return (value - self.low) / (self.high - self.low)

    def contains(self, value) -> bool:
        if self.kind == "int" and float(value) != int(value):
            return False
        return self.low <= value <= self.high


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple

    @property
    def names(self) -> tuple:
        return tuple(d.name for d in self.dims)

    def __len__(self) -> int:
        return len(self.dims)

    def from_unit(self, u) -> dict:
        return {d.name: d.from_unit(x) for d, x in zip(self.dims, u)}

    def to_unit(self, point: dict) -> np.ndarray:
        return np.array([d.to_unit(point[d.name]) for d in self.dims])

    def contains(self, point: dict) -> bool:
        return set(point) == set(self.names) and all(d.contains(point[d.name]) for d in self.dims)


def rcvae_space() -> SearchSpace:
    return SearchSpace((
        Dim("eta", 1e-5, 1e-2, "log"),
        Dim("h", 32, 512, "int"),
        Dim("J", 4, 64, "int"),
        Dim("D", 8, 512, "int"),
        Dim("K", 32, 256, "int"),
    ))


@dataclass
class Trial:
    index: int
    point: dict
    objective: float
    status: str = "ok"
    raw_objective: float = float("nan")


class GaussianProcess:
    """Zero-mean GP on standardized targets with an ARD squared-exponential kernel."""

    def __init__(self, noise: float = 1e-6):
        self.noise = noise

    def _kernel(self, A, B, ls, amp):
        d = (A[:, None, :] - B[None, :, :]) / ls
        return amp * np.exp(-0.5 * np.sum(d * d, axis=2))

    def _factor(self, K):
        n = K.shape[0]
        jitter = 0.0
        for attempt in range(8):
            try:
                return linalg.cho_factor(K + (self.noise + jitter) * np.eye(n), lower=True), jitter
            except linalg.LinAlgError:
                jitter = 1e-10 * 100.0 ** attempt
        raise HpoError("kernel matrix is not positive definite even with jitter")

    def _nll(self, theta, X, y):
        ls, amp = np.exp(theta[:-1]), np.exp(theta[-1])
        try:
            (c, low), _ = self._factor(self._kernel(X, X, ls, amp))
        except HpoError:
            return 1e25
        alpha = linalg.cho_solve((c, low), y)
        return 0.5 * y @ alpha + np.sum(np.log(np.diag(c))) + 0.5 * len(y) * math.log(2 * math.pi)

    def fit(self, X, y) -> "GaussianProcess":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        self.y_mean = float(y.mean())
        self.y_std = float(y.std()) or 1.0
        ys = (y - self.y_mean) / self.y_std
        d = X.shape[1]
        best = None
        bounds = [(math.log(0.01), math.log(10.0))] * d + [(math.log(0.05), math.log(20.0))]
        for start in (0.1, 0.3, 1.0):
            theta0 = np.array([math.log(start)] * d + [0.0])
            res = optimize.minimize(self._nll, theta0, args=(X, ys), method="L-BFGS-B", bounds=bounds)
            if best is None or res.fun < best.fun:
                best = res
        self.ls, self.amp = np.exp(best.x[:-1]), float(np.exp(best.x[-1]))
        self.X = X
        self.cho, self.jitter = self._factor(self._kernel(X, X, self.ls, self.amp))
        self.alpha = linalg.cho_solve(self.cho, ys)
        return self

    def predict(self, Xs):
        """Posterior mean and standard deviation in the original target units."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64))
        Ks = self._kernel(self.X, Xs, self.ls, self.amp)
        mean = Ks.T @ self.alpha
        v = linalg.solve_triangular(self.cho[0], Ks, lower=True)
        var = np.maximum(self.amp - np.sum(v * v, axis=0), 0.0)
        return mean * self.y_std + self.y_mean, np.sqrt(var) * self.y_std


def expected_improvement(mean, std, best: float, xi: float = 0.0) -> np.ndarray:
    """EI for minimization; exactly ``max(best - mean - xi, 0)`` where ``std == 0``."""
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    imp = best - mean - xi
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(std > 0, imp / std, 0.0)
        ei = np.where(std > 0, imp * norm.cdf(z) + std * norm.pdf(z), np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)


@dataclass
class BoState:
    space: SearchSpace
    method: str = "gp"
    n_candidates: int = 1024
    noise: float = 1e-6
    trials: list = field(default_factory=list)
    gp: GaussianProcess | None = None

    def __post_init__(self):
        if self.method not in ("gp", "random"):
            raise SpecError(f"unknown search method {self.method!r}")

    @property
    def n_init(self) -> int:
        return max(5, len(self.space) + 1)

    def best(self) -> Trial | None:
        ok = [t for t in self.trials if t.status == "ok"]
        return min(ok, key=lambda t: (t.objective, t.index)) if ok else None

    def best_so_far(self) -> list:
        out, cur = [], float("inf")
        for t in self.trials:
            if t.status == "ok":
                cur = min(cur, t.objective)
            out.append(cur)
        return out


def suggest(state: BoState, rng: Rng) -> dict:
    """Next point to evaluate; a pure function of ``rng``'s seed and the history.

    The first ``max(5, dims + 1)`` points (every point for random search) are
    uniform draws; afterwards the candidate with maximal EI is chosen from
    1024 uniform candidates plus local perturbations of the incumbent.
    """
    n = len(state.trials)
    d = len(state.space)
    if state.method == "random" or n < state.n_init or state.gp is None:
        return state.space.from_unit(rng.spawn("suggest", n).uniform(d))
    stream = rng.spawn("candidates", n)
    cand = stream.uniform(state.n_candidates * d).reshape(state.n_candidates, d)
    best = state.best()
    if best is not None:
        local = state.space.to_unit(best.point) + 0.05 * stream.normal((state.n_candidates // 4, d))
        cand = np.vstack([cand, np.clip(local, 0.0, 1.0)])
    points = [state.space.from_unit(u) for u in cand]
    snapped = np.array([state.space.to_unit(p) for p in points])
    mean, std = state.gp.predict(snapped)
    incumbent = min(t.objective for t in state.trials)
    ei = expected_improvement(mean, std, incumbent)
    return points[int(np.argmax(ei))]


def observe(state: BoState, point: dict, objective: float | None) -> BoState:
    """Record a trial (``objective=None`` or non-finite means failed) and refit the surrogate."""
    if not state.space.contains(point):
        raise SpecError(f"point {point} lies outside the search space")
    index = len(state.trials)
    if objective is None or not np.isfinite(objective):
        finite = [t.raw_objective for t in state.trials if t.status == "ok"]
        penalty = 2.0 * max(abs(v) for v in finite) if finite else 1.0
        state.trials.append(Trial(index, dict(point), penalty, "failed"))
    else:
        state.trials.append(Trial(index, dict(point), float(objective), "ok", float(objective)))
    if state.method == "gp":
        X = np.array([state.space.to_unit(t.point) for t in state.trials])
        y = np.array([t.objective for t in state.trials])
        state.gp = GaussianProcess(state.noise).fit(X, y)
    return state


def minimize(objective: Callable, space: SearchSpace, budget: int, rng: Rng, method: str = "gp") -> BoState:
    """Run ``budget`` suggest/evaluate/observe rounds."""
    if budget < 1:
        raise HpoError("budget must be >= 1")
    state = BoState(space, method)
    for _ in range(budget):
        point = suggest(state, rng)
        try:
            value = objective(point)
        except (RcvaeError, ArithmeticError, ValueError) as exc:
            log.warning("trial %d failed: %s", len(state.trials), exc)
            value = None
        observe(state, point, value)
    if state.best() is None:
        raise HpoError("all trials failed")
    return state


@dataclass
class HpoResult:
    best: dict
    best_value: float
    trials: list


def trial_configs(point: dict, base_model: dict, d_x: int, trial_epochs: int, seed: int, patience=None):
    """Model and train configs for one search point. The latent size is
    capped at the hidden width."""
    from .model import RcvaeConfig
    from .trainer import TrainConfig

    hidden = int(point["h"])
    mcfg = RcvaeConfig(d_x=d_x, embed_dim=int(point["D"]), latent_dim=min(int(point["J"]), hidden),
                       hidden=hidden, enc_layers=base_model.get("enc_layers", 4),
                       dec_layers=base_model.get("dec_layers", 4))
    tcfg = TrainConfig(max_epochs=trial_epochs, patience=patience or trial_epochs, batch_size=int(point["K"]),
                       lr=float(point["eta"]), seed=seed,
                       match_weight=base_model.get("match_weight", 0.5))
    return mcfg, tcfg


def run_hpo(train_set, val_set, space: SearchSpace | None = None, budget: int = 10, rng: Rng | None = None,
            base_model: dict | None = None, trial_epochs: int = 50, method: str = "gp",
            patience: int | None = None) -> HpoResult:
    """Search hyperparameters by short training runs scored on validation MAE."""
    from .trainer import train_model

    space = space or rcvae_space()
    rng = rng or Rng(0)
    base_model = base_model or {}

    def objective(point):
        mcfg, tcfg = trial_configs(point, base_model, train_set.d_x, trial_epochs, rng.seed, patience)
        result = train_model(train_set, val_set, mcfg, tcfg)
        return result.state.best_val

    state = minimize(objective, space, budget, rng, method)
    best = state.best()
    return HpoResult(dict(best.point), best.objective, state.trials)


def write_trial_log(trials, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_LOG_HEADER)
        for t in trials:
            p = t.point
            val = repr(float(t.raw_objective)) if t.status == "ok" else ""
            w.writerow([t.index, repr(float(p["eta"])), p["h"], p["J"], p["D"], p["K"], val, t.status])
