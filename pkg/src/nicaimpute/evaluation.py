"""Imputation metrics, downstream predictors, cross-validation and the benchmark driver."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, nica
from .baselines import BaselineConfig, ridge_fit
from .data import Dataset, ampute_mcar, standardize, zero_fill
from .errors import ConfigError, EvaluationError, NicaError

log = logging.getLogger(__name__)

METHODS = ("nica",) + baselines.METHODS
LINEAR_RIDGE = 1e-8
LOGISTIC_ITERATIONS = 500
LOGISTIC_STEP = 0.1


# ---------------------------------------------------------------------------
# metrics


def rmse_missing(imputed, truth, eval_mask) -> float:
    """Root-mean-square error over the cells flagged in ``eval_mask``."""
    imputed = np.asarray(imputed, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    sel = np.asarray(eval_mask, dtype=bool)
    if imputed.shape != truth.shape or sel.shape != truth.shape:
        raise EvaluationError(f"shape mismatch: {imputed.shape}, {truth.shape}, {sel.shape}")
    count = int(sel.sum())
    if count == 0:
        raise EvaluationError("evaluation mask is empty")
    diff = imputed[sel] - truth[sel]
    return float(np.sqrt(np.dot(diff, diff) / count))


def r2(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.size < 2 or y.shape != yhat.shape:
        raise EvaluationError("r2 needs at least 2 paired values")
    dev = y - y.mean()
    ss_tot = float(np.dot(dev, dev))
    if ss_tot == 0.0:
        raise EvaluationError("r2 is undefined for a constant target")
    res = y - yhat
    return 1.0 - float(np.dot(res, res)) / ss_tot


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise EvaluationError("scores and labels differ in length")
    pos_mask = labels.astype(bool)
    pos, neg = scores[pos_mask], np.sort(scores[~pos_mask])
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("auroc needs both classes present")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    wins = int(below.sum())
    ties = int((upto - below).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def auroc_ovr(scores, labels, classes=None) -> float:
    """Unweighted mean over classes of one-vs-rest AUROC; ``scores`` is ``(n, c)``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    classes = np.unique(labels) if classes is None else np.asarray(classes)
    if scores.ndim != 2 or scores.shape != (labels.size, classes.size):
        raise EvaluationError(f"expected scores of shape ({labels.size}, {classes.size}), got {scores.shape}")
    absent = [c for c in classes.tolist() if not np.any(labels == c)]
    if absent:
        raise EvaluationError(f"classes {absent} do not occur in labels")
    return float(np.mean([auroc(scores[:, k], labels == c) for k, c in enumerate(classes)]))


# ---------------------------------------------------------------------------
# downstream predictors


@dataclass
class DownstreamModel:
    """Linear or logistic predictor with weights on the raw feature scale.

    ``weights`` is ``(c, d + 1)`` with the intercept last: one row for linear
    and binary logistic, one per class for one-vs-rest.
    """

    kind: str
    weights: np.ndarray
    classes: np.ndarray | None = None
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("linear", "logistic", "logistic-ovr"):
            raise ConfigError(f"unknown downstream kind {self.kind!r}")
        if not np.all(np.isfinite(self.weights)):
            raise EvaluationError("downstream weights are not finite")

    def decision(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.weights[:, :-1].T + self.weights[:, -1]

    def predict(self, x) -> np.ndarray:
        """Regression values, positive-class probabilities, or ``(n, c)`` class probabilities."""
        z = self.decision(x)
        if self.kind == "linear":
            return z[:, 0]
        p = 1.0 / (1.0 + np.exp(-z))
        return p[:, 0] if self.kind == "logistic" else p


def _normalizer(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def _to_raw(w_norm: np.ndarray, b_norm: float, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    w = w_norm / std
    return np.append(w, b_norm - float(np.dot(w, mean)))


def fit_linear(x, y, lam: float = LINEAR_RIDGE) -> DownstreamModel:
    """Ridge regression on standardized features (unpenalized intercept)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    mean, std = _normalizer(x)
    w, b = ridge_fit((x - mean) / std, y, lam)
    return DownstreamModel("linear", _to_raw(w, b, mean, std)[None, :], hyper={"ridge_lambda": lam})


def _logistic_gd(z: np.ndarray, t: np.ndarray, iterations: int, step: float):
    n, d = z.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(z @ w + b)))
        g = p - t
        w -= step * (z.T @ g) / n
        b -= step * float(g.mean())
    return w, b


def fit_logistic(x, y, classes=None, iterations: int = LOGISTIC_ITERATIONS,
                 step: float = LOGISTIC_STEP) -> DownstreamModel:
    """Full-batch gradient descent on mean cross-entropy, standardized features.

    Two classes give one model for ``classes[1]``; more give one per class.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).ravel()
    classes = np.unique(y) if classes is None else np.asarray(classes)
    present = np.unique(y)
    if present.size < 2:
        raise EvaluationError("logistic regression needs at least 2 classes in the training data")
    mean, std = _normalizer(x)
    z = (x - mean) / std
    targets = [classes[1]] if classes.size == 2 else list(classes)
    rows = []
    for c in targets:
        w, b = _logistic_gd(z, (y == c).astype(np.float64), iterations, step)
        rows.append(_to_raw(w, b, mean, std))
    kind = "logistic" if classes.size == 2 else "logistic-ovr"
    return DownstreamModel(kind, np.array(rows), classes, {"iterations": iterations, "step": step})


# ---------------------------------------------------------------------------
# cross-validation


def fold_ids(y, kind: str, folds: int, seed) -> np.ndarray:
    """Shuffled fold index per row; classes are dealt round-robin when ``kind`` is categorical."""
    y = np.asarray(y).ravel()
    n = y.size
    if folds < 2 or folds > n:
        raise EvaluationError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    rng = np.random.default_rng(seed)
    ids = np.empty(n, dtype=np.int64)
    if kind == "continuous":
        perm = rng.permutation(n)
        ids[perm] = np.arange(n) % folds
        return ids
    offset = 0
    for c in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == c))
        ids[members] = (offset + np.arange(members.size)) % folds
        offset += members.size
    return ids


def _score(kind: str, y, pred, classes) -> float:
    if kind == "continuous":
        return r2(y, pred)
    if kind == "binary":
        return auroc(pred, y == classes[1])
    return auroc_ovr(pred, y, classes)


def metric_name(kind: str) -> str:
    return {"continuous": "r2", "binary": "auroc", "multiclass": "auroc_ovr"}[kind]


def cross_validate(x, y, kind: str, folds: int = 5, seed=0) -> float:
    """Mean held-out score over shuffled folds.

    Linear regression scored by R^2 for continuous targets, logistic scored by
    AUROC (one-vs-rest when multiclass) otherwise. When some held-out fold is
    too small to score on its own (e.g. leave-one-out) the out-of-fold
    predictions are pooled and scored once.
    """
    if kind not in ("continuous", "binary", "multiclass"):
        raise ConfigError(f"unknown target kind {kind!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).ravel()
    if x.shape[0] != y.size:
        raise EvaluationError("feature rows and target length differ")
    classes = None if kind == "continuous" else np.unique(y)
    if classes is not None and classes.size < 2:
        raise EvaluationError("classification target has a single class")
    if kind == "binary" and classes.size != 2:
        kind = "multiclass"
    ids = fold_ids(y, kind, folds, seed)
    pooled = np.zeros((y.size,) if kind != "multiclass" else (y.size, classes.size))
    scores = []
    scorable = True
    for f in range(folds):
        test = ids == f
        train = ~test
        if kind == "continuous":
            model = fit_linear(x[train], y[train])
        else:
            model = fit_logistic(x[train], y[train], classes)
        pred = model.predict(x[test])
        pooled[test] = pred
        try:
            scores.append(_score(kind, y[test], pred, classes))
        except EvaluationError:
            scorable = False
    if scorable:
        return float(np.mean(scores))
    return _score(kind, y, pooled, classes)


# ---------------------------------------------------------------------------
# imputation dispatch


def impute_standardized(method: str, x0_bar: np.ndarray, m: np.ndarray,
                        nica_cfg: nica.NicaConfig | None = None,
                        base_cfg: BaselineConfig | None = None) -> np.ndarray:
    """Impute a standardized, zero-filled matrix with any supported method."""
    if method == "nica":
        model, _ = nica.train(x0_bar, m, nica_cfg or nica.NicaConfig())
        return nica.impute(model, x0_bar, m)
    if method in baselines.METHODS:
        return baselines.impute(method, x0_bar, m, base_cfg)
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


# ---------------------------------------------------------------------------
# benchmark driver


@dataclass
class EvalReport:
    entries: list[dict]
    config: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> list[dict]:
        groups: dict[tuple, list[dict]] = {}
        for e in self.entries:
            groups.setdefault((e["dataset"], e["method"], e["missing_rate"]), []).append(e)
        out = []
        for (ds, method, rate), items in groups.items():
            ok = [e for e in items if e.get("error") is None]
            row = {"dataset": ds, "method": method, "missing_rate": rate,
                   "repeats": len(items), "failures": len(items) - len(ok)}
            for key in ("rmse", "downstream_score"):
                vals = np.array([e[key] for e in ok if e.get(key) is not None], dtype=np.float64)
                row[f"{key}_mean"] = float(vals.mean()) if vals.size else None
                row[f"{key}_std"] = float(vals.std()) if vals.size else None
            row["downstream_metric_name"] = next((e["downstream_metric_name"] for e in ok), None)
            out.append(row)
        return out

    def to_dict(self, timings: bool = False) -> dict:
        entries = self.entries if timings else [{k: v for k, v in e.items() if k != "wall_time"}
                                                  for e in self.entries]
        return {"config": self.config, "entries": entries, "aggregates": self.aggregates}

    def write_json(self, path, timings: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(timings), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        cols = ["dataset", "method", "missing_rate", "repeat", "repeat_seed", "rmse",
                "downstream_metric_name", "downstream_score", "wall_time", "error"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for e in self.entries:
                w.writerow(["" if e.get(c) is None else (repr(e[c]) if isinstance(e[c], float) else e[c])
                            for c in cols])

    def summary(self, key: str = "rmse") -> dict[tuple, float]:
        return {(a["dataset"], a["method"], a["missing_rate"]): a[f"{key}_mean"] for a in self.aggregates}


def default_workers() -> int:
    env = os.environ.get("NICA_WORKERS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"NICA_WORKERS must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError("NICA_WORKERS must be >= 1")
        return value
    return os.cpu_count() or 1


def repeat_seed(seed: int, dataset_index: int, rate_index: int, repeat: int) -> int:
    """Seed shared by every method for one (dataset, rate, repeat) cell."""
    return int(np.random.SeedSequence([seed, dataset_index, rate_index, repeat]).generate_state(1)[0])


def _run_cell(job: dict) -> dict:
    ds: Dataset = job["dataset"]
    method = job["method"]
    entry = {"dataset": ds.name, "method": method, "missing_rate": job["rate"], "repeat": job["repeat"],
             "repeat_seed": job["seed"], "rmse": None, "downstream_metric_name": None,
             "downstream_score": None, "error": None}
    start = time.perf_counter()
    try:
        truth = ds.features()
        full = np.ones(truth.shape, dtype=bool)
        amp_rng, cv_seed, model_seed = np.random.SeedSequence(job["seed"]).spawn(3)
        m = ampute_mcar(full, job["rate"], np.random.default_rng(amp_rng))
        if m.all():
            raise EvaluationError("amputation removed no cell")
        x_std, stats = standardize(truth, m)
        x0 = zero_fill(x_std, m)
        nica_cfg = job["nica"].replace(seed=int(model_seed.generate_state(1)[0]))
        imputed = impute_standardized(method, x0, m, nica_cfg, job["baseline"])
        entry["rmse"] = rmse_missing(imputed, (truth - stats.mean) / stats.std, ~m)
        if job["downstream"] and ds.target is not None:
            entry["downstream_metric_name"] = metric_name(ds.target_kind)
            entry["downstream_score"] = cross_validate(imputed, ds.target_values(), ds.target_kind,
                                                       job["folds"], int(cv_seed.generate_state(1)[0]))
    except (NicaError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        entry["error"] = f"{type(exc).__name__}: {exc}"
        log.warning("%s/%s rate=%s repeat=%s failed: %s", ds.name, method, job["rate"], job["repeat"], exc)
    entry["wall_time"] = time.perf_counter() - start
    return entry


def run_benchmark(datasets: list[Dataset], methods, rates, repeats: int,
                  nica_cfg: nica.NicaConfig | None = None, base_cfg: BaselineConfig | None = None,
                  seed: int = 0, folds: int = 5, downstream: bool = True,
                  workers: int | None = None, progress=None) -> EvalReport:
    """Evaluate every (dataset, method, rate, repeat) cell.

    Cells sharing (dataset, rate, repeat) see the same amputation. Failures are
    recorded on the entry and the run continues. Results do not depend on
    ``workers``.
    """
    methods = list(methods)
    unknown = [mth for mth in methods if mth not in METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {METHODS}")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    for r in rates:
        if not 0.0 < float(r) < 1.0:
            raise ConfigError(f"missing rates must lie in (0, 1), got {r}")
    for ds in datasets:
        if np.isnan(ds.features()).any():
            raise ConfigError(f"dataset {ds.name!r} has missing feature cells; benchmarks need ground truth")
    nica_cfg = nica_cfg or nica.NicaConfig()
    base_cfg = base_cfg or BaselineConfig()
    jobs = []
    for di, ds in enumerate(datasets):
        for ri, rate in enumerate(rates):
            for rep in range(repeats):
                s = repeat_seed(seed, di, ri, rep)
                for method in methods:
                    jobs.append({"dataset": ds, "method": method, "rate": float(rate), "repeat": rep,
                                 "seed": s, "nica": nica_cfg, "baseline": base_cfg,
                                 "folds": folds, "downstream": downstream})
    workers = default_workers() if workers is None else workers
    entries = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for entry in pool.map(_run_cell, jobs):
                entries.append(entry)
                if progress:
                    progress(entry)
    else:
        for job in jobs:
            entries.append(_run_cell(job))
            if progress:
                progress(entries[-1])
    config = {"datasets": [ds.name for ds in datasets], "methods": methods, "rates": [float(r) for r in rates],
              "repeats": repeats, "seed": seed, "folds": folds, "downstream": downstream,
              "nica": nica_cfg.to_dict(), "baseline": base_cfg.to_dict()}
    return EvalReport(entries, config)
