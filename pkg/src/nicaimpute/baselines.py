"""Reference imputers: column mean, k-nearest neighbours, chained ridge equations.

All three take a matrix ``x`` (values at missing cells are ignored) and a
boolean mask ``m`` (True = observed) and never touch observed cells.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ImputationError, ShapeError

WEIGHTINGS = ("uniform", "inverse-distance")


@dataclass(frozen=True)
class BaselineConfig:
    knn_k: int = 5
    knn_weighting: str = "uniform"
    mice_iterations: int = 10
    mice_ridge_lambda: float = 1e-3

    def __post_init__(self):
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        if self.knn_weighting not in WEIGHTINGS:
            raise ConfigError(f"knn_weighting must be one of {WEIGHTINGS}, got {self.knn_weighting!r}")
        if self.mice_iterations < 1:
            raise ConfigError("mice_iterations must be >= 1")
        if not self.mice_ridge_lambda >= 0:
            raise ConfigError("mice_ridge_lambda must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BaselineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown baseline settings: {sorted(unknown)}")
        return cls(**data)


def _check(x, m):
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=bool)
    if x.ndim != 2 or x.shape != m.shape:
        raise ShapeError(f"expected matching 2-D data and mask, got {x.shape} and {m.shape}")
    return x, m


def column_means(x, m) -> np.ndarray:
    x, m = _check(x, m)
    counts = m.sum(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ImputationError(f"columns {empty.tolist()} have no observed cell")
    return np.where(m, x, 0.0).sum(axis=0) / counts


def mean_impute(x, m) -> np.ndarray:
    x, m = _check(x, m)
    return np.where(m, x, column_means(x, m))


def pairwise_distances(x, m) -> np.ndarray:
    """Scaled Euclidean distance over co-observed columns.

    ``dist(i, l) = sqrt(d / |C| * sum_{j in C} (x_ij - x_lj)^2)`` with ``C`` the
    columns observed in both rows; ``inf`` when ``C`` is empty. The diagonal is
    set to ``inf`` so a row never donates to itself.
    """
    x, m = _check(x, m)
    n, d = x.shape
    xz = np.where(m, x, 0.0)
    mf = m.astype(np.float64)
    out = np.empty((n, n))
    for i in range(n):
        both = mf[i] * mf
        diff = (xz[i] - xz) * both
        common = both.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[i] = np.where(common > 0, np.sqrt(d / np.where(common > 0, common, 1.0)
                                                  * (diff * diff).sum(axis=1)), np.inf)
    np.fill_diagonal(out, np.inf)
    return out


def knn_impute(x, m, k: int = 5, weighting: str = "uniform") -> np.ndarray:
    """Fill each missing cell from the ``k`` nearest rows that observe that column.

    Ties in distance go to the lower row index. Rows sharing no observed
    column are never donors; a cell without donors gets the column mean.
    With inverse-distance weighting, donors at distance 0 (if any) share
    the weight equally.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    x, m = _check(x, m)
    out = np.where(m, x, 0.0)
    rows = np.flatnonzero(~m.all(axis=1))
    if rows.size == 0:
        return out
    means = column_means(x, m)
    dist = pairwise_distances(x, m)
    for i in rows:
        order = np.argsort(dist[i], kind="stable")
        finite = order[np.isfinite(dist[i, order])]
        for j in np.flatnonzero(~m[i]):
            donors = finite[m[finite, j]][:k]
            if donors.size == 0:
                out[i, j] = means[j]
                continue
            vals = out[donors, j]
            if weighting == "uniform":
                out[i, j] = vals.mean()
                continue
            dd = dist[i, donors]
            zero = dd == 0
            if zero.any():
                out[i, j] = vals[zero].mean()
            else:
                w = 1.0 / dd
                out[i, j] = (w * vals).sum() / w.sum()
    return out


def ridge_fit(a: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Closed-form ridge with an unpenalized intercept; returns ``(weights, intercept)``."""
    n, p = a.shape
    aug = np.column_stack([a, np.ones(n)])
    gram = aug.T @ aug
    gram[np.arange(p), np.arange(p)] += lam
    sol = np.linalg.solve(gram, aug.T @ y)
    return sol[:p], float(sol[p])


def mice_impute(x, m, iterations: int = 10, ridge_lambda: float = 1e-3) -> np.ndarray:
    """Chained ridge regressions, columns visited left to right each round."""
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    if ridge_lambda < 0:
        raise ConfigError("ridge_lambda must be >= 0")
    x, m = _check(x, m)
    short = np.flatnonzero(m.sum(axis=0) < 2)
    if short.size:
        raise ImputationError(f"columns {short.tolist()} have fewer than 2 observed cells")
    out = mean_impute(x, m)
    todo = np.flatnonzero(~m.all(axis=0))
    if todo.size == 0 or x.shape[1] < 2:
        return out
    for _ in range(iterations):
        for j in todo:
            obs, miss = m[:, j], ~m[:, j]
            others = np.delete(out, j, axis=1)
            w, b = ridge_fit(others[obs], out[obs, j], ridge_lambda)
            out[miss, j] = others[miss] @ w + b
    return out


def impute(method: str, x, m, cfg: BaselineConfig | None = None) -> np.ndarray:
    cfg = cfg or BaselineConfig()
    if method == "mean":
        return mean_impute(x, m)
    if method == "knn":
        return knn_impute(x, m, cfg.knn_k, cfg.knn_weighting)
    if method == "mice":
        return mice_impute(x, m, cfg.mice_iterations, cfg.mice_ridge_lambda)
    raise ConfigError(f"unknown baseline {method!r}")


METHODS = ("mean", "knn", "mice")
