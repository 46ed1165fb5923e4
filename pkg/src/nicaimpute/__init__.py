"""Missing-value imputation for tabular data with a neural cellular automaton."""

__version__ = "0.1.0"

from .baselines import BaselineConfig, knn_impute, mean_impute, mice_impute
from .data import ColumnStats, Dataset, ampute_mcar, destandardize, load_csv, standardize, write_csv, zero_fill
from .evaluation import EvalReport, auroc, auroc_ovr, cross_validate, r2, rmse_missing, run_benchmark
from .nica import NicaConfig, NicaModel, grow, impute, train

__all__ = [
    "BaselineConfig", "ColumnStats", "Dataset", "EvalReport", "NicaConfig", "NicaModel",
    "ampute_mcar", "auroc", "auroc_ovr", "cross_validate", "destandardize", "grow", "impute",
    "knn_impute", "load_csv", "mean_impute", "mice_impute", "r2", "rmse_missing", "run_benchmark",
    "standardize", "train", "write_csv", "zero_fill",
]
