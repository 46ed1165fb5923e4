"""Command-line front end: ``nica {ampute,impute,evaluate,sweep,gradcheck}``.

Exit codes: 0 success, 1 gradient check failed, 2 I/O or parse error,
3 amputation error, 4 training divergence, 5 invalid configuration.

Settings come from an INI file (``--config``) with sections ``[nica]``,
``[baseline]``, ``[benchmark]`` and ``[data]``; ``--set section.key=value``
and the dedicated flags override file values.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, autodiff as ad, baselines, data, evaluation, kernels, nica, synthetic
from .baselines import BaselineConfig
from .errors import (AmputationError, ConfigError, DivergenceError, ImputationError, NicaError,
                     ParseError, TrainingError)

log = logging.getLogger("nicaimpute")

EXIT_OK, EXIT_GRADCHECK, EXIT_IO, EXIT_AMPUTE, EXIT_DIVERGED, EXIT_CONFIG = range(6)
SWEEP_RATES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
GRADCHECK_TOLERANCE = 1e-4
SECTIONS = ("nica", "baseline", "benchmark", "data")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration


def read_config(path, overrides=()) -> dict[str, dict[str, str]]:
    """Raw string settings per section, file first, then ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys such as "K" are case sensitive
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
        except configparser.Error as exc:
            raise CliError(f"cannot parse config {path}: {exc}", EXIT_CONFIG) from exc
    settings = {s: dict(parser[s]) if parser.has_section(s) else {} for s in SECTIONS}
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}; expected {list(SECTIONS)}")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in SECTIONS or not name:
            raise ConfigError(f"--set expects section.key=value with section in {list(SECTIONS)}, got {item!r}")
        settings[section][name] = value.strip()
    return settings


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def nica_config(section: dict[str, str], seed: int | None = None) -> nica.NicaConfig:
    cfg = nica.NicaConfig.from_dict(section)
    return cfg.replace(seed=seed) if seed is not None else cfg


def baseline_config(section: dict[str, str]) -> BaselineConfig:
    fields = {"knn_k": int, "knn_weighting": str, "mice_iterations": int, "mice_ridge_lambda": float}
    unknown = set(section) - set(fields)
    if unknown:
        raise ConfigError(f"unknown baseline settings: {sorted(unknown)}")
    try:
        return BaselineConfig(**{k: fields[k](v) for k, v in section.items()})
    except ValueError as exc:
        raise ConfigError(f"bad baseline setting: {exc}") from exc


def data_hints(section: dict[str, str], target: str | None = None) -> dict:
    allowed = {"target", "target_kind", "categorical"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown data settings: {sorted(unknown)}")
    hints: dict = {}
    if target or section.get("target"):
        hints["target"] = target or section["target"]
    if section.get("target_kind"):
        hints["target_kind"] = section["target_kind"]
    if section.get("categorical"):
        hints["categorical"] = _split(section["categorical"])
    return hints


def load_table(path, hints: dict) -> data.Dataset:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"input file {path} does not exist", EXIT_IO)
    if "target" not in hints:
        # a column literally called "target" is treated as the prediction target
        with path.open(encoding="utf-8") as fh:
            header = [h.strip() for h in fh.readline().split(",")]
        if "target" in header:
            hints = {**hints, "target": "target"}
    return data.load_csv(path, hints)


def resolve_datasets(entries: list[str], hints: dict) -> list[data.Dataset]:
    """Entries are CSV paths, directories (every ``*.csv`` inside) or ``synthetic:KIND[:k=v;...]``."""
    out = []
    for entry in entries:
        if entry.startswith("synthetic:"):
            _, _, rest = entry.partition(":")
            kind, _, params = rest.partition(":")
            kwargs = {}
            for pair in filter(None, params.split(";")):
                k, _, v = pair.partition("=")
                kwargs[k.strip()] = float(v) if k.strip() in ("separation", "noise") else int(v)
            try:
                out.append(synthetic.make(kind, **kwargs))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad synthetic dataset {entry!r}: {exc}") from exc
            continue
        path = Path(entry)
        if path.is_dir():
            files = sorted(path.glob("*.csv"))
            if not files:
                raise CliError(f"data directory {path} holds no CSV file", EXIT_IO)
            out.extend(load_table(f, hints) for f in files)
        else:
            out.append(load_table(path, hints))
    if not out:
        raise ConfigError("no datasets configured")
    return out


def provenance(command: str, args: argparse.Namespace, **resolved) -> dict:
    return {"tool": "nicaimpute", "version": __version__, "command": command,
            "kernel_backend": kernels.BACKEND,
            "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
            **resolved}


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_ampute(args) -> int:
    ds = load_table(args.input, {"target": args.target} if args.target else {})
    observed = data.observe_mask(ds)
    rng = np.random.default_rng(args.seed)
    cols = ds.feature_columns
    mask = observed.copy()
    mask[:, cols] = data.ampute_mcar(observed[:, cols], args.rate, rng)
    values = np.where(mask, ds.values, np.nan)
    data.write_csv(args.out_data, ds, values)
    data.write_mask(args.out_mask, mask)
    _write_json(sidecar_path(args.out_data), provenance(
        "ampute", args, seed=args.seed, rate=args.rate, outputs=[str(args.out_data), str(args.out_mask)],
        amputed_cells=int((observed & ~mask).sum())))
    log.info("amputed %d cells", int((observed & ~mask).sum()))
    return EXIT_OK


def cmd_impute(args) -> int:
    settings = read_config(args.config, args.set)
    cfg = nica_config(settings["nica"], args.seed)
    bcfg = baseline_config(settings["baseline"])
    if args.method != "nica" and (args.save_model or args.trace_dir):
        raise ConfigError("--save-model and --trace-dir only apply to --method nica")
    ds = load_table(args.input, data_hints(settings["data"], args.target))
    cols = ds.feature_columns
    feats = ds.features()
    m = ~np.isnan(feats)
    if m.all() and not args.allow_complete:
        raise ConfigError("input has no missing feature cell; pass --allow-complete to impute anyway")
    x_std, stats = data.standardize(feats, m)
    x0 = data.zero_fill(x_std, m)
    trace = None
    if args.method == "nica":
        history = []
        model, history = nica.train(x0, m, cfg)
        imputed, trace = nica.impute(model, x0, m, capture_trace=True)
        if args.save_model:
            model.save(args.save_model)
            _write_json(sidecar_path(args.save_model), provenance(
                "impute", args, seed=cfg.seed, nica=cfg.to_dict(), final_loss=history[-1] if history else None))
    else:
        imputed = baselines.impute(args.method, x0, m, bcfg)
    if not np.all(np.isfinite(imputed)):
        raise DivergenceError("imputation produced non-finite values")
    restored = data.destandardize(imputed, stats, ds.feature_kinds())
    values = ds.values.copy()
    values[:, cols] = np.where(m, feats, restored)
    data.write_csv(args.out, ds, values)
    resolved = {"seed": cfg.seed, "method": args.method, "imputed_cells": int((~m).sum()),
                "baseline": bcfg.to_dict()}
    if args.method == "nica":
        resolved["nica"] = cfg.to_dict()
    sub = data.ColumnStats(stats.mean, stats.std)
    feature_ds = data.Dataset(feats, ds.feature_kinds(), [ds.names[j] for j in cols],
                              codebooks={k: ds.codebooks[j] for k, j in enumerate(cols) if j in ds.codebooks},
                              name=ds.name)
    data.write_sidecar(sidecar_path(args.out), sub, feature_ds, provenance("impute", args, **resolved))
    if args.trace_dir:
        files = nica.export_trace(trace, args.trace_dir)
        _write_json(Path(args.trace_dir) / "trace.json", provenance(
            "impute", args, **resolved, scale="standardized", files=[f.name for f in files]))
    return EXIT_OK


def _benchmark_settings(settings, args, sweep: bool) -> dict:
    bench = dict(settings["benchmark"])
    allowed = {"datasets", "methods", "rates", "repeats", "seed", "folds", "downstream", "workers",
               "out_json", "out_csv"}
    unknown = set(bench) - allowed
    if unknown:
        raise ConfigError(f"unknown benchmark settings: {sorted(unknown)}")
    try:
        resolved = {
            "datasets": _split(bench.get("datasets", "synthetic:clusters")),
            "methods": _split(bench.get("methods", ",".join(evaluation.METHODS))),
            "rates": [float(r) for r in _split(bench["rates"])] if "rates" in bench
            else list(SWEEP_RATES if sweep else (0.4,)),
            "repeats": int(bench.get("repeats", 10)),
            "seed": int(bench.get("seed", 0)),
            "folds": int(bench.get("folds", 5)),
            "downstream": _parse_bool(bench.get("downstream", "true")),
            "workers": int(bench["workers"]) if "workers" in bench else None,
            "out_json": bench.get("out_json", "report.json"),
            "out_csv": bench.get("out_csv", "report.csv"),
        }
    except ValueError as exc:
        raise ConfigError(f"bad benchmark setting: {exc}") from exc
    if args.seed is not None:
        resolved["seed"] = args.seed
    if args.workers is not None:
        resolved["workers"] = args.workers
    if args.out_json:
        resolved["out_json"] = args.out_json
    if args.out_csv:
        resolved["out_csv"] = args.out_csv
    return resolved


def cmd_evaluate(args, sweep: bool = False) -> int:
    settings = read_config(args.config, args.set)
    bench = _benchmark_settings(settings, args, sweep)
    cfg = nica_config(settings["nica"])
    bcfg = baseline_config(settings["baseline"])
    datasets = resolve_datasets(bench["datasets"], data_hints(settings["data"]))

    def progress(entry):
        status = entry["error"] or f"rmse={entry['rmse']:.4f}"
        log.info("%s %s rate=%.2f repeat=%d %s", entry["dataset"], entry["method"],
                 entry["missing_rate"], entry["repeat"], status)

    report = evaluation.run_benchmark(datasets, bench["methods"], bench["rates"], bench["repeats"], cfg, bcfg,
                                      seed=bench["seed"], folds=bench["folds"], downstream=bench["downstream"],
                                      workers=bench["workers"], progress=progress)
    report.config["command"] = "sweep" if sweep else "evaluate"
    report.config["version"] = __version__
    report.write_json(bench["out_json"])
    report.write_csv(bench["out_csv"])
    for agg in report.aggregates:
        line = f"{agg['dataset']:<28} {agg['method']:<5} rate={agg['missing_rate']:.2f}"
        if agg["rmse_mean"] is not None:
            line += f"  rmse={agg['rmse_mean']:.4f}+-{agg['rmse_std']:.4f}"
        if agg["downstream_score_mean"] is not None:
            line += f"  {agg['downstream_metric_name']}={agg['downstream_score_mean']:.4f}"
        if agg["failures"]:
            line += f"  failures={agg['failures']}"
        print(line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    faults = [args.inject_fault] if args.inject_fault else []
    with ad.inject_backward_fault(faults[0]) if faults else _null():
        worst, per_param = nica.gradient_check(args.n, args.d, args.k, args.v, args.seed)
    detail = " ".join(f"{k}={v:.3e}" for k, v in per_param.items())
    ok = worst < GRADCHECK_TOLERANCE
    print(f"gradcheck n={args.n} d={args.d} K={args.k} v={args.v} seed={args.seed}: "
          f"max relative error {worst:.3e} ({detail}) {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_GRADCHECK


class _null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# entry point


def _rate(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError("rate must lie in [0, 1)")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nica", description="Tabular imputation with a neural cellular automaton.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("ampute", help="remove observed cells completely at random")
    a.add_argument("input", help="complete CSV table")
    a.add_argument("--rate", type=_rate, required=True, help="fraction of observed cells to remove")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out-data", required=True, help="CSV with removed cells left empty")
    a.add_argument("--out-mask", required=True, help="0/1 CSV, 1 where a cell is observed")
    a.add_argument("--target", help="column to leave untouched")
    a.set_defaults(func=cmd_ampute)

    i = sub.add_parser("impute", help="fill missing cells")
    i.add_argument("input", help="CSV table; empty, NA, ? or nan cells are missing")
    i.add_argument("--method", choices=evaluation.METHODS, default="nica")
    i.add_argument("--config", help="INI file with [nica] and [baseline] sections")
    i.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    i.add_argument("--seed", type=int)
    i.add_argument("--out", required=True, help="imputed CSV; a provenance sidecar goes to OUT.json")
    i.add_argument("--save-model", help="write the trained NICA parameters as a JSON checkpoint")
    i.add_argument("--trace-dir", help="dump the state after every growth step")
    i.add_argument("--target", help="column passed through without imputation")
    i.add_argument("--allow-complete", action="store_true", help="accept input with no missing cells")
    i.set_defaults(func=cmd_impute)

    for name, sweep in (("evaluate", False), ("sweep", True)):
        e = sub.add_parser(name, help="run the benchmark grid" + (" over missing rates 0.1..0.8" if sweep else ""))
        e.add_argument("config", nargs="?", help="INI file with a [benchmark] section")
        e.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        e.add_argument("--seed", type=int)
        e.add_argument("--workers", type=int, help="parallel worker processes (default: $NICA_WORKERS or CPU count)")
        e.add_argument("--out-json")
        e.add_argument("--out-csv")
        e.set_defaults(func=lambda args, sweep=sweep: cmd_evaluate(args, sweep))

    g = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    g.add_argument("--n", type=int, default=6)
    g.add_argument("--d", type=int, default=4)
    g.add_argument("--k", type=int, default=2, help="growth steps")
    g.add_argument("--v", type=int, default=2, help="corruption variants")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", choices=("attention", "mlp"), help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except (ParseError, OSError) as exc:
        code, msg = EXIT_IO, str(exc)
    except AmputationError as exc:
        code, msg = EXIT_AMPUTE, str(exc)
    except (DivergenceError, TrainingError) as exc:
        code, msg = EXIT_DIVERGED, str(exc)
    except (ConfigError, ImputationError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (NicaError, ValueError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    print(f"nica: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
