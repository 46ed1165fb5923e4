"""Neural imputation cellular automaton: growth rule, losses, training, imputation."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import corrupt
from .errors import ConfigError, DivergenceError, ShapeError, TrainingError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nicaimpute-checkpoint"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2")
# attention is O(n^2): above this many rows inference runs in contiguous chunks
CHUNK_THRESHOLD = 8192
CHUNK_ROWS = 1024


@dataclass(frozen=True)
class NicaConfig:
    K: int = 10
    v: int = 8
    corruption_rate: float = 0.2
    iterations: int = 1000
    batch_rows: int = 1024
    hidden_multiplier: int = 5
    fnn_dropout: float = 0.5
    row_skip_rate: float = 0.1
    alpha1: float = 10.0
    alpha2: float = 10.0
    learning_rate: float = 0.001
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.K < 1:
            problems.append("K must be >= 1")
        if self.v < 1:
            problems.append("v must be >= 1")
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        if self.batch_rows < 2:
            problems.append("batch_rows must be >= 2")
        if self.hidden_multiplier < 1:
            problems.append("hidden_multiplier must be >= 1")
        for name in ("corruption_rate", "fnn_dropout", "row_skip_rate"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        if self.alpha1 < 0 or self.alpha2 < 0:
            problems.append("alphas must be >= 0")
        if self.learning_rate <= 0:
            problems.append("learning_rate must be > 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "NicaConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NicaConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(data) - set(fields)
        if unknown:
            raise ConfigError(f"unknown NICA settings: {sorted(unknown)}")
        out = {}
        for key, value in data.items():
            default = getattr(cls, key)
            try:
                out[key] = type(default)(value) if not isinstance(default, bool) else bool(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
        return cls(**out)


@dataclass
class NicaModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    d: int
    config: NicaConfig = field(default_factory=NicaConfig)

    @classmethod
    def initialize(cls, d: int, config: NicaConfig, rng: np.random.Generator | None = None) -> "NicaModel":
        """Fan-scaled uniform first layer, zero update head (the automaton starts as identity)."""
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        hidden = config.hidden_multiplier * d
        limit = np.sqrt(6.0 / (2 * d + hidden))
        return cls(
            W1=rng.uniform(-limit, limit, size=(2 * d, hidden)),
            b1=np.zeros(hidden),
            W2=np.zeros((hidden, d)),
            b2=np.zeros(d),
            d=d,
            config=config,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "NicaModel":
        return NicaModel(*(p.copy() for p in (self.W1, self.b1, self.W2, self.b2)), self.d, self.config)

    def check(self) -> None:
        hidden = self.config.hidden_multiplier * self.d
        expected = {"W1": (2 * self.d, hidden), "b1": (hidden,), "W2": (hidden, self.d), "b2": (self.d,)}
        for name, shape in expected.items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ShapeError(f"{name} has shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} contains non-finite entries")

    def save(self, path) -> None:
        """JSON checkpoint; arrays are row-major float64 written with round-trip precision."""
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "d": self.d,
            "config": self.config.to_dict(),
            "params": {
                name: {"shape": list(value.shape), "data": value.ravel().tolist()}
                for name, value in self.params().items()
            },
        }
        Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NicaModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a NICA checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
        arrays = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["params"].items()
        }
        model = cls(**arrays, d=int(payload["d"]), config=NicaConfig.from_dict(payload["config"]))
        model.check()
        return model


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v_moment: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class LossBreakdown:
    recovering: float
    observed: float
    missing: float
    total: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.recovering, self.observed, self.missing, self.total)


@dataclass
class GrowthTrace:
    states: list[np.ndarray]
    step_skip_masks: list[np.ndarray] | None = None

    def __len__(self):
        return len(self.states)


# ---------------------------------------------------------------------------
# differentiable pieces


def cosine_attention(x: ad.Node, fused: bool = True) -> ad.Node:
    """``softmax(sqrt(d) * cosine(x, x)) @ x`` with queries = keys = values = ``x``."""
    if fused:
        return ad.attention(x)
    d = x.shape[-1]
    weights = ad.softmax_rows(ad.cosine_matrix(x, x) * float(np.sqrt(d)))
    return ad.matmul(weights, x)


def param_nodes(tape: ad.Tape, model: NicaModel, trainable: bool = True) -> dict[str, ad.Node]:
    make = tape.parameter if trainable else tape.constant
    return {name: make(value) for name, value in model.params().items()}


def growth_step(x: ad.Node, params: dict[str, ad.Node], skip_mask: np.ndarray | None,
                training: bool, rng: np.random.Generator | None = None,
                dropout_rate: float = 0.0, fused: bool = True) -> ad.Node:
    """One automaton update ``x + FNN([attention(x), x])``.

    Rows whose ``skip_mask`` entry is 0 keep their state but still act as
    attention context.
    """
    h = ad.concat_cols(cosine_attention(x, fused=fused), x)
    hidden = params["W1"].shape[1]
    keep = None
    if training and dropout_rate > 0.0:
        keep = ad.dropout_keep((*h.shape[:-1], hidden), dropout_rate, rng if rng is not None else x.tape.rng)
    if fused:
        return x + ad.mlp(h, params["W1"], params["b1"], params["W2"], params["b2"], keep, skip_mask)
    h = ad.relu(ad.matmul(h, params["W1"]) + params["b1"])
    if keep is not None:
        h = ad.mul_const(h, keep)
    delta = ad.matmul(h, params["W2"]) + params["b2"]
    if skip_mask is not None:
        delta = ad.mul_const(delta, np.asarray(skip_mask, dtype=np.float64)[..., None])
    return x + delta


def _grow_nodes(x: ad.Node, params, K: int, training: bool, cfg: NicaConfig,
                rng: np.random.Generator, trace: GrowthTrace | None = None, fused: bool = True) -> ad.Node:
    for k in range(K):
        skip = ad.row_dropout_mask(x.shape[:-1], cfg.row_skip_rate, rng) if training else None
        x = growth_step(x, params, skip, training, rng, cfg.fnn_dropout, fused=fused)
        if not np.all(np.isfinite(x.value)):
            raise DivergenceError(f"non-finite state after growth step {k + 1}", step=k + 1)
        if trace is not None:
            trace.states.append(x.value.copy())
            if skip is not None:
                trace.step_skip_masks.append(skip)
    return x


def grow(x0: np.ndarray, model: NicaModel, K: int | None = None, training: bool = False,
         rng: np.random.Generator | None = None, capture_trace: bool = False):
    """Run ``K`` growth steps on a plain matrix; returns ``(X_K, trace or None)``."""
    K = model.config.K if K is None else K
    if K < 1:
        raise ConfigError("K must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-1] != model.d:
        raise ShapeError(f"model expects {model.d} features, got {x0.shape[-1]}")
    rng = rng if rng is not None else np.random.default_rng(model.config.seed)
    tape = ad.Tape()
    trace = GrowthTrace([x0.copy()], [] if training else None) if capture_trace else None
    out = _grow_nodes(tape.constant(x0), param_nodes(tape, model, trainable=False), K,
                      training, model.config, rng, trace).value
    tape.clear()
    return out, trace


def losses(xK: ad.Node, x0_bar: np.ndarray, m: np.ndarray, mc: np.ndarray,
           alpha1: float, alpha2: float):
    """Recovering, observed and (negated) missing losses and their weighted total.

    Inputs with a leading variant axis give per-variant nodes. Returns
    ``(LossBreakdown, total_node)``; the breakdown averages over variants.
    """
    m = np.asarray(m, dtype=bool)
    mc = np.asarray(mc, dtype=bool)
    if np.any(mc & ~np.broadcast_to(m, mc.shape)):
        raise ValueError("corruption mask must be a subset of the observation mask")
    rec = ad.masked_sq_mean(xK, x0_bar, mc)
    obs = ad.masked_sq_mean(xK, x0_bar, m)
    mis = -ad.masked_sq_mean(xK, x0_bar, ~m)
    total = rec * alpha1 + obs * alpha2 + mis
    breakdown = LossBreakdown(float(np.mean(rec.value)), float(np.mean(obs.value)),
                              float(np.mean(mis.value)), 0.0)
    breakdown = dataclasses.replace(
        breakdown, total=alpha1 * breakdown.recovering + alpha2 * breakdown.observed + breakdown.missing)
    return breakdown, total


def iteration_loss(tape: ad.Tape, params: dict[str, ad.Node], seeds: np.ndarray, target: np.ndarray,
                   m: np.ndarray, mc: np.ndarray, cfg: NicaConfig, training: bool = True, fused: bool = True):
    """Grow every corruption variant of a row batch and average the model loss over variants."""
    x = tape.constant(seeds)
    xK = _grow_nodes(x, params, cfg.K, training, cfg, tape.rng, fused=fused)
    breakdown, per_variant = losses(xK, target, m, mc, cfg.alpha1, cfg.alpha2)
    return breakdown, ad.mean_all(per_variant)


# ---------------------------------------------------------------------------
# optimisation


def adam_step(model: NicaModel, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``model`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = getattr(model, name)
        if p.shape != g.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v_moment.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def train(x0_bar: np.ndarray, m: np.ndarray, cfg: NicaConfig | None = None,
          callback=None) -> tuple[NicaModel, list[float]]:
    """Fit a model on a standardized, zero-filled matrix with observation mask ``m``.

    ``callback(iteration, LossBreakdown)`` is called after every update if given.
    """
    cfg = cfg or NicaConfig()
    x0_bar = np.asarray(x0_bar, dtype=np.float64)
    m = np.asarray(m, dtype=bool)
    if x0_bar.shape != m.shape or x0_bar.ndim != 2:
        raise ShapeError("x0_bar and mask must be matching 2-D arrays")
    if np.any(np.isnan(x0_bar)):
        raise ValueError("x0_bar must be zero-filled (no NaN)")
    if np.any(m.sum(axis=0) == 0):
        raise ValueError("every column needs at least one observed cell")
    n, d = x0_bar.shape
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, corrupt_ss, batch_ss, tape_ss = ss.spawn(4)
    model = NicaModel.initialize(d, cfg, np.random.default_rng(init_ss))
    history: list[float] = []
    if cfg.iterations == 0:
        return model, history

    cset = corrupt(x0_bar, m, cfg.corruption_rate, cfg.v, np.random.default_rng(corrupt_ss))
    batch_rng = np.random.default_rng(batch_ss)
    tape_seeds = tape_ss.generate_state(cfg.iterations, dtype=np.uint64)
    state = AdamState()
    b = min(n, cfg.batch_rows)
    for it in range(cfg.iterations):
        rows = np.sort(batch_rng.choice(n, size=b, replace=False))
        tape = ad.Tape(int(tape_seeds[it]))
        params = param_nodes(tape, model)
        try:
            breakdown, loss = iteration_loss(tape, params, cset.variants[:, rows], x0_bar[rows],
                                             m[rows], cset.masks[:, rows], cfg)
        except DivergenceError as exc:
            raise DivergenceError(f"iteration {it}: {exc}", step=it) from exc
        if not np.isfinite(loss.value):
            raise DivergenceError(f"non-finite loss at iteration {it}", step=it)
        ad.backward(loss)
        adam_step(model, {name: node.grad for name, node in params.items()}, state, cfg.learning_rate)
        history.append(float(loss.value))
        tape.clear()
        if callback is not None:
            callback(it, breakdown)
    return model, history


# ---------------------------------------------------------------------------
# inference


def impute(model: NicaModel, x0_bar: np.ndarray, m: np.ndarray, capture_trace: bool = False):
    """Grow the zero-filled matrix (no dropout, no row skipping) and splice.

    Observed cells are copied verbatim from ``x0_bar``. Returns the standardized
    imputed matrix, or ``(matrix, GrowthTrace)`` when ``capture_trace`` is set.
    """
    x0_bar = np.asarray(x0_bar, dtype=np.float64)
    m = np.asarray(m, dtype=bool)
    if x0_bar.ndim != 2 or x0_bar.shape[1] != model.d:
        raise ShapeError(f"model expects {model.d} features, got shape {x0_bar.shape}")
    if m.shape != x0_bar.shape:
        raise ShapeError("mask shape differs from data shape")
    n = x0_bar.shape[0]
    if n > CHUNK_THRESHOLD:
        parts, traces = [], []
        for start in range(0, n, CHUNK_ROWS):
            grown, tr = grow(x0_bar[start:start + CHUNK_ROWS], model, capture_trace=capture_trace)
            parts.append(grown)
            traces.append(tr)
        grown = np.concatenate(parts, axis=0)
        trace = None
        if capture_trace:
            trace = GrowthTrace([np.concatenate([t.states[k] for t in traces]) for k in range(len(traces[0]))])
    else:
        grown, trace = grow(x0_bar, model, capture_trace=capture_trace)
    out = np.where(m, x0_bar, grown)
    return (out, trace) if capture_trace else out


def export_trace(trace: GrowthTrace, path) -> list[Path]:
    """Write ``step_XX.csv`` (one per growth state, no header) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(len(trace.states) - 1)))
    files = []
    for k, state in enumerate(trace.states):
        target = path / f"step_{k:0{width}d}.csv"
        np.savetxt(target, state, delimiter=",", fmt="%.17g")
        files.append(target)
    return files


def read_trace(path) -> GrowthTrace:
    files = sorted(Path(path).glob("step_*.csv"))
    return GrowthTrace([np.atleast_2d(np.loadtxt(f, delimiter=",")) for f in files])


# ---------------------------------------------------------------------------
# gradient check


def gradient_check(n: int = 6, d: int = 4, K: int = 2, v: int = 2, seed: int = 0,
                   h: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Compare tape gradients of the training loss against central differences.

    A random problem of ``n`` rows and ``d`` columns is built with a random,
    non-zero update head. Dropout and row-skip masks are frozen by replaying
    the same tape seed for every loss evaluation. Returns the maximum
    relative error over all parameters and the maximum per parameter.
    """
    if n < 2 or d < 1:
        raise ConfigError("gradient check needs n >= 2 and d >= 1")
    cfg = NicaConfig(K=K, v=v, seed=seed, iterations=1)
    data_ss, mask_ss, model_ss, corrupt_ss, tape_ss = np.random.SeedSequence(seed).spawn(5)
    x = np.random.default_rng(data_ss).normal(size=(n, d))
    m = np.random.default_rng(mask_ss).random((n, d)) >= 0.25
    m[np.arange(n), np.arange(n) % d] = True
    x0_bar = np.where(m, x, 0.0)
    rng = np.random.default_rng(model_ss)
    model = NicaModel.initialize(d, cfg, rng)
    model.b1 = rng.normal(scale=0.3, size=model.b1.shape)
    model.W2 = rng.normal(scale=0.3, size=model.W2.shape)
    model.b2 = rng.normal(scale=0.3, size=model.b2.shape)
    cset = corrupt(x0_bar, m, cfg.corruption_rate, v, np.random.default_rng(corrupt_ss))
    tape_seed = int(tape_ss.generate_state(1)[0])

    def evaluate(values: dict[str, np.ndarray], with_grad: bool):
        tape = ad.Tape(tape_seed)
        params = {name: tape.parameter(val) for name, val in values.items()}
        _, loss = iteration_loss(tape, params, cset.variants, x0_bar, m, cset.masks, cfg)
        grads = None
        if with_grad:
            ad.backward(loss)
            grads = {name: node.grad.copy() for name, node in params.items()}
        value = float(loss.value)
        tape.clear()
        return value, grads

    base = {name: val.copy() for name, val in model.params().items()}
    _, analytic = evaluate(base, True)
    per_param = {}
    for name in PARAM_NAMES:
        def f(arr, name=name):
            trial = dict(base)
            trial[name] = arr
            return evaluate(trial, False)[0]
        numeric = ad.numerical_gradient(f, base[name], h)
        per_param[name] = float(ad.relative_error(analytic[name], numeric).max())
    return max(per_param.values()), per_param
