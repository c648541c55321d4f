"""Self-tuning grid search over monitor parameters, the calibration-size
sensitivity sweep, and converged-parameter histograms.

The grid walks (layer, q, variant parameter, gamma) in lexicographic order;
ties in validation mean HRP resolve to the first cell in that order. The
dominant cost per (layer, q) group is one neighbor-distance matrix, computed
once for the largest k and shared by every (k, gamma) cell; because reported
distances are exact (see scorer), the cached path is bit-identical to
re-evaluating each cell from scratch.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (EmptyBankError, InfeasibleGridError, ValidationError)
from .hrpeval import _metric_hrp
from .scorer import (Monitor, MonitorConfig, build_safe_bank, fit_variant,
                     neighbor_distances, unit_rows, _variant_raw)
from .tensorstore import Dataset, SplitAssignment, layer_tag, split, _fmt

DEFAULT_QS = (0.0, 0.25, 0.5, 0.75)
DEFAULT_KS = (1, 10, 25, 50, 100, 200)
DEFAULT_GAMMAS = tuple(np.arange(-10.0, 10.0 + 0.25, 0.5).tolist())
DEFAULT_PS = (1.0, 0.99, 0.975, 0.95, 0.9, 0.8)
DEFAULT_RS = (0.99, 0.975, 0.95, 0.925, 0.9, 0.8)
DEFAULT_CKS = (1, 4, 8, 16, 32, 64)

_PARAM_NAMES = {"knn": "k", "otb": "p", "residual": "r", "gmm": "c_k"}


def default_threads() -> int:
    env = os.environ.get("HALLUSCOPE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class Grid:
    layers: list[str]
    qs: list[float] = field(default_factory=lambda: list(DEFAULT_QS))
    variant: str = "knn"
    variant_values: list = field(default_factory=lambda: list(DEFAULT_KS))
    gammas: list[float] = field(default_factory=lambda: list(DEFAULT_GAMMAS))
    fusion: str = "product"
    metrics: list[str] | None = None

    def __post_init__(self):
        self.layers = [layer_tag(l) for l in self.layers]
        if not (self.layers and self.qs and self.variant_values and self.gammas):
            raise ValidationError("grid must be nonempty in every dimension")
        if self.variant not in _PARAM_NAMES:
            raise ValidationError(f"unknown variant kind '{self.variant}'")
        if self.fusion not in ("product", "linear"):
            raise ValidationError(f"unknown fusion mode '{self.fusion}'")

    @property
    def param_name(self) -> str:
        return _PARAM_NAMES[self.variant]

    def size(self) -> int:
        return (len(self.layers) * len(self.qs)
                * len(self.variant_values) * len(self.gammas))

    @classmethod
    def default(cls, layers, variant="knn", fusion="product", metrics=None):
        values = {
            "knn": DEFAULT_KS, "otb": DEFAULT_PS,
            "residual": DEFAULT_RS, "gmm": DEFAULT_CKS,
        }[variant]
        return cls(layers=list(layers), variant=variant,
                   variant_values=list(values), fusion=fusion, metrics=metrics)

    @classmethod
    def from_json(cls, path, fallback_layers):
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        variant = doc.get("variant", "knn")
        grid = cls.default(doc.get("layers", fallback_layers), variant=variant,
                           fusion=doc.get("fusion", "product"),
                           metrics=doc.get("metrics"))
        if "q" in doc:
            grid.qs = [float(v) for v in doc["q"]]
        if "gamma" in doc:
            grid.gammas = [float(v) for v in doc["gamma"]]
        key = grid.param_name
        if key in doc:
            grid.variant_values = list(doc[key])
        return grid


@dataclass
class TraceRow:
    layer: str
    q: float
    param: float
    gamma: float
    mean_hrp: float | None
    status: str = "ok"       # ok | skipped
    reason: str = ""


@dataclass
class TuneResult:
    best: MonitorConfig
    best_mean_hrp: float
    trace: list[TraceRow]
    seed: int
    split: SplitAssignment

    @property
    def skipped(self) -> list[TraceRow]:
        return [r for r in self.trace if r.status != "ok"]


def _mean_hrp(confidence: np.ndarray, metric_cols: dict[str, np.ndarray]):
    values = []
    for col in metric_cols.values():
        m = _metric_hrp(confidence, col)
        if m.hrp is not None:
            values.append(m.hrp)
    return float(np.mean(values)) if values else None


def _group_rows(grid: Grid, layer: str, q: float, fit_ds: Dataset,
                val_units: np.ndarray, val_fn: np.ndarray,
                metric_cols: dict[str, np.ndarray], seed: int,
                use_cache: bool) -> list[TraceRow]:
    """Evaluate every (param, gamma) cell of one (layer, q) group."""
    rows = []

    def skip_all(reason):
        for vp in grid.variant_values:
            for g in grid.gammas:
                rows.append(TraceRow(layer, q, float(vp), g, None,
                                     "skipped", reason))
        return rows

    fit_features = fit_ds.features(layer)
    try:
        bank = build_safe_bank(fit_features, fit_ds.sample_ids,
                               fit_ds.quality, q, layer)
    except EmptyBankError as exc:
        return skip_all(str(exc))

    if grid.variant == "knn":
        feasible = [int(k) for k in grid.variant_values if int(k) <= bank.size]
        cached = None
        if use_cache and feasible:
            kmax = max(feasible)
            cached = neighbor_distances(val_units, bank.unit_vectors, kmax)
        for vp in grid.variant_values:
            k = int(vp)
            if k > bank.size:
                for g in grid.gammas:
                    rows.append(TraceRow(layer, q, float(k), g, None, "skipped",
                                         f"k={k} exceeds bank size {bank.size}"))
                continue
            if cached is not None:
                r_k = cached[:, k - 1]
            else:
                r_k = neighbor_distances(val_units, bank.unit_vectors, k)[:, k - 1]
            distance = -r_k
            rows.extend(_gamma_sweep(grid, layer, q, float(k), distance,
                                     val_fn, metric_cols))
    else:
        for vp in grid.variant_values:
            try:
                model = fit_variant(bank, grid.variant,
                                    {grid.param_name: vp},
                                    calib_features=fit_features, seed=seed)
            except ValidationError as exc:
                for g in grid.gammas:
                    rows.append(TraceRow(layer, q, float(vp), g, None,
                                         "skipped", str(exc)))
                continue
            raw = _variant_raw(val_units.astype(np.float64), model)
            distance = model.standardization.apply(raw)
            rows.extend(_gamma_sweep(grid, layer, q, float(vp), distance,
                                     val_fn, metric_cols))
    return rows


def _gamma_sweep(grid, layer, q, vp, distance, val_fn, metric_cols):
    rows = []
    for g in grid.gammas:
        if grid.fusion == "linear":
            conf = distance + g * val_fn
        elif g == 0.0:
            conf = distance
        else:
            conf = distance * val_fn ** g
        rows.append(TraceRow(layer, q, vp, g, _mean_hrp(conf, metric_cols)))
    return rows


def self_tune(calib_dataset: Dataset, grid: Grid, val_fraction: float = 0.25,
              seed: int = 0, threads: int | None = None,
              use_cache: bool = True) -> TuneResult:
    """Grid search maximizing mean HRP on a held-out validation split of the
    calibration set (hallucinations stay in the validation side)."""
    available = set(calib_dataset.layers())
    missing = [l for l in grid.layers if l not in available]
    if missing:
        raise ValidationError(f"calibration dataset lacks layer {missing[0]}")
    if calib_dataset.quality is None:
        raise ValidationError("calibration dataset has no quality table")
    metrics = grid.metrics or calib_dataset.quality.metric_names

    assignment = split(calib_dataset, val_fraction, seed)
    fit_ds = calib_dataset.subset(assignment.calib_ids)
    val_ds = calib_dataset.subset(assignment.val_ids)
    metric_cols = {m: val_ds.quality.metrics[m] for m in metrics}

    groups = [(l, qv) for l in grid.layers for qv in grid.qs]
    per_layer = {}
    for l in grid.layers:
        units, norms = unit_rows(val_ds.features(l))
        per_layer[l] = (units, norms)

    def run_group(pair):
        l, qv = pair
        units, norms = per_layer[l]
        return _group_rows(grid, l, qv, fit_ds, units, norms, metric_cols,
                           seed, use_cache)

    n_threads = threads if threads is not None else default_threads()
    if n_threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run_group, groups))
    else:
        results = [run_group(g) for g in groups]

    trace: list[TraceRow] = [row for rows in results for row in rows]
    best_row = None
    for row in trace:  # trace is already in lexicographic grid order
        if row.status != "ok" or row.mean_hrp is None:
            continue
        if best_row is None or row.mean_hrp > best_row.mean_hrp:
            best_row = row
    if best_row is None:
        raise InfeasibleGridError("every grid cell was infeasible")

    if grid.variant in ("knn", "gmm"):
        best_param = {_PARAM_NAMES[grid.variant]: int(best_row.param)}
    else:
        best_param = {_PARAM_NAMES[grid.variant]: best_row.param}
    best = MonitorConfig(
        layer=best_row.layer, q=best_row.q, variant=grid.variant,
        variant_params=best_param, gamma=best_row.gamma,
        fusion=grid.fusion, metrics=list(metrics),
    )
    return TuneResult(best=best, best_mean_hrp=best_row.mean_hrp,
                      trace=trace, seed=seed, split=assignment)


def fit_monitor(dataset: Dataset, config: MonitorConfig, seed: int = 0) -> Monitor:
    """Fit the deployable monitor for a chosen configuration on a full
    calibration dataset."""
    features = dataset.features(config.layer)
    bank = build_safe_bank(features, dataset.sample_ids, dataset.quality,
                           config.q, config.layer)
    model = fit_variant(bank, config.variant, config.variant_params,
                        calib_features=features, seed=seed)
    return Monitor(config=config, bank=bank, model=model)


# ---------------------------------------------------------------------------
# Sensitivity sweep
# ---------------------------------------------------------------------------

@dataclass
class SensitivityRow:
    factor: int
    n_calib: int
    mean_hrp: float | None
    std_hrp: float | None
    feasible: bool
    reason: str = ""


def sensitivity_sweep(calib_dataset: Dataset, test_dataset: Dataset,
                      factors, repeats: int = 3, seed: int = 0,
                      grid: Grid | None = None, val_fraction: float = 0.25,
                      threads: int | None = None) -> list[SensitivityRow]:
    """Downsample the calibration set by each factor, re-run self-tuning, and
    evaluate the refit monitor's mean HRP on the test set."""
    if grid is None:
        grid = Grid.default(calib_dataset.layers())
    n = calib_dataset.n
    rows = []
    for factor in factors:
        if factor < 1:
            raise ValidationError(f"factor must be >= 1, got {factor}")
        size = n // factor
        if size < 2:
            rows.append(SensitivityRow(factor, size, None, None, False,
                                       f"subsample of {size} too small"))
            continue
        values, reason = [], ""
        for rep in range(repeats):
            rng = np.random.default_rng([seed, factor, rep])
            chosen = set(rng.permutation(n)[:size].tolist())
            ids = [calib_dataset.sample_ids[i] for i in range(n)
                   if i in chosen]
            sub = calib_dataset.subset(ids)
            run_seed = int(rng.integers(2 ** 31))
            try:
                tuned = self_tune(sub, grid, val_fraction, run_seed,
                                  threads=threads)
                monitor = fit_monitor(sub, tuned.best, seed=run_seed)
                conf = monitor.score_features(
                    test_dataset.features(tuned.best.layer))
                cols = {m: test_dataset.quality.metrics[m]
                        for m in tuned.best.metrics}
                mh = _mean_hrp(conf, cols)
                if mh is not None:
                    values.append(mh)
            except (InfeasibleGridError, ValidationError) as exc:
                reason = str(exc)
        if values:
            rows.append(SensitivityRow(
                factor, size, float(np.mean(values)),
                float(np.std(values)), True))
        else:
            rows.append(SensitivityRow(factor, size, None, None, False,
                                       reason or "no feasible repeat"))
    return rows


def parameter_histogram(results: list[TuneResult]) -> dict[str, dict]:
    """Exact counts of converged parameter values across tuning runs."""
    if not results:
        raise ValidationError("no tuning results to aggregate")
    hist: dict[str, dict] = {"layer": {}, "q": {}, "gamma": {}}
    for res in results:
        cfg = res.best
        pname = _PARAM_NAMES[cfg.variant]
        hist.setdefault(pname, {})
        for key, value in (("layer", cfg.layer), ("q", cfg.q),
                           ("gamma", cfg.gamma),
                           (pname, cfg.variant_params[pname])):
            hist[key][value] = hist[key].get(value, 0) + 1
    return hist


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_trace_csv(trace: list[TraceRow], path) -> None:
    lines = ["layer,q,param,gamma,mean_hrp,status,reason"]
    for r in trace:
        mh = "" if r.mean_hrp is None else _fmt(r.mean_hrp)
        lines.append(f"{r.layer},{_fmt(r.q)},{_fmt(r.param)},{_fmt(r.gamma)},"
                     f"{mh},{r.status},{r.reason}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_tune_json(result: TuneResult, path, trace_file="trace.csv") -> None:
    doc = {
        "best": {
            "layer": result.best.layer,
            "q": result.best.q,
            "variant": result.best.variant,
            "variant_params": result.best.variant_params,
            "gamma": result.best.gamma,
            "fusion": result.best.fusion,
            "metrics": result.best.metrics,
        },
        "best_mean_hrp": result.best_mean_hrp,
        "seed": result.seed,
        "split": {
            "fraction": result.split.fraction,
            "seed": result.split.seed,
            "n_calib": len(result.split.calib_ids),
            "n_val": len(result.split.val_ids),
        },
        "n_cells": len(result.trace),
        "n_skipped": len(result.skipped),
        "trace_file": trace_file,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
