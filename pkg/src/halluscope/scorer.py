"""Confidence scoring: spatial pooling, feature norms, safe-bank construction,
exact k-nearest-neighbor distances, alternative distance measures, and score
fusion.

Distance arithmetic is pinned so results never depend on batching or BLAS
kernel choice: unit vectors are normalized in float64 and stored as float32;
every reported distance is sqrt(((b - u) ** 2).sum()) evaluated in float64 on
those float32 values. A matmul pass is only ever used to *select* candidate
neighbors (with a conservative error margin), never to produce distance
values, so batched scoring is bit-identical to a per-sample brute-force scan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorstore
from .errors import EmptyBankError, InternalError, ValidationError
from .tensorstore import QualityTable, layer_tag

#: Margin added to squared matmul distances when selecting rescore candidates.
#: The prefilter runs in float32: for unit rows at C <= 4096 the dot-product
#: error bound on the squared-distance scale is ~3e-5 (measured ~4e-7), so
#: 1e-3 is a conservative cover. A loose margin only enlarges the candidate
#: set; correctness never depends on it being tight.
_CANDIDATE_MARGIN = 1e-3

#: Bank sizes at or below this skip the matmul prefilter entirely.
_SMALL_BANK = 512

GMM_MAX_ITER = 200
GMM_REL_TOL = 1e-6
GMM_VAR_FLOOR = 1e-6

VARIANT_KINDS = ("knn", "otb", "residual", "gmm")
FUSION_MODES = ("product", "linear")


# ---------------------------------------------------------------------------
# Pooling and norms
# ---------------------------------------------------------------------------

@dataclass
class PooledFeature:
    z: np.ndarray  # (C,) float64
    fn: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)


def pool(feature_map: np.ndarray) -> PooledFeature:
    """Spatial mean over a C x H x W activation map."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValidationError("feature map must be C x H x W")
    if not np.all(np.isfinite(fmap)):
        raise ValidationError("non-finite activation values")
    c, h, w = fmap.shape
    # Accumulate spatial positions in row-major order (axis-0 reduce is
    # sequential), so the result matches a position-by-position scan
    # bit-for-bit.
    flat = np.ascontiguousarray(fmap.reshape(c, h * w).T)
    z = np.add.reduce(flat, axis=0) / (h * w)
    return PooledFeature(z=z, fn=float(np.linalg.norm(z)))


def feature_norm(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(np.linalg.norm(z))


def unit_rows(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize rows in float64, store as float32. Returns (units, norms)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(
            f"zero-norm feature at row {int(zero[0])}: direction undefined"
        )
    units = (x / norms[:, None]).astype(np.float32)
    return units, norms


# ---------------------------------------------------------------------------
# Exact nearest-neighbor distances
# ---------------------------------------------------------------------------

def _exact_row_distances(u64: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Canonical distance formula; bit-identical to a per-row np.sum scan.

    ``u64`` must be float64; ``rows`` may be float32 (upcast to float64 is
    exact) or float64.
    """
    diff = rows - u64
    return np.sqrt((diff * diff).sum(axis=1))


def neighbor_distances(queries_unit: np.ndarray, bank_unit: np.ndarray,
                       kmax: int) -> np.ndarray:
    """Sorted exact distances to the kmax nearest bank rows for every query.

    Queries and bank must be float32 unit rows. Returns (n, kmax) float64.
    Large banks use a float32 matmul to shortlist candidates, then rescore
    them in float64 with the canonical formula, so values match a brute-force
    scan bit-for-bit.
    """
    q = np.asarray(queries_unit, dtype=np.float32)
    b = np.asarray(bank_unit, dtype=np.float32)
    if q.ndim == 1:
        q = q[None, :]
    m = b.shape[0]
    if not 1 <= kmax <= m:
        raise ValidationError(f"k={kmax} out of range for bank size {m}")
    n = q.shape[0]
    out = np.empty((n, kmax), dtype=np.float64)

    if m <= _SMALL_BANK:
        q64 = q.astype(np.float64)
        b64 = b.astype(np.float64)
        for i in range(n):
            d = _exact_row_distances(q64[i], b64)
            out[i] = np.sort(d)[:kmax]
        return out

    # Prefilter: approximate squared distances from one float32 matmul.
    qq = (q * q).sum(axis=1)
    bb = (b * b).sum(axis=1)
    d2 = np.float32(-2.0) * (q @ b.T)
    d2 += qq[:, None]
    d2 += bb[None, :]
    kth = np.partition(d2, kmax - 1, axis=1)[:, kmax - 1].astype(np.float64)
    q64 = q.astype(np.float64)
    for i in range(n):
        cand = np.flatnonzero(d2[i] <= kth[i] + _CANDIDATE_MARGIN)
        # float32 rows upcast exactly, so the arithmetic matches a full
        # float64 scan bit-for-bit.
        exact = _exact_row_distances(q64[i], b[cand])
        if exact.size < kmax:  # pragma: no cover - guarded by margin proof
            raise InternalError("candidate shortlist smaller than k")
        out[i] = np.sort(exact)[:kmax]
    return out


# ---------------------------------------------------------------------------
# Safe bank
# ---------------------------------------------------------------------------

@dataclass
class SafeBank:
    layer: str
    q: float
    unit_vectors: np.ndarray        # (m, C) float32, rows unit-norm
    source_ids: list[str]
    raw_norms: np.ndarray           # (m,) float64
    per_metric_thresholds: dict[str, float]

    @property
    def size(self) -> int:
        return self.unit_vectors.shape[0]


def build_safe_bank(features: np.ndarray, sample_ids: list[str],
                    quality: QualityTable, q: float, layer="1.00") -> SafeBank:
    """Keep, per metric, the top ceil((1-q)*n) samples (ties broken by
    ascending sample ID) and intersect across metrics; rows unit-normalized."""
    if not 0.0 <= q < 1.0:
        raise ValidationError(f"truncation intensity q={q} outside [0, 1)")
    features = np.asarray(features, dtype=np.float32)
    n = features.shape[0]
    if n == 0:
        raise ValidationError("empty calibration set")
    if len(sample_ids) != n:
        raise ValidationError("sample_ids / feature row count mismatch")
    table = quality.subset(sample_ids)

    keep_count = math.ceil((1.0 - q) * n)
    ids_arr = np.asarray(sample_ids)
    kept = np.ones(n, dtype=bool)
    thresholds = {}
    for name in table.metric_names:
        col = table.metrics[name]
        order = np.lexsort((ids_arr, -col))  # metric desc, ID asc on ties
        top = order[:keep_count]
        mask = np.zeros(n, dtype=bool)
        mask[top] = True
        kept &= mask
        thresholds[name] = float(col[top].min())
    idx = np.flatnonzero(kept)
    if idx.size == 0:
        raise EmptyBankError(f"bank empty at q={q}: metric top sets are disjoint")

    units, norms = unit_rows(features[idx])
    return SafeBank(
        layer=layer_tag(layer),
        q=float(q),
        unit_vectors=units,
        source_ids=[sample_ids[i] for i in idx],
        raw_norms=norms,
        per_metric_thresholds=thresholds,
    )


def knn_score(z, bank: SafeBank, k: int) -> float:
    """Negative distance to the k-th nearest bank row (exact search)."""
    units, _ = unit_rows(np.asarray(z, dtype=np.float64))
    r = neighbor_distances(units, bank.unit_vectors, k)[0, k - 1]
    return float(-r)


# ---------------------------------------------------------------------------
# Variant distance measures
# ---------------------------------------------------------------------------

@dataclass
class Standardization:
    mean: float = 0.0
    std: float = 1.0
    shift: float = 0.0

    def apply(self, scores: np.ndarray) -> np.ndarray:
        return (scores - self.mean) / self.std + self.shift


@dataclass
class VariantModel:
    kind: str
    params: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    standardization: Standardization = field(default_factory=Standardization)
    loglik_path: list[float] = field(default_factory=list)


def _fit_otb(units64: np.ndarray, p: float) -> dict[str, np.ndarray]:
    if not 0.0 < p <= 1.0:
        raise ValidationError(f"box quantile p={p} outside (0, 1]")
    lo = (1.0 - p) / 2.0
    lower = np.quantile(units64, lo, axis=0)
    upper = np.quantile(units64, 1.0 - lo, axis=0)
    return {"lower": lower, "upper": upper}


def _fit_residual(units64: np.ndarray, r: float) -> dict[str, np.ndarray]:
    if not 0.0 < r <= 1.0:
        raise ValidationError(f"variance ratio r={r} outside (0, 1]")
    mean = units64.mean(axis=0)
    centered = units64 - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    var = svals * svals
    total = var.sum()
    if total == 0.0:
        dim = 1
    else:
        ratio = np.cumsum(var) / total
        dim = int(np.searchsorted(ratio, r - 1e-12) + 1)
        dim = min(dim, vt.shape[0])
    return {"mean": mean, "basis": vt[:dim].T.copy()}  # (C, dim) orthonormal


def _kmeans_pp(units64: np.ndarray, c_k: int, rng: np.random.Generator):
    m = units64.shape[0]
    centers = [units64[rng.integers(m)]]
    d2 = ((units64 - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, c_k):
        total = d2.sum()
        if total == 0.0:
            centers.append(units64[rng.integers(m)])
            continue
        probs = d2 / total
        centers.append(units64[rng.choice(m, p=probs)])
        d2 = np.minimum(d2, ((units64 - centers[-1]) ** 2).sum(axis=1))
    return np.stack(centers)


def _gmm_log_density(x: np.ndarray, weights, means, variances) -> np.ndarray:
    """Per-sample log-likelihood under a diagonal-covariance mixture."""
    # (n, c) component log densities
    log_comp = (
        -0.5 * (np.log(2.0 * np.pi * variances).sum(axis=1))[None, :]
        - 0.5 * (((x[:, None, :] - means[None, :, :]) ** 2)
                 / variances[None, :, :]).sum(axis=2)
    )
    log_comp = log_comp + np.log(weights)[None, :]
    peak = log_comp.max(axis=1, keepdims=True)
    return (peak[:, 0] + np.log(np.exp(log_comp - peak).sum(axis=1)))


def _fit_gmm(units64: np.ndarray, c_k: int, seed: int):
    m, c = units64.shape
    if c_k < 1:
        raise ValidationError("cluster count must be >= 1")
    if m < c_k:
        raise ValidationError(f"bank size {m} smaller than cluster count {c_k}")
    rng = np.random.default_rng(seed)
    means = _kmeans_pp(units64, c_k, rng)
    variances = np.tile(
        np.maximum(units64.var(axis=0), GMM_VAR_FLOOR), (c_k, 1)
    )
    weights = np.full(c_k, 1.0 / c_k)

    path = []
    prev = -np.inf
    for _ in range(GMM_MAX_ITER):
        # E step
        log_comp = (
            -0.5 * (np.log(2.0 * np.pi * variances).sum(axis=1))[None, :]
            - 0.5 * (((units64[:, None, :] - means[None, :, :]) ** 2)
                     / variances[None, :, :]).sum(axis=2)
            + np.log(weights)[None, :]
        )
        peak = log_comp.max(axis=1, keepdims=True)
        log_norm = peak + np.log(np.exp(log_comp - peak).sum(axis=1, keepdims=True))
        ll = float(log_norm.sum())
        path.append(ll)
        resp = np.exp(log_comp - log_norm)
        # M step
        counts = resp.sum(axis=0) + 1e-300
        weights = counts / counts.sum()
        means = (resp.T @ units64) / counts[:, None]
        sq = resp.T @ (units64 * units64)
        variances = np.maximum(
            sq / counts[:, None] - means * means, GMM_VAR_FLOOR
        )
        if np.isfinite(prev) and abs(ll - prev) <= GMM_REL_TOL * abs(ll):
            break
        prev = ll
    return {"weights": weights, "means": means, "variances": variances}, path


def fit_variant(bank: SafeBank, kind: str, params: dict,
                calib_features: np.ndarray | None = None,
                seed: int = 0) -> VariantModel:
    """Fit a distance measure on the bank. Standardization statistics come
    from `calib_features` (raw feature rows; defaults to the bank members) so
    that variant scores are strictly negative before product fusion."""
    if kind not in VARIANT_KINDS:
        raise ValidationError(f"unknown variant kind '{kind}'")
    units64 = bank.unit_vectors.astype(np.float64)
    model = VariantModel(kind=kind, params=dict(params))
    if kind == "knn":
        k = int(params["k"])
        if not 1 <= k <= bank.size:
            raise ValidationError(f"k={k} out of range for bank size {bank.size}")
        return model
    if kind == "otb":
        model.arrays = _fit_otb(units64, float(params["p"]))
    elif kind == "residual":
        model.arrays = _fit_residual(units64, float(params["r"]))
    elif kind == "gmm":
        model.arrays, model.loglik_path = _fit_gmm(
            units64, int(params["c_k"]), seed
        )

    if calib_features is not None:
        calib_units, _ = unit_rows(np.asarray(calib_features, dtype=np.float64))
        calib64 = calib_units.astype(np.float64)
    else:
        calib64 = units64
    raw = _variant_raw(calib64, model)
    mean = float(raw.mean())
    std = float(raw.std())
    if std == 0.0:
        std = 1.0
    standardized = (raw - mean) / std
    shift = -(float(standardized.max()) + 1.0)
    model.standardization = Standardization(mean=mean, std=std, shift=shift)
    return model


def _variant_raw(units64: np.ndarray, model: VariantModel) -> np.ndarray:
    """Raw (pre-standardization) variant scores; higher = safer."""
    a = model.arrays
    if model.kind == "otb":
        inside = (units64 >= a["lower"]) & (units64 <= a["upper"])
        return inside.mean(axis=1)
    if model.kind == "residual":
        centered = units64 - a["mean"]
        basis = a["basis"]
        # Row-by-row so batch scores match single-sample scores bit-for-bit
        # (a batched matmul would round differently than a per-row matvec).
        out = np.empty(centered.shape[0], dtype=np.float64)
        for i, row in enumerate(centered):
            proj = row @ basis
            resid = row - basis @ proj
            out[i] = -np.abs(resid).sum()
        return out
    if model.kind == "gmm":
        return _gmm_log_density(units64, a["weights"], a["means"], a["variances"])
    raise InternalError(f"no raw score for kind '{model.kind}'")


def variant_score(z, model: VariantModel, bank: SafeBank | None = None) -> float:
    """Standardized variant score for one raw feature vector (KNN variants
    need the bank)."""
    units, _ = unit_rows(np.asarray(z, dtype=np.float64))
    if model.kind == "knn":
        if bank is None:
            raise ValidationError("knn variant needs the safe bank")
        k = int(model.params["k"])
        return float(-neighbor_distances(units, bank.unit_vectors, k)[0, k - 1])
    raw = _variant_raw(units.astype(np.float64), model)
    return float(model.standardization.apply(raw)[0])


# ---------------------------------------------------------------------------
# Fusion and monitors
# ---------------------------------------------------------------------------

def fuse(distance_score: float, fn: float, gamma: float, mode: str) -> float:
    """Merge the distance score with the feature norm."""
    if mode not in FUSION_MODES:
        raise ValidationError(f"unknown fusion mode '{mode}'")
    if mode == "linear":
        return distance_score + gamma * fn
    if gamma == 0.0:
        return distance_score
    if fn == 0.0 and gamma < 0.0:
        raise ValidationError("singular feature norm: fn=0 with negative gamma")
    return distance_score * fn ** gamma


@dataclass
class MonitorConfig:
    layer: str
    q: float
    variant: str
    variant_params: dict
    gamma: float
    fusion: str = "product"
    metrics: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.layer = layer_tag(self.layer)
        if self.variant not in VARIANT_KINDS:
            raise ValidationError(f"unknown variant kind '{self.variant}'")
        if self.fusion not in FUSION_MODES:
            raise ValidationError(f"unknown fusion mode '{self.fusion}'")
        if not 0.0 <= self.q < 1.0:
            raise ValidationError(f"q={self.q} outside [0, 1)")


@dataclass
class Monitor:
    config: MonitorConfig
    bank: SafeBank
    model: VariantModel

    def score_features(self, features: np.ndarray) -> np.ndarray:
        """Confidence for raw (unpooled norms intact) feature rows, order
        preserving."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[None, :]
        units, fn = unit_rows(features)
        cfg = self.config
        if self.model.kind == "knn":
            k = int(self.model.params["k"])
            r = neighbor_distances(units, self.bank.unit_vectors, k)[:, k - 1]
            distance = -r
        else:
            raw = _variant_raw(units.astype(np.float64), self.model)
            distance = self.model.standardization.apply(raw)
        if cfg.fusion == "linear":
            return distance + cfg.gamma * fn
        if cfg.gamma == 0.0:
            return distance.copy()
        if cfg.gamma < 0.0 and np.any(fn == 0.0):
            raise ValidationError("singular feature norm: fn=0 with negative gamma")
        return distance * fn ** cfg.gamma


def score_batch(dataset, monitor: Monitor) -> tuple[list[str], np.ndarray]:
    """Score every sample of a loaded dataset at the monitor's layer."""
    features = dataset.features(monitor.config.layer)
    try:
        conf = monitor.score_features(features)
    except ValidationError as exc:
        raise ValidationError(f"{exc} (dataset {dataset.manifest.dataset_id})")
    return list(dataset.sample_ids), conf


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_monitor(monitor: Monitor, out_dir, bank_filename="bank.ftb") -> Path:
    """Persist a fitted monitor: monitor.json plus the bank matrix as FTB."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensorstore.write_array(out_dir / bank_filename, monitor.bank.unit_vectors)
    doc = {
        "schema_version": 1,
        "config": {
            "layer": monitor.config.layer,
            "q": monitor.config.q,
            "variant": monitor.config.variant,
            "variant_params": monitor.config.variant_params,
            "gamma": monitor.config.gamma,
            "fusion": monitor.config.fusion,
            "metrics": monitor.config.metrics,
        },
        "bank": {
            "file": bank_filename,
            "source_ids": monitor.bank.source_ids,
            "raw_norms": [float(v) for v in monitor.bank.raw_norms],
            "per_metric_thresholds": monitor.bank.per_metric_thresholds,
        },
        "standardization": {
            "mean": monitor.model.standardization.mean,
            "std": monitor.model.standardization.std,
            "shift": monitor.model.standardization.shift,
        },
        "variant_arrays": {
            k: v.tolist() for k, v in monitor.model.arrays.items()
        },
    }
    path = out_dir / "monitor.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def load_monitor(path) -> Monitor:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("schema_version") != 1:
        raise ValidationError(f"{path}: unsupported monitor schema")
    cfg = doc["config"]
    config = MonitorConfig(
        layer=cfg["layer"], q=cfg["q"], variant=cfg["variant"],
        variant_params=cfg["variant_params"], gamma=cfg["gamma"],
        fusion=cfg["fusion"], metrics=list(cfg.get("metrics", [])),
    )
    bdoc = doc["bank"]
    units = tensorstore.read_array(path.parent / bdoc["file"])
    bank = SafeBank(
        layer=config.layer, q=config.q, unit_vectors=units,
        source_ids=list(bdoc["source_ids"]),
        raw_norms=np.asarray(bdoc["raw_norms"], dtype=np.float64),
        per_metric_thresholds={k: float(v) for k, v
                               in bdoc["per_metric_thresholds"].items()},
    )
    sdoc = doc["standardization"]
    model = VariantModel(
        kind=config.variant,
        params=dict(config.variant_params),
        arrays={k: np.asarray(v, dtype=np.float64)
                for k, v in doc.get("variant_arrays", {}).items()},
        standardization=Standardization(
            mean=sdoc["mean"], std=sdoc["std"], shift=sdoc["shift"]
        ),
    )
    return Monitor(config=config, bank=bank, model=model)
