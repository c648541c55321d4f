"""Tensor-space corruption transforms for stress evaluation and the
synthetic planted-signal fixture generator used by property tests.

All generators are pure functions of their spec (including the seed); batch
corruption derives one RNG per sample from seed XOR sample index so that
parallel evaluation can never change output bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensorstore
from .errors import ValidationError
from .tensorstore import (DatasetManifest, MANIFEST_VERSION, QualityTable,
                          write_manifest, write_quality_csv)

CORRUPTION_KINDS = (
    "gaussian_noise", "contrast_jitter", "gaussian_blur",
    "pixel_dropout", "saturation_boxes", "channel_misregistration",
)

# Documented test defaults, not claims about any particular instrument.
DEFAULT_MAGNITUDES = {
    "gaussian_noise": {"sigma": 0.05},
    "contrast_jitter": {"low": 0.7, "high": 1.3},
    "gaussian_blur": {"sigma": 1.5},
    "pixel_dropout": {"rate": 0.1},
    "saturation_boxes": {"count": 4, "size": 16},
    "channel_misregistration": {"offset": 3},
}


@dataclass
class CorruptionSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValidationError(f"unknown corruption kind '{self.kind}'")
        merged = dict(DEFAULT_MAGNITUDES[self.kind])
        merged.update(self.params)
        self.params = merged
        p = self.params
        if self.kind == "gaussian_noise" and p["sigma"] < 0:
            raise ValidationError("noise sigma must be >= 0")
        if self.kind == "contrast_jitter" and not 0 < p["low"] <= p["high"]:
            raise ValidationError("contrast range must satisfy 0 < low <= high")
        if self.kind == "gaussian_blur" and p["sigma"] < 0:
            raise ValidationError("blur sigma must be >= 0")
        if self.kind == "pixel_dropout" and not 0.0 <= p["rate"] <= 1.0:
            raise ValidationError("dropout rate must be in [0, 1]")
        if self.kind == "saturation_boxes" and (p["count"] < 0 or p["size"] < 1):
            raise ValidationError("box count must be >= 0 and size >= 1")
        if self.kind == "channel_misregistration" and p["offset"] < 0:
            raise ValidationError("misregistration offset must be >= 0")

    def is_identity(self) -> bool:
        p = self.params
        return (
            (self.kind == "gaussian_noise" and p["sigma"] == 0)
            or (self.kind == "contrast_jitter" and p["low"] == p["high"] == 1.0)
            or (self.kind == "gaussian_blur" and p["sigma"] == 0)
            or (self.kind == "pixel_dropout" and p["rate"] == 0)
            or (self.kind == "saturation_boxes" and p["count"] == 0)
            or (self.kind == "channel_misregistration" and p["offset"] == 0)
        )


def _corrupt_one(img: np.ndarray, spec: CorruptionSpec, peak: float,
                 rng: np.random.Generator) -> np.ndarray:
    p = spec.params
    c, h, w = img.shape
    if spec.kind == "gaussian_noise":
        return img + rng.normal(0.0, p["sigma"], size=img.shape)
    if spec.kind == "contrast_jitter":
        factor = rng.uniform(p["low"], p["high"])
        mean = img.mean()
        return (img - mean) * factor + mean
    if spec.kind == "gaussian_blur":
        return np.stack([gaussian_filter(img[i], p["sigma"]) for i in range(c)])
    if spec.kind == "pixel_dropout":
        mask = rng.random((h, w)) >= p["rate"]
        return img * mask[None, :, :]
    if spec.kind == "saturation_boxes":
        out = img.copy()
        size = int(p["size"])
        for _ in range(int(p["count"])):
            top = int(rng.integers(0, max(1, h - size + 1)))
            left = int(rng.integers(0, max(1, w - size + 1)))
            out[:, top:top + size, left:left + size] = peak
        return out
    if spec.kind == "channel_misregistration":
        out = img.copy()
        off = int(p["offset"])
        for i in range(1, c):
            sign = 1 if i % 2 else -1
            out[i] = np.roll(np.roll(img[i], sign * off, axis=0),
                             sign * off, axis=1)
        return out
    raise ValidationError(f"unknown corruption kind '{spec.kind}'")


def corrupt(images: np.ndarray, spec: CorruptionSpec,
            peak: float = 1.0) -> np.ndarray:
    """Apply one corruption to an (n, C, H, W) batch; deterministic from the
    spec seed, output clamped to [0, peak]. Zero magnitude is the bit-exact
    identity."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValidationError("image batch must be (n, C, H, W)")
    if spec.is_identity():
        return images.copy()
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        rng = np.random.default_rng(spec.seed ^ i)
        img = _corrupt_one(images[i].astype(np.float64), spec, peak, rng)
        out[i] = np.clip(img, 0.0, peak).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# Synthetic planted-signal fixture
# ---------------------------------------------------------------------------

SYNTH_METRICS = ("psnr", "ms_ssim", "one_minus_lpips")


@dataclass
class SyntheticSpec:
    """Planted-rule fixture: layer 1.00 features cluster around random
    directions and every quality metric is a shared monotone decreasing
    function of the distance to the nearest center (plus per-metric noise);
    layer 0.00 is pure noise."""

    n_calib: int = 1200
    n_test: int = 400
    channels: int = 24
    n_centers: int = 3
    noise_scale: float = 0.0       # per-metric additive quality noise
    steepness: float = 3.0         # quality link: exp(-steepness * distance)
    fn_signal: bool = False        # encode quality into feature norms
    contamination: float = 0.0     # fraction of calib features pushed far out
    feature_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_calib < 2 * self.n_centers or self.n_test < 2:
            raise ValidationError("fixture too small for the center count")
        if self.channels < 2 or self.n_centers < 1:
            raise ValidationError("need channels >= 2 and at least one center")
        if not 0.0 <= self.contamination < 1.0:
            raise ValidationError("contamination must be in [0, 1)")
        if self.noise_scale < 0 or self.feature_sigma <= 0 or self.steepness <= 0:
            raise ValidationError("scales must be positive")


def _orthonormal_centers(c: int, k: int, rng) -> np.ndarray:
    raw = rng.standard_normal((c, max(k, 1)))
    qmat, _ = np.linalg.qr(raw)
    return qmat.T[:k]


def _draw_block(spec: SyntheticSpec, centers: np.ndarray, n: int,
                prefix: str, rng: np.random.Generator, contaminate: bool):
    ids = [f"{prefix}{i:05d}" for i in range(n)]
    assign = rng.integers(0, spec.n_centers, size=n)
    eps = rng.standard_normal((n, spec.channels)) * spec.feature_sigma
    if contaminate and spec.contamination > 0:
        n_bad = int(round(spec.contamination * n))
        bad = rng.permutation(n)[:n_bad]
        eps[bad] += rng.standard_normal((n_bad, spec.channels)) * 1.5
    x = centers[assign] + eps
    units = x / np.linalg.norm(x, axis=1, keepdims=True)
    dist = np.min(
        np.linalg.norm(units[:, None, :] - centers[None, :, :], axis=2), axis=1
    )
    base = np.exp(-spec.steepness * dist)

    metrics = {}
    for name in SYNTH_METRICS:
        noise = rng.normal(0.0, spec.noise_scale, size=n) if spec.noise_scale else 0.0
        metrics[name] = np.clip(base + noise, 1e-9, 1.0)

    if spec.fn_signal:
        norms = np.exp(0.8 * (1.0 - base))
    else:
        norms = np.exp(rng.normal(0.0, 0.25, size=n))
    signal = units * norms[:, None]
    noise_layer = rng.standard_normal((n, spec.channels))
    return ids, signal.astype(np.float32), noise_layer.astype(np.float32), metrics


def _write_block(out_dir: Path, dataset_id: str, ids, signal, noise, metrics,
                 seed: int) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    tensorstore.write_array(out_dir / "layer_0.00.ftb", noise)
    tensorstore.write_array(out_dir / "layer_1.00.ftb", signal)
    table = QualityTable(sample_ids=list(ids), metrics=metrics)
    write_quality_csv(table, out_dir / "quality.csv")
    manifest = DatasetManifest(
        version=MANIFEST_VERSION, dataset_id=dataset_id,
        layer_files={"0.00": "layer_0.00.ftb", "1.00": "layer_1.00.ftb"},
        quality_file="quality.csv", sample_ids=list(ids), seed=seed,
    )
    path = out_dir / "manifest.json"
    write_manifest(manifest, path)
    return path


def gen_synthetic(spec: SyntheticSpec, out_dir) -> tuple[Path, Path]:
    """Write calib/ and test/ manifest trees; returns both manifest paths."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    centers = _orthonormal_centers(spec.channels, spec.n_centers, rng)

    calib = _draw_block(spec, centers, spec.n_calib, "c", rng, contaminate=True)
    test = _draw_block(spec, centers, spec.n_test, "t", rng, contaminate=False)
    calib_path = _write_block(out_dir / "calib", "synthetic-calib", *calib,
                              seed=spec.seed)
    test_path = _write_block(out_dir / "test", "synthetic-test", *test,
                             seed=spec.seed)
    return calib_path, test_path
