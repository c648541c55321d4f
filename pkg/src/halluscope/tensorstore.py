"""On-disk data model: FTB v1 tensor containers, dataset manifests, quality
tables, and deterministic dataset splitting.

FTB v1 layout:
  bytes 0-3   magic b"FTB1"
  byte  4     dtype code (1 = float32)
  byte  5     rank
  bytes 6..   rank * 8-byte little-endian unsigned dims
  payload     row-major little-endian values

Sample IDs never live inside a dump; the manifest owns them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, FormatError, ValidationError

MAGIC = b"FTB1"
DTYPE_F32 = 1

MANIFEST_VERSION = 1

# Depth-ratio tags recognized in manifests, canonical formatting.
KNOWN_LAYERS = ("0.00", "0.25", "0.50", "0.75", "1.00")

#: Similarity-type metrics bounded above by 1. PSNR (in dB) is unbounded and
#: deliberately not listed here.
BOUNDED_METRICS = ("ms_ssim", "one_minus_lpips")


def layer_tag(layer) -> str:
    """Canonical two-decimal tag for a depth ratio (accepts float or str)."""
    return f"{float(layer):.2f}"


# ---------------------------------------------------------------------------
# FTB v1 container
# ---------------------------------------------------------------------------

def write_array(path, array: np.ndarray) -> None:
    """Write an array as an FTB v1 file. Bytes are deterministic per input."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.size == 0:
        raise ValidationError("refusing to write empty tensor")
    header = MAGIC + bytes([DTYPE_F32, arr.ndim])
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    """Read an FTB v1 file back into a float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 6:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    if raw[4] != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {raw[4]}", offset=4)
    rank = raw[5]
    if rank < 1 or rank > 8:
        raise FormatError(f"{path}: unsupported rank {rank}", offset=5)
    dims_end = 6 + 8 * rank
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated dims", offset=len(raw))
    shape = tuple(
        struct.unpack_from("<Q", raw, 6 + 8 * i)[0] for i in range(rank)
    )
    count = int(np.prod(shape, dtype=np.int64))
    expected = dims_end + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length {len(raw) - dims_end} does not match "
            f"shape {shape} ({4 * count} bytes expected)",
            offset=min(len(raw), expected),
        )
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=dims_end)
    return data.reshape(shape).copy()


# ---------------------------------------------------------------------------
# Feature dumps
# ---------------------------------------------------------------------------

@dataclass
class FeatureDump:
    """Per-layer matrix of pooled generator features, one row per sample."""

    layer: str
    sample_ids: list[str]
    data: np.ndarray  # (n, C) float32

    def __post_init__(self):
        self.layer = layer_tag(self.layer)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValidationError("feature dump must be a 2-D matrix")
        if len(self.sample_ids) != self.data.shape[0]:
            raise ValidationError(
                f"{len(self.sample_ids)} sample IDs for {self.data.shape[0]} rows"
            )
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValidationError("duplicate sample IDs in dump")
        if self.data.shape[1] < 1:
            raise ValidationError("feature dump needs at least one channel")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("non-finite values in feature dump")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def write_dump(dump: FeatureDump, path) -> None:
    if dump.n == 0:
        raise ValidationError("empty dump")
    write_array(path, dump.data)


def read_dump(path, sample_ids: list[str], layer) -> FeatureDump:
    """Load a dump; IDs and layer tag come from the manifest, not the file."""
    data = read_array(path)
    if data.ndim != 2:
        raise FormatError(f"{path}: expected rank 2, got rank {data.ndim}")
    return FeatureDump(layer=layer, sample_ids=list(sample_ids), data=data)


# ---------------------------------------------------------------------------
# Quality tables
# ---------------------------------------------------------------------------

@dataclass
class QualityTable:
    """Per-sample metric scores, oriented so higher is always safer."""

    sample_ids: list[str]
    metrics: dict[str, np.ndarray]  # name -> (n,) float64

    def __post_init__(self):
        n = len(self.sample_ids)
        if len(set(self.sample_ids)) != n:
            raise ValidationError("duplicate sample IDs in quality table")
        clean = {}
        for name, col in self.metrics.items():
            col = np.asarray(col, dtype=np.float64)
            if col.shape != (n,):
                raise ValidationError(f"metric '{name}' has wrong length")
            if np.any(np.isnan(col)):
                raise ValidationError(f"NaN in metric '{name}'")
            if name in BOUNDED_METRICS and np.any(col[np.isfinite(col)] > 1.0):
                raise ValidationError(f"metric '{name}' exceeds 1")
            clean[name] = col
        self.metrics = clean

    @property
    def metric_names(self) -> list[str]:
        return list(self.metrics)

    def subset(self, ids: list[str]) -> "QualityTable":
        index = {s: i for i, s in enumerate(self.sample_ids)}
        missing = [s for s in ids if s not in index]
        if missing:
            raise AlignmentError(f"quality table lacks sample '{missing[0]}'")
        rows = np.array([index[s] for s in ids], dtype=np.intp)
        return QualityTable(
            sample_ids=list(ids),
            metrics={k: v[rows] for k, v in self.metrics.items()},
        )

    def column_matrix(self, metric_names=None) -> np.ndarray:
        names = metric_names or self.metric_names
        return np.column_stack([self.metrics[m] for m in names])


def _fmt(x: float) -> str:
    """Shortest round-trip decimal; infinities serialize as 'inf'/'-inf'."""
    x = float(x)
    if x == float("inf"):
        return "inf"
    if x == float("-inf"):
        return "-inf"
    return repr(x)


def write_quality_csv(table: QualityTable, path) -> None:
    names = table.metric_names
    lines = ["sample_id," + ",".join(names)]
    for i, sid in enumerate(table.sample_ids):
        lines.append(sid + "," + ",".join(_fmt(table.metrics[m][i]) for m in names))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_quality_csv(path) -> QualityTable:
    """Parse a quality CSV. An 'lpips' column is flipped to one_minus_lpips so
    every stored metric is higher-is-better."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty quality table")
    header = lines[0].split(",")
    if header[0] != "sample_id" or len(header) < 2:
        raise FormatError(f"{path}: bad header {lines[0]!r}")
    names = header[1:]
    ids, cols = [], [[] for _ in names]
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields")
        ids.append(parts[0])
        for j, tok in enumerate(parts[1:]):
            try:
                cols[j].append(float(tok))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad number {tok!r}") from exc
    metrics = {}
    for name, col in zip(names, cols):
        arr = np.asarray(col, dtype=np.float64)
        if name == "lpips":
            metrics["one_minus_lpips"] = 1.0 - arr
        else:
            metrics[name] = arr
    return QualityTable(sample_ids=ids, metrics=metrics)


# ---------------------------------------------------------------------------
# Manifests and datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    version: int
    dataset_id: str
    layer_files: dict[str, str]  # layer tag -> path (relative to manifest dir)
    quality_file: str
    sample_ids: list[str]
    seed: int | None = None
    strata: dict[str, str] | None = None  # sample id -> stratum key

    def layers(self) -> list[str]:
        return sorted(self.layer_files)


def write_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "version": manifest.version,
        "dataset_id": manifest.dataset_id,
        "layer_files": manifest.layer_files,
        "quality_file": manifest.quality_file,
        "sample_ids": manifest.sample_ids,
        "seed": manifest.seed,
    }
    if manifest.strata is not None:
        doc["strata"] = manifest.strata
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def read_manifest(path) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise ValidationError(f"{path}: unsupported manifest version {version!r}")
    for key in ("dataset_id", "layer_files", "quality_file", "sample_ids"):
        if key not in doc:
            raise ValidationError(f"{path}: missing manifest field '{key}'")
    layer_files = {layer_tag(k): v for k, v in doc["layer_files"].items()}
    for tag in layer_files:
        if tag not in KNOWN_LAYERS:
            raise ValidationError(f"{path}: unknown depth ratio '{tag}'")
    return DatasetManifest(
        version=version,
        dataset_id=doc["dataset_id"],
        layer_files=layer_files,
        quality_file=doc["quality_file"],
        sample_ids=list(doc["sample_ids"]),
        seed=doc.get("seed"),
        strata=doc.get("strata"),
    )


@dataclass
class Dataset:
    """A manifest with all referenced dumps and quality rows loaded and
    aligned to the manifest's sample ordering."""

    manifest: DatasetManifest
    dumps: dict[str, FeatureDump] = field(default_factory=dict)
    quality: QualityTable | None = None

    @property
    def sample_ids(self) -> list[str]:
        return self.manifest.sample_ids

    @property
    def n(self) -> int:
        return len(self.manifest.sample_ids)

    def layers(self) -> list[str]:
        return sorted(self.dumps)

    def features(self, layer) -> np.ndarray:
        tag = layer_tag(layer)
        if tag not in self.dumps:
            raise ValidationError(f"dataset has no layer {tag}")
        return self.dumps[tag].data

    def subset(self, ids: list[str]) -> "Dataset":
        index = {s: i for i, s in enumerate(self.sample_ids)}
        rows = np.array([index[s] for s in ids], dtype=np.intp)
        dumps = {
            tag: FeatureDump(tag, list(ids), d.data[rows])
            for tag, d in self.dumps.items()
        }
        manifest = DatasetManifest(
            version=self.manifest.version,
            dataset_id=self.manifest.dataset_id,
            layer_files=dict(self.manifest.layer_files),
            quality_file=self.manifest.quality_file,
            sample_ids=list(ids),
            seed=self.manifest.seed,
        )
        return Dataset(manifest, dumps, self.quality.subset(ids))


def load_manifest(path) -> Dataset:
    """Load a manifest and every file it references, checking alignment."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    manifest = read_manifest(path)
    base = path.parent
    ids = manifest.sample_ids
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate sample IDs in manifest")

    dumps = {}
    for tag, rel in manifest.layer_files.items():
        fpath = base / rel
        if not fpath.exists():
            raise ValidationError(f"{path}: missing layer file {fpath}")
        dumps[tag] = read_dump(fpath, ids, tag)

    qpath = base / manifest.quality_file
    if not qpath.exists():
        raise ValidationError(f"{path}: missing quality file {qpath}")
    quality = read_quality_csv(qpath)
    qset = set(quality.sample_ids)
    for sid in ids:
        if sid not in qset:
            raise AlignmentError(f"quality table lacks sample '{sid}'")
    quality = quality.subset(ids)
    return Dataset(manifest=manifest, dumps=dumps, quality=quality)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitAssignment:
    calib_ids: list[str]
    val_ids: list[str]
    fraction: float
    seed: int


def split(ids_or_manifest, fraction: float, seed: int) -> SplitAssignment:
    """Deterministic uniform split; |val| = round(fraction * n).

    With a 'strata' map on the manifest the split is stratified: each stratum
    contributes round(fraction * |stratum|) validation samples.
    """
    strata = None
    if isinstance(ids_or_manifest, DatasetManifest):
        ids = list(ids_or_manifest.sample_ids)
        strata = ids_or_manifest.strata
    elif isinstance(ids_or_manifest, Dataset):
        ids = list(ids_or_manifest.sample_ids)
        strata = ids_or_manifest.manifest.strata
    else:
        ids = list(ids_or_manifest)
    n = len(ids)
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must be in (0, 1), got {fraction}")
    if n < 2:
        raise ValidationError("need at least two samples to split")

    rng = np.random.default_rng(seed)
    if strata:
        groups: dict[str, list[str]] = {}
        for sid in ids:
            groups.setdefault(strata.get(sid, ""), []).append(sid)
        val: list[str] = []
        for key in sorted(groups):
            members = groups[key]
            m = int(round(fraction * len(members)))
            perm = rng.permutation(len(members))
            val.extend(members[i] for i in perm[:m])
        val_set = set(val)
        calib = [s for s in ids if s not in val_set]
        val = [s for s in ids if s in val_set]
    else:
        n_val = int(round(fraction * n))
        perm = rng.permutation(n)
        chosen = set(perm[:n_val].tolist())
        val = [ids[i] for i in range(n) if i in chosen]
        calib = [ids[i] for i in range(n) if i not in chosen]
    if not val or not calib:
        raise ValidationError(
            f"fraction {fraction} leaves an empty side for n={n}"
        )
    return SplitAssignment(calib_ids=calib, val_ids=val, fraction=fraction, seed=seed)
