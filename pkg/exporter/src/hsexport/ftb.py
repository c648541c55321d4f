"""Writers for the toolkit's on-disk formats.

This is an independent implementation of the format contract, not a reuse of
the toolkit's code: FTB v1 binary tensors, manifest JSON, and the quality
CSV. Byte-level layout:

- FTB v1: bytes 0-3 magic ``FTB1``; byte 4 dtype code (1 = float32); byte 5
  rank; one 8-byte little-endian unsigned integer per dimension; then the
  payload, row-major little-endian.
- Manifest: UTF-8 JSON with sorted keys, fields ``version`` (1),
  ``dataset_id``, ``layer_files``, ``quality_file``, ``sample_ids``.
- Quality CSV: header ``sample_id,<metric>,...``, '.' decimal separator,
  shortest round-trip float formatting.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ExporterError

MAGIC = b"FTB1"
DTYPE_F32 = 1
MANIFEST_VERSION = 1


def write_ftb(path, array) -> None:
    """Write a float32 tensor as an FTB v1 file; bytes are deterministic."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.size == 0:
        raise ExporterError("refusing to write empty tensor")
    header = MAGIC + bytes([DTYPE_F32, arr.ndim])
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def write_manifest(path, dataset_id, layer_files, quality_file, sample_ids,
                   extra=None) -> None:
    """Write a dataset manifest. `extra` entries (e.g. capture-point
    provenance) are merged into the document under their own keys."""
    doc = {
        "version": MANIFEST_VERSION,
        "dataset_id": dataset_id,
        "layer_files": dict(layer_files),
        "quality_file": quality_file,
        "sample_ids": list(sample_ids),
    }
    if extra:
        for key in extra:
            if key in doc:
                raise ExporterError(f"extra manifest key '{key}' collides")
        doc.update(extra)
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _fmt(x: float) -> str:
    x = float(x)
    if x == float("inf"):
        return "inf"
    if x == float("-inf"):
        return "-inf"
    return repr(x)


def write_quality_csv(path, sample_ids, columns) -> None:
    """Write a quality CSV. `columns` maps metric name -> per-sample values
    aligned with `sample_ids`."""
    names = list(columns)
    for name in names:
        if len(columns[name]) != len(sample_ids):
            raise ExporterError(f"column '{name}' is misaligned")
    lines = ["sample_id," + ",".join(names)]
    for i, sid in enumerate(sample_ids):
        lines.append(sid + "," + ",".join(_fmt(columns[n][i]) for n in names))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
