import json
import struct

import numpy as np
import pytest

from halluscope import tensorstore
from halluscope.errors import (AlignmentError, FormatError, ValidationError)


# ---------------------------------------------------------------------------
# FTB container
# ---------------------------------------------------------------------------

class TestFtb:
    def test_round_trip(self, tmp_path):
        arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7.0
        path = tmp_path / "a.ftb"
        tensorstore.write_array(path, arr)
        back = tensorstore.read_array(path)
        assert back.dtype == np.float32
        assert back.shape == (2, 3, 4)
        assert np.array_equal(back, arr)

    def test_exact_bytes(self, tmp_path):
        arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        path = tmp_path / "a.ftb"
        tensorstore.write_array(path, arr)
        raw = path.read_bytes()
        expected = (
            b"FTB1" + bytes([1, 2])
            + struct.pack("<Q", 2) + struct.pack("<Q", 2)
            + struct.pack("<4f", 1.0, 2.0, 3.0, 4.0)
        )
        assert raw == expected

    def test_write_deterministic(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
        tensorstore.write_array(tmp_path / "a.ftb", arr)
        tensorstore.write_array(tmp_path / "b.ftb", arr)
        assert (tmp_path / "a.ftb").read_bytes() == (tmp_path / "b.ftb").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ftb"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FormatError) as err:
            tensorstore.read_array(path)
        assert err.value.offset == 0

    def test_bad_dtype_code(self, tmp_path):
        path = tmp_path / "bad.ftb"
        path.write_bytes(b"FTB1" + bytes([9, 1]) + struct.pack("<Q", 1) + bytes(4))
        with pytest.raises(FormatError) as err:
            tensorstore.read_array(path)
        assert err.value.offset == 4

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "bad.ftb"
        path.write_bytes(b"FTB")
        with pytest.raises(FormatError):
            tensorstore.read_array(path)

    def test_payload_length_mismatch(self, tmp_path):
        path = tmp_path / "bad.ftb"
        path.write_bytes(
            b"FTB1" + bytes([1, 1]) + struct.pack("<Q", 3) + bytes(8)
        )
        with pytest.raises(FormatError):
            tensorstore.read_array(path)

    def test_empty_refused(self, tmp_path):
        with pytest.raises(ValidationError):
            tensorstore.write_array(tmp_path / "a.ftb", np.empty((0, 3)))


# ---------------------------------------------------------------------------
# Feature dumps
# ---------------------------------------------------------------------------

class TestFeatureDump:
    def test_round_trip(self, tmp_path):
        ids = ["a", "b", "c"]
        data = np.random.default_rng(1).normal(size=(3, 5)).astype(np.float32)
        dump = tensorstore.FeatureDump(layer=0.5, sample_ids=ids, data=data)
        assert dump.layer == "0.50"
        path = tmp_path / "d.ftb"
        tensorstore.write_dump(dump, path)
        back = tensorstore.read_dump(path, ids, "0.50")
        assert back.sample_ids == ids
        assert np.array_equal(back.data, data)

    def test_rejects_duplicates(self):
        with pytest.raises(ValidationError):
            tensorstore.FeatureDump("1.00", ["a", "a"], np.ones((2, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            tensorstore.FeatureDump("1.00", ["a"], np.array([[np.nan, 1.0]]))

    def test_rejects_wrong_rank(self, tmp_path):
        tensorstore.write_array(tmp_path / "r3.ftb", np.ones((2, 2, 2)))
        with pytest.raises(FormatError):
            tensorstore.read_dump(tmp_path / "r3.ftb", ["a", "b"], "1.00")


# ---------------------------------------------------------------------------
# Quality tables
# ---------------------------------------------------------------------------

class TestQualityTable:
    def test_csv_round_trip(self, tmp_path):
        table = tensorstore.QualityTable(
            sample_ids=["s0", "s1"],
            metrics={"psnr": [30.5, float("inf")], "ms_ssim": [0.9, 1.0]},
        )
        path = tmp_path / "q.csv"
        tensorstore.write_quality_csv(table, path)
        text = path.read_text()
        assert text.splitlines()[0] == "sample_id,psnr,ms_ssim"
        assert "inf" in text
        back = tensorstore.read_quality_csv(path)
        assert back.sample_ids == ["s0", "s1"]
        assert np.array_equal(back.metrics["psnr"], [30.5, np.inf])
        assert np.array_equal(back.metrics["ms_ssim"], [0.9, 1.0])

    def test_lpips_column_flipped(self, tmp_path):
        path = tmp_path / "q.csv"
        path.write_text("sample_id,lpips\ns0,0.25\ns1,0.0\n")
        table = tensorstore.read_quality_csv(path)
        assert table.metric_names == ["one_minus_lpips"]
        assert np.array_equal(table.metrics["one_minus_lpips"], [0.75, 1.0])

    def test_bounded_metric_above_one_rejected(self):
        with pytest.raises(ValidationError):
            tensorstore.QualityTable(["a"], {"ms_ssim": [1.5]})

    def test_psnr_unbounded(self):
        tensorstore.QualityTable(["a"], {"psnr": [60.0]})  # no error

    def test_nan_rejected(self):
        with pytest.raises(ValidationError):
            tensorstore.QualityTable(["a"], {"psnr": [float("nan")]})

    def test_subset_alignment(self):
        table = tensorstore.QualityTable(
            ["a", "b", "c"], {"psnr": [1.0, 2.0, 3.0]}
        )
        sub = table.subset(["c", "a"])
        assert sub.sample_ids == ["c", "a"]
        assert np.array_equal(sub.metrics["psnr"], [3.0, 1.0])
        with pytest.raises(AlignmentError):
            table.subset(["zz"])

    def test_bad_header(self, tmp_path):
        path = tmp_path / "q.csv"
        path.write_text("id,psnr\ns0,1.0\n")
        with pytest.raises(FormatError):
            tensorstore.read_quality_csv(path)

    def test_bad_number_has_line(self, tmp_path):
        path = tmp_path / "q.csv"
        path.write_text("sample_id,psnr\ns0,abc\n")
        with pytest.raises(FormatError) as err:
            tensorstore.read_quality_csv(path)
        assert ":2" in str(err.value)

    def test_fmt_round_trips(self):
        for v in (0.1, 1.0 / 3.0, 1e-300, -2.5, float("inf"), float("-inf")):
            assert float(tensorstore._fmt(v)) == v


# ---------------------------------------------------------------------------
# Manifests and datasets
# ---------------------------------------------------------------------------

def _write_tree(tmp_path, n=6, channels=4, layers=("0.00", "1.00")):
    rng = np.random.default_rng(0)
    ids = [f"s{i}" for i in range(n)]
    layer_files = {}
    for tag in layers:
        data = rng.normal(size=(n, channels)).astype(np.float32)
        fname = f"layer_{tag}.ftb"
        tensorstore.write_array(tmp_path / fname, data)
        layer_files[tag] = fname
    table = tensorstore.QualityTable(
        ids, {"psnr": rng.uniform(10, 40, size=n),
              "ms_ssim": rng.uniform(0, 1, size=n)}
    )
    tensorstore.write_quality_csv(table, tmp_path / "quality.csv")
    manifest = tensorstore.DatasetManifest(
        version=1, dataset_id="t", layer_files=layer_files,
        quality_file="quality.csv", sample_ids=ids,
    )
    path = tmp_path / "manifest.json"
    tensorstore.write_manifest(manifest, path)
    return path, ids


class TestManifest:
    def test_load_round_trip(self, tmp_path):
        path, ids = _write_tree(tmp_path)
        ds = tensorstore.load_manifest(path)
        assert ds.sample_ids == ids
        assert ds.layers() == ["0.00", "1.00"]
        assert ds.features("1.00").shape == (6, 4)
        assert ds.quality.sample_ids == ids

    def test_unknown_layer_tag(self, tmp_path):
        path, _ = _write_tree(tmp_path)
        doc = json.loads(path.read_text())
        doc["layer_files"]["0.33"] = "layer_0.00.ftb"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            tensorstore.read_manifest(path)

    def test_missing_field(self, tmp_path):
        path, _ = _write_tree(tmp_path)
        doc = json.loads(path.read_text())
        del doc["quality_file"]
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            tensorstore.read_manifest(path)

    def test_bad_version(self, tmp_path):
        path, _ = _write_tree(tmp_path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            tensorstore.read_manifest(path)

    def test_missing_quality_row(self, tmp_path):
        path, ids = _write_tree(tmp_path)
        lines = (tmp_path / "quality.csv").read_text().splitlines()
        (tmp_path / "quality.csv").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(AlignmentError):
            tensorstore.load_manifest(path)

    def test_missing_layer_file(self, tmp_path):
        path, _ = _write_tree(tmp_path)
        (tmp_path / "layer_0.00.ftb").unlink()
        with pytest.raises(ValidationError):
            tensorstore.load_manifest(path)

    def test_subset_preserves_alignment(self, tmp_path):
        path, ids = _write_tree(tmp_path)
        ds = tensorstore.load_manifest(path)
        sub = ds.subset(["s3", "s1"])
        assert sub.sample_ids == ["s3", "s1"]
        assert np.array_equal(sub.features("1.00")[0], ds.features("1.00")[3])
        assert sub.quality.metrics["psnr"][0] == ds.quality.metrics["psnr"][3]
        assert sub.quality.metrics["psnr"][1] == ds.quality.metrics["psnr"][1]


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

class TestSplit:
    def test_sizes_and_determinism(self):
        ids = [f"s{i}" for i in range(101)]
        a = tensorstore.split(ids, 0.25, seed=7)
        b = tensorstore.split(ids, 0.25, seed=7)
        assert len(a.val_ids) == round(0.25 * 101)
        assert a.val_ids == b.val_ids and a.calib_ids == b.calib_ids
        assert sorted(a.val_ids + a.calib_ids) == sorted(ids)

    def test_different_seeds_differ(self):
        ids = [f"s{i}" for i in range(1000)]
        a = tensorstore.split(ids, 0.25, seed=1)
        b = tensorstore.split(ids, 0.25, seed=2)
        assert a.val_ids != b.val_ids

    def test_stratified_counts(self):
        ids = [f"s{i}" for i in range(40)]
        strata = {sid: ("x" if i < 20 else "y") for i, sid in enumerate(ids)}
        manifest = tensorstore.DatasetManifest(
            version=1, dataset_id="t", layer_files={}, quality_file="q",
            sample_ids=ids, strata=strata,
        )
        out = tensorstore.split(manifest, 0.25, seed=0)
        val_x = [s for s in out.val_ids if strata[s] == "x"]
        val_y = [s for s in out.val_ids if strata[s] == "y"]
        assert len(val_x) == 5 and len(val_y) == 5

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValidationError):
            tensorstore.split(["a", "b"], 0.0, seed=0)
        with pytest.raises(ValidationError):
            tensorstore.split(["a"], 0.5, seed=0)

    def test_layer_tag(self):
        assert tensorstore.layer_tag(0.5) == "0.50"
        assert tensorstore.layer_tag("1") == "1.00"
        assert tensorstore.layer_tag("0.25") == "0.25"
