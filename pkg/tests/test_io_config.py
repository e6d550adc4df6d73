import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conceptcones import ExperimentConfig, GroupDictionary, SubLabels, TrainConfig
from conceptcones.errors import ContainerFormatError, InvalidLabels, ManifestError
from conceptcones.io import (
    load_checkpoint,
    load_dataset,
    load_manifest,
    read_container,
    read_labels,
    read_named_matrix,
    read_sublabels,
    save_checkpoint,
    write_container,
    write_labels,
    write_named_matrix,
    write_sublabels,
)
from conceptcones.types import ConceptLabelMatrix

from fixtures import write_dataset


class TestContainer:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(0, 6)),
                  elements=st.floats(allow_nan=True, allow_infinity=True)))
    def test_roundtrip_bitwise_f64(self, M):
        import tempfile
        from pathlib import Path
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "m.slcs"
            write_container(p, M)
            back = read_container(p)
        assert back.dtype == np.float64
        assert back.tobytes() == np.ascontiguousarray(M).tobytes()

    def test_roundtrip_f32(self, rng, tmp_path):
        M = rng.standard_normal((4, 3)).astype(np.float32)
        write_container(tmp_path / "a.slcs", M, dtype="f32")
        back = read_container(tmp_path / "a.slcs")
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, M)

    def test_layout(self, tmp_path):
        """[TRIVIAL] header fields and column-major little-endian payload."""
        M = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        write_container(tmp_path / "a.slcs", M)
        raw = (tmp_path / "a.slcs").read_bytes()
        assert raw[:4] == b"SLCS"
        assert struct.unpack("<BBIQ", raw[4:18]) == (1, 1, 3, 2)
        assert np.frombuffer(raw[18:], "<f8").tolist() == [1, 3, 5, 2, 4, 6]

    def test_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "x").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(ContainerFormatError):
            read_container(tmp_path / "x")
        write_container(tmp_path / "y", np.ones((2, 2)))
        raw = (tmp_path / "y").read_bytes()
        (tmp_path / "y").write_bytes(raw[:-3])
        with pytest.raises(ContainerFormatError):
            read_container(tmp_path / "y")

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        write_container(tmp_path / "a.slcs", np.ones((2, 2)))
        assert [p.name for p in tmp_path.iterdir()] == ["a.slcs"]

    def test_named_matrix(self, rng, tmp_path):
        W = rng.standard_normal((3, 2))
        write_named_matrix(tmp_path / "p.slcs", W, ["dog", "cat"])
        back, names = read_named_matrix(tmp_path / "p.slcs")
        np.testing.assert_array_equal(back, W)
        assert names == ["dog", "cat"]


class TestLabelFiles:
    def test_csv_roundtrip(self, tmp_path):
        L = ConceptLabelMatrix(np.array([[1, 0], [1, 1]]), ("a", "b"))
        write_labels(tmp_path / "l.csv", L)
        values, names = read_labels(tmp_path / "l.csv")
        assert names == ["a", "b"]
        np.testing.assert_array_equal(values, L.values)

    def test_json(self, tmp_path):
        (tmp_path / "l.json").write_text(json.dumps({"concepts": ["x"], "labels": [[1], [0]]}))
        values, names = read_labels(tmp_path / "l.json")
        assert values.tolist() == [[1], [0]] and names == ["x"]

    def test_non_binary(self, tmp_path):
        (tmp_path / "l.csv").write_text("a\n2\n")
        with pytest.raises(InvalidLabels):
            read_labels(tmp_path / "l.csv")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.csv"):
            read_labels(tmp_path / "nope.csv")

    def test_sublabels_roundtrip(self, tmp_path):
        s = SubLabels([(0, 1, "red"), (0, 1, "blue"), (3, 0, "x")])
        write_sublabels(tmp_path / "s.csv", s, ["a", "b"])
        back = read_sublabels(tmp_path / "s.csv", ["a", "b"])
        assert list(back.entries()) == list(s.entries())


class TestManifest:
    def test_load_and_remap(self, tmp_path):
        path, data = write_dataset(tmp_path, unlabeled=(5, 50))
        ds = load_dataset(load_manifest(path))
        assert ds.X.n_items == 158
        assert 5 not in ds.kept and 50 not in ds.kept
        # validation lost item 5; the train split lost item 50
        assert ds.splits["validation"].size == 19
        np.testing.assert_array_equal(ds.kept[ds.splits["query"]], np.arange(20, 40))
        # pool = rest, which may overlap train but not validation or query
        np.testing.assert_array_equal(ds.splits["pool"], ds.splits["train"])
        np.testing.assert_array_equal(ds.labels.values, data.labels[ds.kept])
        np.testing.assert_allclose(np.linalg.norm(ds.X.data, axis=0), 1.0)
        # sub-labels follow the remapped item indices
        for i, j, s in ds.sublabels.entries():
            assert s == f"s{data.sublabels[ds.kept[i], j]}"

    def test_hash_mismatch(self, tmp_path):
        path, _ = write_dataset(tmp_path)
        m = json.loads(path.read_text())
        m["hashes"]["embeddings"] = "0" * 64
        path.write_text(json.dumps(m))
        with pytest.raises(ManifestError, match="hash mismatch"):
            load_manifest(path)

    def test_overlapping_splits(self, tmp_path):
        path, _ = write_dataset(tmp_path)
        m = json.loads(path.read_text())
        m["splits"]["query"] = [0, 21]
        path.write_text(json.dumps(m))
        with pytest.raises(ManifestError, match="overlap"):
            load_dataset(load_manifest(path))

    def test_missing_file(self, tmp_path):
        path, _ = write_dataset(tmp_path)
        (tmp_path / "labels.csv").unlink()
        with pytest.raises(FileNotFoundError, match="labels.csv"):
            load_manifest(path)

    def test_clip_needs_mean(self, tmp_path):
        path, _ = write_dataset(tmp_path)
        m = json.loads(path.read_text())
        del m["mean"]
        path.write_text(json.dumps(m))
        with pytest.raises(ManifestError):
            load_manifest(path)


class TestCheckpoint:
    def test_roundtrip(self, rng, tmp_path):
        B = rng.standard_normal((5, 3))
        D = GroupDictionary(B / np.linalg.norm(B, axis=0), [1, 2])
        A = np.abs(rng.standard_normal((3, 7)))
        side = save_checkpoint(tmp_path / "ck", D, A, {"config_hash": "abc", "seed": 3})
        D2, A2, meta = load_checkpoint(tmp_path / "ck")
        assert D2 == D
        np.testing.assert_array_equal(A2, A)
        assert meta["config_hash"] == "abc" and meta["group_sizes"] == [1, 2]
        assert len(side["sha256"]["dictionary"]) == 64


class TestExperimentConfig:
    def test_hash_stable_and_sensitive(self):
        a, b = ExperimentConfig(), ExperimentConfig()
        assert a.hash == b.hash and len(a.hash) == 16
        assert ExperimentConfig(seed=1).hash != a.hash

    def test_file_roundtrip_and_overrides(self, tmp_path):
        cfg = ExperimentConfig(d0=7, iterations=3, protocols=("general",), d0_range=(2, 6, 2))
        cfg.save(tmp_path / "c.json")
        back = ExperimentConfig.load(tmp_path / "c.json")
        assert back == cfg and back.hash == cfg.hash
        over = back.with_overrides(iterations=9, d0=None)
        assert over.iterations == 9 and over.d0 == 7
        assert back.d0_values() == [2, 4, 6]

    def test_train_config(self):
        t = ExperimentConfig(seed=11, batch_size=5).train_config()
        assert isinstance(t, TrainConfig) and t.shuffle_seed == 11 and t.batch_size == 5

    def test_rejects_unknown(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"nonsense": 1})
        with pytest.raises(ValueError):
            ExperimentConfig(protocols=("fancy",))
        with pytest.raises(ValueError):
            ExperimentConfig(update_mode="other")
