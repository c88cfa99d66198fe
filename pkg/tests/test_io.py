import numpy as np
import pytest

from canopycomplete.config import (ENV_PREFIX, config_from_dict,
                                   config_to_dict, load_config, save_config)
from canopycomplete.errors import DataFileError
from canopycomplete.geom import PointCloud, TriangleMesh
from canopycomplete.obj import load_obj, save_obj
from canopycomplete.ply import load_ply, save_ply
from canopycomplete.popsim import DatasetManifest, ManifestRecord


def random_cloud(rng, n=50, labels=True):
    pts = rng.random((n, 3)).astype(np.float32).astype(np.float64)
    kwargs = {}
    if labels:
        kwargs = dict(
            organ=rng.integers(0, 5, n).astype(np.uint8),
            plant_id=rng.integers(0, 16, n).astype(np.int32),
            occluded=rng.integers(0, 2, n).astype(np.uint8),
        )
    return PointCloud(pts, **kwargs)


class TestPlyBinary:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(20):
            cloud = random_cloud(rng, n=rng.integers(1, 200))
            path = tmp_path / f"c{i}.ply"
            save_ply(path, cloud, binary=True)
            loaded = load_ply(path)
            assert np.array_equal(loaded.points, cloud.points)  # float32-exact values
            assert np.array_equal(loaded.organ, cloud.organ)
            assert np.array_equal(loaded.plant_id, cloud.plant_id)
            assert np.array_equal(loaded.occluded, cloud.occluded)

    def test_save_load_save_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng)
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        save_ply(p1, cloud, binary=True)
        save_ply(p2, load_ply(p1), binary=True)
        assert p1.read_bytes() == p2.read_bytes()

    def test_unknown_properties_preserved(self, tmp_path):
        rng = np.random.default_rng(2)
        cloud = PointCloud(rng.random((10, 3)),
                           extras={"intensity": rng.random(10).astype(np.float32),
                                   "ring": rng.integers(0, 8, 10).astype(np.uint8)})
        path = tmp_path / "x.ply"
        save_ply(path, cloud, binary=True)
        loaded = load_ply(path)
        assert set(loaded.extras) == {"intensity", "ring"}
        assert np.array_equal(loaded.extras["intensity"], cloud.extras["intensity"])
        assert loaded.extras["ring"].dtype == np.uint8
        save_ply(tmp_path / "y.ply", loaded, binary=True)
        assert (tmp_path / "y.ply").read_bytes() == path.read_bytes()


class TestPlyAscii:
    def test_roundtrip_close(self, tmp_path):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng)
        path = tmp_path / "a.ply"
        save_ply(path, cloud, binary=False)
        loaded = load_ply(path)
        assert np.allclose(loaded.points, cloud.points, atol=1e-6)
        assert np.array_equal(loaded.organ, cloud.organ)


class TestPlyErrors:
    def test_not_a_ply(self, tmp_path):
        p = tmp_path / "bad.ply"
        p.write_text("hello\nworld\n")
        with pytest.raises(DataFileError, match="magic|end_header"):
            load_ply(p)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(4)
        p = tmp_path / "t.ply"
        save_ply(p, random_cloud(rng, n=20), binary=True)
        blob = p.read_bytes()
        p.write_bytes(blob[:-10])
        with pytest.raises(DataFileError, match="truncated"):
            load_ply(p)

    def test_bad_vertex_row_is_located(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 2\n"
                     "property float x\nproperty float y\nproperty float z\n"
                     "end_header\n0 0 0\n0 zebra 0\n")
        with pytest.raises(DataFileError) as exc:
            load_ply(p)
        assert exc.value.line == 9  # the zebra row

    def test_missing_coordinate_property(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                     "property float x\nproperty float y\nend_header\n0 0\n")
        with pytest.raises(DataFileError, match="'z'"):
            load_ply(p)

    def test_unsupported_format(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_text("ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
                     "property float x\nproperty float y\nproperty float z\nend_header\n")
        with pytest.raises(DataFileError, match="format"):
            load_ply(p)

    def test_wrong_field_count_located(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                     "property float x\nproperty float y\nproperty float z\n"
                     "end_header\n1 2\n")
        with pytest.raises(DataFileError, match="expected 3 values"):
            load_ply(p)


class TestObj:
    def test_roundtrip(self, tmp_path):
        mesh = TriangleMesh(
            np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]),
            np.array([[0, 1, 2], [0, 2, 3]]),
        )
        p = tmp_path / "m.obj"
        save_obj(p, mesh)
        loaded = load_obj(p)
        assert np.allclose(loaded.vertices, mesh.vertices)
        assert np.array_equal(loaded.triangles, mesh.triangles)

    def test_fan_triangulation(self, tmp_path):
        p = tmp_path / "quad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = load_obj(p)
        assert mesh.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_slash_indices(self, tmp_path):
        p = tmp_path / "m.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf 1/1/1 2/1/1 3/1/1\n")
        mesh = load_obj(p)
        assert mesh.triangles.tolist() == [[0, 1, 2]]

    def test_out_of_range_index(self, tmp_path):
        p = tmp_path / "m.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
        with pytest.raises(DataFileError, match="exceeds"):
            load_obj(p)

    def test_bad_record_located(self, tmp_path):
        p = tmp_path / "m.obj"
        p.write_text("v 0 0 0\nwhat 1 2 3\n")
        with pytest.raises(DataFileError) as exc:
            load_obj(p)
        assert exc.value.line == 2


class TestManifest:
    def _manifest(self):
        rec = ManifestRecord(sample_id="s0", stage="silique", split="train",
                             surface_path="s0_surface.ply", occluded_path="s0_occluded.ply",
                             n_in=8, m_out=8, seed=1, slot_asset_ids=["a"])
        return DatasetManifest(records=[rec], seed=7, split_fraction=0.8)

    def test_roundtrip_stable(self):
        m = self._manifest()
        text = m.to_json()
        again = DatasetManifest.from_json(text)
        assert again.to_json() == text

    def test_empty_manifest(self):
        m = DatasetManifest(records=[], seed=0, split_fraction=0.8)
        assert DatasetManifest.from_json(m.to_json()).to_json() == m.to_json()

    def test_large_manifest_roundtrip(self):
        recs = [ManifestRecord(sample_id=f"s{i}", stage="bolting",
                               split="train" if i % 5 else "val",
                               surface_path=f"s{i}_surface.ply",
                               occluded_path=f"s{i}_occluded.ply",
                               n_in=8192, m_out=8192, seed=i, slot_asset_ids=[])
                for i in range(4000)]
        m = DatasetManifest(records=recs, seed=3, split_fraction=0.8)
        assert DatasetManifest.from_json(m.to_json()).to_json() == m.to_json()

    def test_unknown_key_rejected_with_name(self):
        text = self._manifest().to_json().replace('"seed": 7', '"seed": 7, "bogus": 1')
        with pytest.raises(DataFileError, match="/bogus"):
            DatasetManifest.from_json(text)

    def test_unknown_sample_key_rejected(self):
        text = self._manifest().to_json().replace('"seed": 1', '"seed": 1, "zap": 0')
        with pytest.raises(DataFileError, match="/samples/0/zap"):
            DatasetManifest.from_json(text)

    def test_bad_json_located(self):
        with pytest.raises(DataFileError):
            DatasetManifest.from_json("{not json", path="m.json")


class TestConfig:
    def test_defaults_from_empty(self):
        cfg = config_from_dict({})
        assert cfg.camera.count == 36
        assert cfg.network.n_in == 8192
        assert cfg.train.lr == 1e-4
        assert cfg.layout.rows == 4

    def test_unknown_key_rejected_with_path(self):
        with pytest.raises(DataFileError, match="/network/typo"):
            config_from_dict({"network": {"typo": 1}})
        with pytest.raises(DataFileError, match="/nonsense"):
            config_from_dict({"nonsense": {}})

    def test_section_overrides(self):
        cfg = config_from_dict({"network": {"k": 8, "n_in": 512, "m_out": 512,
                                            "m1": 128, "m2": 256},
                                "train": {"max_epochs": 5}})
        assert cfg.network.k == 8
        assert cfg.train.max_epochs == 5
        assert cfg.train.lr == 1e-4  # untouched default

    def test_invalid_value_reported(self):
        with pytest.raises(DataFileError, match="/train"):
            config_from_dict({"train": {"lambda_com": 0.5, "lambda_adv": 0.1}})

    def test_yaml_roundtrip_semantic(self, tmp_path):
        cfg = config_from_dict({"seed": 9, "network": {"k": 12}})
        p = tmp_path / "run.yaml"
        save_config(p, cfg)
        again = load_config(p, environ={})
        assert config_to_dict(again) == config_to_dict(cfg)

    def test_env_override(self):
        cfg = config_from_dict({}, environ={f"{ENV_PREFIX}SEED": "42",
                                            f"{ENV_PREFIX}TRAIN__MAX_EPOCHS": "7"})
        assert cfg.seed == 42
        assert cfg.train.max_epochs == 7

    def test_invalid_yaml_located(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("network:\n  k: [unclosed\n")
        with pytest.raises(DataFileError):
            load_config(p, environ={})
