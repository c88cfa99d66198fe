import numpy as np
import pytest

from canopycomplete import autodiff as ad
from canopycomplete.autodiff import Tensor
from canopycomplete.errors import TrainingDiverged
from canopycomplete.metrics import chamfer_sq
from canopycomplete.network import NetworkConfig, init_discriminator, init_generator
from canopycomplete.popsim import DatasetManifest, ManifestRecord
from canopycomplete.training import (Checkpoint, TrainConfig,
                                     chamfer_loss_graph, load_checkpoint,
                                     normalization_params, normalize_points,
                                     denormalize_points, prepare_sample,
                                     save_checkpoint, train)

TINY = NetworkConfig(k=4, layer_dims=(8, 16), n_in=64, m_out=64, m1=16, m2=32,
                     disc_dims=(4, 8, 8), disc_classifier=(8, 1), blocks=(1, 1, 1))


class TestTrainConfig:
    def test_alpha_schedule(self):
        tc = TrainConfig()
        assert tc.alpha_for_epoch(0) == 0.01
        assert tc.alpha_for_epoch(29) == 0.01
        assert tc.alpha_for_epoch(30) == 0.05
        assert tc.alpha_for_epoch(80) == 0.05
        assert tc.alpha_for_epoch(81) == 0.1
        assert tc.alpha_for_epoch(199) == 0.1

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha_schedule=((5, 0.1), (0, 0.01)))
        with pytest.raises(ValueError):
            TrainConfig(lambda_com=0.8, lambda_adv=0.1)

    def test_roundtrip(self):
        tc = TrainConfig(max_epochs=17, seed=5)
        assert TrainConfig.from_dict(tc.to_dict()) == tc


class TestNormalization:
    def test_unit_cube(self):
        rng = np.random.default_rng(0)
        pts = rng.random((50, 3)) * np.array([2.0, 1.0, 0.5]) + np.array([5, -3, 2.0])
        off, scale = normalization_params(pts)
        unit = normalize_points(pts, off, scale)
        assert unit.min() >= -1e-12
        assert unit.max() <= 1.0 + 1e-12
        back = denormalize_points(unit, off, scale)
        assert np.allclose(back, pts, atol=1e-12)

    def test_degenerate_extent(self):
        pts = np.tile([[1.0, 1.0, 1.0]], (4, 1))
        off, scale = normalization_params(pts)
        assert scale == 1.0


class TestChamferGraph:
    def test_agrees_with_metric(self):
        rng = np.random.default_rng(1)
        pred = Tensor(rng.random((40, 3)), requires_grad=True, dtype=np.float64)
        gt = rng.random((30, 3))
        loss = chamfer_loss_graph(pred, gt)
        assert loss.item() == pytest.approx(chamfer_sq(pred.data, gt), abs=1e-12)

    def test_gradient_descends(self):
        rng = np.random.default_rng(2)
        pred = Tensor(rng.random((20, 3)), requires_grad=True, dtype=np.float64)
        gt = rng.random((20, 3))
        values = []
        for _ in range(50):
            ad.zero_grads([pred])
            loss = chamfer_loss_graph(pred, gt)
            ad.backward(loss)
            pred.data -= 0.05 * pred.grad
            values.append(loss.item())
        # plain gradient steps reduce the loss monotonically here
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
        assert values[-1] < 0.7 * values[0]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        gw = init_generator(TINY, rng)
        dw = init_discriminator(TINY, rng)
        from canopycomplete.training import _state_arrays

        ckpt = Checkpoint(config=TINY, norm_rule=1, arrays=_state_arrays(gw, dw))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ckpt)
        assert path.read_bytes()[:4] == b"CPCN"
        loaded = load_checkpoint(path)
        assert loaded.config == TINY
        assert loaded.norm_rule == 1
        assert set(loaded.arrays) == set(ckpt.arrays)
        for name in ckpt.arrays:
            assert np.array_equal(loaded.arrays[name], ckpt.arrays[name])
        gw2 = loaded.generator()
        for (n1, p1), (n2, p2) in zip(gw.named_parameters(), gw2.named_parameters()):
            assert n1 == n2
            assert np.array_equal(p1.data, p2.data)

    def test_repeated_saves_byte_identical(self, tmp_path):
        rng = np.random.default_rng(4)
        gw = init_generator(TINY, rng)
        dw = init_discriminator(TINY, rng)
        from canopycomplete.training import _state_arrays

        ckpt = Checkpoint(config=TINY, norm_rule=1, arrays=_state_arrays(gw, dw))
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        save_checkpoint(tmp_path / "b.ckpt", ckpt)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_corrupt_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        from canopycomplete.errors import DataFileError

        with pytest.raises(DataFileError, match="magic"):
            load_checkpoint(p)

    def test_truncation_rejected(self, tmp_path):
        rng = np.random.default_rng(5)
        from canopycomplete.training import _state_arrays

        ckpt = Checkpoint(config=TINY, norm_rule=1,
                          arrays=_state_arrays(init_generator(TINY, rng),
                                               init_discriminator(TINY, rng)))
        p = tmp_path / "t.ckpt"
        save_checkpoint(p, ckpt)
        p.write_bytes(p.read_bytes()[:-7])
        from canopycomplete.errors import DataFileError

        with pytest.raises(DataFileError, match="truncated"):
            load_checkpoint(p)


def _toy_dataset(tmp_path, n_samples, seed=0):
    """Tiny on-disk dataset: clustered blobs standing in for canopies."""
    from canopycomplete.ply import save_ply
    from canopycomplete.geom import PointCloud

    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_samples):
        center = rng.random(3)
        surface = center + 0.3 * rng.normal(size=(TINY.n_in, 3))
        occluded = center + 0.1 * rng.normal(size=(TINY.m_out, 3))
        sp, op = f"s{i}_surface.ply", f"s{i}_occluded.ply"
        save_ply(tmp_path / sp, PointCloud(surface), binary=True)
        save_ply(tmp_path / op, PointCloud(occluded), binary=True)
        records.append(ManifestRecord(
            sample_id=f"s{i}", stage="silique",
            split="train" if i < max(1, n_samples - 1) else "val",
            surface_path=sp, occluded_path=op,
            n_in=TINY.n_in, m_out=TINY.m_out, seed=i, slot_asset_ids=[]))
    manifest = DatasetManifest(records=records, seed=seed, split_fraction=0.8)
    manifest.save(tmp_path / "manifest.json")
    return manifest


class TestTrainLoop:
    def test_memorizes_single_sample(self, tmp_path):
        manifest = _toy_dataset(tmp_path, 1, seed=7)
        tc = TrainConfig(lr=2e-3, batch_size=1, max_epochs=60, loss_stop=1e-9,
                         val_interval=30, seed=7)
        result = train(manifest, tmp_path, TINY, tc)
        first = result.history[0]["l_com"]
        last = result.history[-1]["l_com"]
        assert last < 0.5 * first

    def test_deterministic_checkpoints(self, tmp_path):
        manifest = _toy_dataset(tmp_path, 3, seed=1)
        tc = TrainConfig(lr=1e-3, batch_size=2, max_epochs=4, loss_stop=1e-9,
                         val_interval=2, seed=9)
        r1 = train(manifest, tmp_path, TINY, tc)
        r2 = train(manifest, tmp_path, TINY, tc)
        save_checkpoint(tmp_path / "a.ckpt", r1.checkpoint)
        save_checkpoint(tmp_path / "b.ckpt", r2.checkpoint)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_csv_log_schema(self, tmp_path):
        manifest = _toy_dataset(tmp_path, 2, seed=2)
        tc = TrainConfig(batch_size=2, max_epochs=3, loss_stop=1e-9, val_interval=2, seed=0)
        log = tmp_path / "train.csv"
        result = train(manifest, tmp_path, TINY, tc, log_path=log)
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "epoch,l_com,l_adv,val_cd,alpha"
        assert len(lines) == 1 + result.epochs_run
        assert lines[1].split(",")[4] == "0.01"  # epoch-0 alpha

    def test_validation_tracked(self, tmp_path):
        manifest = _toy_dataset(tmp_path, 3, seed=3)
        tc = TrainConfig(batch_size=2, max_epochs=4, loss_stop=1e-9, val_interval=2, seed=1)
        result = train(manifest, tmp_path, TINY, tc)
        assert result.best_val_cd is not None
        vals = [h["val_cd"] for h in result.history if h["val_cd"] is not None]
        assert result.best_val_cd == min(vals)

    def test_nan_aborts_with_context(self, tmp_path):
        manifest = _toy_dataset(tmp_path, 1, seed=4)
        tc = TrainConfig(lr=1e30, batch_size=1, max_epochs=10, loss_stop=1e-9,
                         val_interval=5, seed=2)
        with pytest.raises((TrainingDiverged, ValueError)):
            train(manifest, tmp_path, TINY, tc)

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = DatasetManifest(records=[], seed=0, split_fraction=0.8)
        with pytest.raises(ValueError):
            train(manifest, tmp_path, TINY, TrainConfig())

    def test_prepare_sample_pyramid(self):
        rng = np.random.default_rng(5)
        s = prepare_sample(rng.random((TINY.n_in, 3)), rng.random((TINY.m_out, 3)), TINY)
        assert len(s.gt_mid) == TINY.m2
        assert len(s.gt_coarse) == TINY.m1
        assert s.inputs.min() >= 0 and s.inputs.max() <= 1 + 1e-12
