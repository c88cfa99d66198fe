import numpy as np
import pytest

from canopycomplete import autodiff as ad
from canopycomplete.autodiff import Tensor
from canopycomplete.geom import knn
from canopycomplete.network import (EdgeConvLayer, NetworkConfig,
                                    discriminator_forward, edge_features,
                                    dgcfe_layer, generator_forward,
                                    init_discriminator, init_generator,
                                    mrdg_encode, ppd_decode)

PAPER = NetworkConfig()  # production defaults

TOY = NetworkConfig(k=4, layer_dims=(8, 16, 32, 64, 128), n_in=256, m_out=256,
                    m1=64, m2=128, disc_dims=(8, 16, 32, 64),
                    disc_classifier=(32, 16, 1))


class TestConfig:
    def test_production_shape_laws(self):
        assert PAPER.latent_per_resolution == 1920
        assert PAPER.latent_total == 5760
        assert PAPER.resolutions == (8192, 4096, 2048)
        assert PAPER.fc_widths == (1920, 1024, 512)
        assert PAPER.disc_latent == 448
        assert (PAPER.m1, PAPER.m2, PAPER.m_out) == (2048, 4096, 8192)

    def test_latent_law_across_layer_sweep(self):
        # deeper encoders extend the dims by 2048 and 4096
        sweeps = {
            4: (64, 128, 256, 512),
            5: (64, 128, 256, 512, 1024),
            6: (64, 128, 256, 512, 1024, 2048),
            7: (64, 128, 256, 512, 1024, 2048, 4096),
        }
        for n_layers, dims in sweeps.items():
            cfg = NetworkConfig(layer_dims=dims)
            assert cfg.latent_total == 3 * sum(dims[-4:])

    def test_latent_law_across_k_and_sizes(self):
        for k in (8, 10, 12, 16, 20, 24, 28, 32):
            cfg = NetworkConfig(k=k, n_in=2048, m_out=2048, m1=512, m2=1024)
            assert cfg.latent_total == 3 * sum(cfg.layer_dims[-4:])
        for size in (2048, 4096, 8192, 16384):
            cfg = NetworkConfig(n_in=size, m_out=size, m1=size // 4, m2=size // 2)
            assert cfg.resolutions == (size, size // 2, size // 4)

    def test_toy_dimension_arithmetic(self):
        cfg = NetworkConfig(layer_dims=(8, 16, 32, 64, 128), n_in=256, m_out=256,
                            m1=64, m2=128)
        assert cfg.latent_per_resolution == 240
        assert cfg.latent_total == 720

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            NetworkConfig(layer_dims=(64,))
        with pytest.raises(ValueError):
            NetworkConfig(n_in=8190)
        with pytest.raises(ValueError):
            NetworkConfig(m_out=8192, m2=4096, m1=3000)
        with pytest.raises(ValueError):
            NetworkConfig(k=2048, n_in=8192)

    def test_roundtrip(self):
        doc = TOY.to_dict()
        assert NetworkConfig.from_dict(doc) == TOY


class TestEdgeFeatures:
    def test_identity_map_concat_arithmetic(self):
        feats = Tensor(np.array([[1.0, 0.0], [3.0, 0.0]]))
        layer = EdgeConvLayer(
            weight=ad.parameter(np.eye(4), dtype=np.float64),
            gamma=ad.parameter(np.ones(4)), beta=ad.parameter(np.zeros(4)),
            bn=None,
        )
        out = edge_features(feats, np.array([[1], [0]]), layer)
        assert out.shape == (2, 1, 4)
        assert out.data[0, 0].tolist() == [1.0, 0.0, 2.0, 0.0]  # [x_i, x_j - x_i]
        assert out.data[1, 0].tolist() == [3.0, 0.0, -2.0, 0.0]

    def test_self_neighbor_zero_relative(self):
        feats = Tensor(np.array([[2.0, 5.0], [1.0, 1.0]]))
        layer = EdgeConvLayer(
            weight=ad.parameter(np.eye(4), dtype=np.float64),
            gamma=ad.parameter(np.ones(4)), beta=ad.parameter(np.zeros(4)),
            bn=None,
        )
        out = edge_features(feats, np.array([[0], [1]]), layer)
        assert out.data[0, 0].tolist() == [2.0, 5.0, 0.0, 0.0]

    def test_matches_straightline_recompute(self):
        rng = np.random.default_rng(0)
        feats_np = rng.normal(size=(10, 6))
        w = rng.normal(size=(12, 7))
        layer = EdgeConvLayer(
            weight=ad.parameter(w, dtype=np.float64),
            gamma=ad.parameter(np.ones(7)), beta=ad.parameter(np.zeros(7)),
            bn=None,
        )
        nbrs = knn(feats_np, 3)
        out = edge_features(Tensor(feats_np), nbrs, layer)
        for i in range(10):
            for jj, j in enumerate(nbrs[i]):
                edge = np.concatenate([feats_np[i], feats_np[j] - feats_np[i]])
                assert np.allclose(out.data[i, jj], edge @ w)


class TestDgcfeLayer:
    def test_k1_single_edge_passthrough(self):
        rng = np.random.default_rng(1)
        layer = EdgeConvLayer.create(rng, 3, 5, dtype=np.float64)
        pts = rng.normal(size=(6, 3))
        out = dgcfe_layer(Tensor(pts), 1, layer, training=True, update_running=False)
        # with one neighbor the max equals that single edge feature
        nbrs = knn(pts, 1)
        edges = edge_features(Tensor(pts), nbrs, layer)
        expected = ad.relu(ad.batch_norm(ad.reduce_max(edges, axis=1), layer.gamma,
                                         layer.beta, layer.bn, training=True,
                                         update_running=False))
        assert np.allclose(out.data, expected.data)

    def test_max_is_neighbor_order_invariant(self):
        rng = np.random.default_rng(2)
        layer = EdgeConvLayer.create(rng, 3, 4, dtype=np.float64)
        pts = rng.normal(size=(8, 3))
        nbrs = knn(pts, 3)
        e1 = ad.reduce_max(edge_features(Tensor(pts), nbrs, layer), axis=1)
        e2 = ad.reduce_max(edge_features(Tensor(pts), nbrs[:, ::-1].copy(), layer), axis=1)
        assert np.allclose(e1.data, e2.data)

    def test_k_too_large_rejected(self):
        rng = np.random.default_rng(3)
        layer = EdgeConvLayer.create(rng, 3, 4)
        with pytest.raises(ValueError):
            dgcfe_layer(Tensor(np.zeros((4, 3))), 4, layer, training=True)


class TestEncoder:
    def test_latent_width(self):
        rng = np.random.default_rng(4)
        gw = init_generator(TOY, rng)
        pts = rng.random((TOY.n_in, 3))
        v = mrdg_encode(pts, gw, TOY, training=True, update_running=False)
        assert v.shape == (TOY.latent_total,)

    def test_wrong_point_count_rejected(self):
        rng = np.random.default_rng(5)
        gw = init_generator(TOY, rng)
        with pytest.raises(ValueError):
            mrdg_encode(rng.random((TOY.n_in - 1, 3)), gw, TOY)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        gw = init_generator(TOY, rng)
        pts = rng.random((TOY.n_in, 3))
        v1 = mrdg_encode(pts, gw, TOY, training=True, update_running=False)
        perm = rng.permutation(TOY.n_in)
        v2 = mrdg_encode(pts[perm], gw, TOY, training=True, update_running=False)
        assert np.allclose(v1.data, v2.data, rtol=1e-5, atol=1e-6)


class TestDecoder:
    def test_output_shapes(self):
        rng = np.random.default_rng(7)
        gw = init_generator(TOY, rng)
        v = Tensor(rng.random(TOY.latent_total).astype(np.float32))
        coarse, middle, fine = ppd_decode(v, gw, TOY)
        assert coarse.shape == (TOY.m1, 3)
        assert middle.shape == (TOY.m2, 3)
        assert fine.shape == (TOY.m_out, 3)

    def test_production_decoder_sizes(self):
        assert (PAPER.m1, PAPER.m2, PAPER.m_out) == (2048, 4096, 8192)
        # construction check at toy point counts with the production ratios
        cfg = NetworkConfig(k=4, layer_dims=(4, 8), n_in=32, m_out=32, m1=8, m2=16)
        rng = np.random.default_rng(8)
        gw = init_generator(cfg, rng)
        v = Tensor(rng.random(cfg.latent_total).astype(np.float32))
        coarse, middle, fine = ppd_decode(v, gw, cfg)
        assert (coarse.shape[0], middle.shape[0], fine.shape[0]) == (8, 16, 32)

    def test_zero_offsets_children_coincide_with_parents(self):
        cfg = NetworkConfig(k=3, layer_dims=(4, 8), n_in=16, m_out=16, m1=4, m2=8)
        rng = np.random.default_rng(9)
        gw = init_generator(cfg, rng)
        gw.head_middle.weight.data[:] = 0
        gw.head_middle.bias.data[:] = 0
        v = Tensor(rng.random(cfg.latent_total).astype(np.float32))
        coarse, middle, _ = ppd_decode(v, gw, cfg)
        children = middle.data.reshape(cfg.m1, cfg.m2 // cfg.m1, 3)
        for parent_i in range(cfg.m1):
            for child in children[parent_i]:
                assert np.allclose(child, coarse.data[parent_i])

    def test_child_parent_bookkeeping(self):
        cfg = NetworkConfig(k=3, layer_dims=(4, 8), n_in=16, m_out=16, m1=4, m2=8)
        rng = np.random.default_rng(10)
        gw = init_generator(cfg, rng)
        v = Tensor(rng.random(cfg.latent_total).astype(np.float32))
        coarse, middle, fine = ppd_decode(v, gw, cfg)
        assert cfg.m2 // cfg.m1 == 2 and cfg.m_out // cfg.m2 == 2
        # middle children = coarse parent + offset, so differences of
        # sibling pairs equal offset differences (parent cancels)
        offs = middle.data.reshape(cfg.m1, 2, 3) - coarse.data[:, None, :]
        assert np.isfinite(offs).all()

    def test_wrong_latent_rejected(self):
        rng = np.random.default_rng(11)
        gw = init_generator(TOY, rng)
        with pytest.raises(ValueError):
            ppd_decode(Tensor(np.zeros(TOY.latent_total + 1, dtype=np.float32)), gw, TOY)


class TestDiscriminator:
    def test_default_latent_is_448(self):
        assert PAPER.disc_latent == 64 + 128 + 256

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(12)
        dw = init_discriminator(TOY, rng)
        for _ in range(5):
            p = discriminator_forward(rng.random((64, 3)), dw, TOY,
                                      training=True, update_running=False)
            assert p.shape == (1,)
            assert 0.0 < p.data[0] < 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        dw = init_discriminator(TOY, rng)
        cloud = rng.random((64, 3))
        p1 = discriminator_forward(cloud, dw, TOY, training=True, update_running=False)
        p2 = discriminator_forward(cloud, dw, TOY, training=True, update_running=False)
        assert p1.data[0] == p2.data[0]


class TestGeneratorForward:
    def test_end_to_end_shapes(self):
        rng = np.random.default_rng(14)
        gw = init_generator(TOY, rng)
        pts = rng.random((TOY.n_in, 3))
        coarse, middle, fine = generator_forward(pts, gw, TOY, training=True,
                                                 update_running=False)
        assert fine.shape == (TOY.m_out, 3)
        assert np.isfinite(fine.data).all()
