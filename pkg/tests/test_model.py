import json

import numpy as np
import pytest

from sammp import autodiff as ad
from sammp import model as M
from sammp.autodiff import ParameterSet, Tensor
from sammp.errors import ConfigError, DimensionError
from sammp.losses import mixture_nll_tensor

DESK = M.ModelConfig.desk()


@pytest.fixture(scope="module")
def params():
    return M.init_params(DESK, seed=3)


def random_history(rng, n_veh, n_hist=16, batch=()):
    start = rng.uniform(-30, 30, batch + (n_veh, 1, 2))
    vel = rng.uniform(-1, 6, batch + (n_veh, 1, 2)) * np.array([1.0, 0.1])
    t = np.arange(n_hist)[:, None] * 0.2
    return start + vel * t + rng.normal(0, 0.05, batch + (n_veh, n_hist, 2))


class TestConfig:
    def test_defaults(self):
        cfg = M.ModelConfig()
        assert (cfg.d_feat, cfg.n_heads, cfg.d_k, cfg.n_mix, cfg.n_pred, cfg.decoder_hidden) == (128, 8, 16, 6, 25, 128)
        assert cfg.sigma_min == 0.1

    def test_invalid(self):
        with pytest.raises(ConfigError):
            M.ModelConfig(d_feat=30, n_heads=8)
        with pytest.raises(ConfigError):
            M.ModelConfig(n_mix=0)
        with pytest.raises(ConfigError):
            M.ModelConfig(sigma_min=0.0)
        with pytest.raises(ConfigError):
            M.ModelConfig(anchor="kalman")

    def test_dict_round_trip(self):
        assert M.ModelConfig.from_dict(DESK.to_dict()) == DESK
        with pytest.raises(ConfigError):
            M.ModelConfig.from_dict({"d_model": 4})


class TestEncode:
    @pytest.mark.parametrize("n_veh", [1, 7, 30])
    def test_shape(self, params, n_veh):
        h = M.encode(random_history(np.random.default_rng(0), n_veh), params, DESK)
        assert h.shape == (n_veh, DESK.d_feat)

    def test_full_width(self):
        cfg = M.ModelConfig(n_mix=2)
        p = M.init_params(cfg)
        assert M.encode(random_history(np.random.default_rng(0), 2), p, cfg).shape == (2, 128)

    def test_permutation_and_duplicates(self, params):
        rng = np.random.default_rng(1)
        hist = random_history(rng, 5)
        hist[3] = hist[1]
        perm = rng.permutation(5)
        h = M.encode(hist, params, DESK).data
        np.testing.assert_array_equal(h[1], h[3])
        np.testing.assert_allclose(M.encode(hist[perm], params, DESK).data, h[perm], atol=1e-14)

    def test_too_short(self, params):
        with pytest.raises(DimensionError):
            M.encode(np.zeros((2, 2, 2)), params, DESK)


class TestAttention:
    def test_single_vehicle(self, params):
        layer = M.AttentionLayer(params, "attn1")
        x = Tensor(np.random.default_rng(0).normal(size=(1, DESK.d_feat)))
        out, att = M.self_attention(x, layer)
        np.testing.assert_array_equal(att.data, np.ones((DESK.n_heads, 1, 1)))
        v = np.concatenate([x.data @ layer.Lv.data[h] for h in range(DESK.n_heads)], axis=-1)
        np.testing.assert_allclose(out.data, x.data + v @ layer.W.data + layer.b.data, atol=1e-13)

    def test_identical_features_uniform(self, params):
        x = Tensor(np.tile(np.random.default_rng(0).normal(size=(1, DESK.d_feat)), (4, 1)))
        _, att = M.self_attention(x, M.AttentionLayer(params, "attn1"))
        np.testing.assert_allclose(att.data, 0.25, atol=1e-15)

    def test_sharpening(self, params):
        x = Tensor(np.random.default_rng(0).normal(size=(5, DESK.d_feat)))
        layer = M.AttentionLayer(params, "attn1")
        _, att = M.self_attention(x, layer)
        sharp = M.AttentionLayer(params.copy(), "attn1")
        sharp.Lq = Tensor(layer.Lq.data * 10)
        _, att_sharp = M.self_attention(x, sharp)
        assert np.all(att_sharp.data.max(axis=-1) >= att.data.max(axis=-1) - 1e-12)
        assert att_sharp.data.max(axis=-1).mean() > att.data.max(axis=-1).mean()

    def test_rows_stochastic(self, params):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 6, DESK.d_feat)))
        _, att = M.self_attention(x, M.AttentionLayer(params, "attn1"))
        assert att.shape == (3, DESK.n_heads, 6, 6)
        np.testing.assert_allclose(att.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_per_step_equals_slices(self, params):
        rng = np.random.default_rng(2)
        seq = Tensor(rng.normal(size=(4, 6, DESK.d_feat)))
        layer = M.AttentionLayer(params, "attn2")
        out, att = M.per_step_attention(seq, layer)
        assert att.shape == (6, DESK.n_heads, 4, 4)
        for t in range(6):
            o_t, a_t = M.self_attention(Tensor(seq.data[:, t]), layer)
            np.testing.assert_allclose(out.data[:, t], o_t.data, atol=1e-13)
            np.testing.assert_allclose(att.data[t], a_t.data, atol=1e-15)


class TestExtendedAttention:
    def test_empty_reduces_bitwise(self, params):
        layer = M.AttentionLayer(params, "attn1")
        ext = M.init_extension_params(DESK)
        x = Tensor(np.random.default_rng(0).normal(size=(4, DESK.d_feat)))
        a, _ = M.self_attention(x, layer)
        b, _ = M.extended_attention(x, layer, Tensor(np.zeros((0, DESK.d_feat))), ext)
        assert a.data.tobytes() == b.data.tobytes()

    def test_huge_key_match_concentrates(self, params):
        layer = M.AttentionLayer(params, "attn1")
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, DESK.d_feat)))
        # make keys of the external item align with every query
        d, H, dk = DESK.d_feat, DESK.n_heads, DESK.d_k
        ext = ParameterSet({"Lk_ext": np.zeros((H, d, dk)), "Lv_ext": rng.normal(size=(H, d, dk))})
        item = rng.normal(size=(1, d))
        for h in range(H):
            q_mean = (x.data @ layer.Lq.data[h]).mean(axis=0)
            ext["Lk_ext"].data[h] = 200.0 * np.outer(item[0], q_mean) / (item[0] @ item[0])
        _, att = M.extended_attention(x, layer, Tensor(item), ext)
        assert att.shape == (H, 3, 4)
        np.testing.assert_allclose(att.data.sum(axis=-1), 1.0, atol=1e-12)
        assert att.data[..., 3].mean() > 0.9

    def test_dim_mismatch(self, params):
        with pytest.raises(DimensionError):
            M.extended_attention(Tensor(np.zeros((2, DESK.d_feat))), M.AttentionLayer(params, "attn1"),
                                 Tensor(np.zeros((1, 5))), M.init_extension_params(DESK))


class TestPredictAndDecode:
    def test_unroll_shape_and_base_case(self, params):
        z = Tensor(np.random.default_rng(0).normal(size=(3, DESK.d_feat)))
        assert M.predict_unroll(z, 25, params).shape == (3, 25, DESK.d_feat)
        one = M.predict_unroll(z, 1, params)
        h, _ = ad.lstm_cell(z, params.scope("predictor.lstm"),
                            Tensor(np.zeros((3, DESK.d_feat))), Tensor(np.zeros((3, DESK.d_feat))))
        np.testing.assert_allclose(one.data[:, 0], h.data, atol=1e-14)

    def test_decode_shape(self):
        cfg = M.ModelConfig(n_mix=6)
        p = M.init_params(cfg)
        o = M.decode(Tensor(np.zeros((2, 3, 128))), p)
        assert o.shape == (2, 3, 36)

    def test_decode_time_sharing(self, params):
        seq = np.random.default_rng(0).normal(size=(2, 5, DESK.d_feat))
        perm = np.array([4, 2, 0, 1, 3])
        a = M.decode(Tensor(seq), params).data
        b = M.decode(Tensor(seq[:, perm]), params).data
        np.testing.assert_allclose(b, a[:, perm], atol=1e-14)

    def test_decode_zero_weights_constant(self, params):
        p = params.copy()
        for name in p.scope("decoder"):
            if name.endswith("W"):
                p[f"decoder.{name}"].data[...] = 0.0
        p["decoder.out.b"].data[...] = np.arange(p["decoder.out.b"].shape[0])
        o = M.decode(Tensor(np.random.default_rng(0).normal(size=(3, 4, DESK.d_feat))), p).data
        np.testing.assert_array_equal(o, np.broadcast_to(o[0, 0], o.shape))


class TestOutputActivation:
    def test_zeros(self):
        out = M.output_activation(Tensor(np.zeros(6)), n_mix=1)
        vals = [out.mean.data[0, 0], out.mean.data[0, 1], out.sigma.data[0, 0], out.sigma.data[0, 1],
                out.rho.data[0], out.p.data[0]]
        assert vals == [0.0, 0.0, 1.0, 1.0, 0.0, 1.0]

    def test_sigma_clip(self):
        o = np.zeros(6)
        o[2] = -10.0
        out = M.output_activation(Tensor(o), n_mix=1)
        assert out.sigma.data[0, 0] == 0.1
        assert np.exp(-5) < 0.1

    def test_random_validity(self):
        rng = np.random.default_rng(0)
        o = Tensor(rng.normal(0, 20, (50, 7, 18)))
        out = M.output_activation(o, n_mix=3)
        assert np.all(out.sigma.data >= 0.1)
        assert np.all(np.abs(out.rho.data) < 1)
        assert np.all(out.p.data >= 0)
        np.testing.assert_allclose(out.p.data.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.exp(out.log_p.data), out.p.data, atol=1e-15)

    def test_wrong_width(self):
        with pytest.raises(DimensionError):
            M.output_activation(Tensor(np.zeros(7)), n_mix=1)


class TestForward:
    def test_equivariance(self, params):
        rng = np.random.default_rng(4)
        for _ in range(5):
            n = int(rng.integers(2, 9))
            hist = random_history(rng, n)
            perm = rng.permutation(n)
            a = M.predict(hist, params, DESK, n_pred=10)
            b = M.predict(hist[perm], params, DESK, n_pred=10)
            for x, y in ((a.mean, b.mean), (a.sigma, b.sigma), (a.rho, b.rho), (a.weights, b.weights)):
                np.testing.assert_allclose(y, x[perm], rtol=0, atol=1e-10)

    def test_batched_equals_single(self, params):
        rng = np.random.default_rng(5)
        hist = random_history(rng, 4, batch=(3,))
        batched = M.predict(hist, params, DESK, n_pred=5)
        for b in range(3):
            single = M.predict(hist[b], params, DESK, n_pred=5)
            np.testing.assert_allclose(batched.mean[b], single.mean, atol=1e-12)

    def test_variable_sizes(self, params):
        rng = np.random.default_rng(6)
        for n_veh in (1, 2, 13, 30):
            for n_pred in (1, 25, 50):
                fc = M.predict(random_history(rng, n_veh), params, DESK, n_pred=n_pred)
                assert fc.mean.shape == (n_veh, n_pred, DESK.n_mix, 2)
                assert np.all(fc.sigma >= DESK.sigma_min)

    def test_deterministic(self, params):
        hist = random_history(np.random.default_rng(7), 3)
        a = M.predict(hist, params, DESK)
        b = M.predict(hist, params, DESK)
        assert a.mean.tobytes() == b.mean.tobytes()

    def test_init_seeded(self):
        a, b = M.init_params(DESK, seed=1), M.init_params(DESK, seed=1)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        c = M.init_params(DESK, seed=2)
        assert not np.array_equal(a["attn1.Lq"].data, c["attn1.Lq"].data)

    def test_layer_norm_flag_runs(self):
        cfg = M.ModelConfig.desk(layer_norm=True)
        fc = M.predict(random_history(np.random.default_rng(0), 3), M.init_params(cfg), cfg, n_pred=4)
        assert np.all(np.isfinite(fc.mean))

    def test_gradients_every_group(self):
        rng = np.random.default_rng(8)
        cfg = M.ModelConfig.desk(n_pred=5)
        p = M.init_params(cfg, seed=1)
        hist = random_history(rng, 3)
        truth = hist[:, -1:, :] + rng.normal(0, 1, (3, 5, 2))

        def f():
            out = M.forward(hist, p, cfg)
            return ad.mean(mixture_nll_tensor(out.mean, out.sigma, out.rho, out.log_p, truth))

        errors = ad.gradcheck(f, dict(p), max_entries=6, rng=np.random.default_rng(0))
        assert set(errors) == set(p)
        bad = {k: v for k, v in errors.items() if v > 1e-4}
        assert not bad


class TestAnchor:
    @staticmethod
    def zero_out(cfg):
        p = M.init_params(cfg)
        p["decoder.out.W"].data[:] = 0.0
        p["decoder.out.b"].data[:] = 0.0
        return p

    def test_cv_track(self):
        cfg = M.ModelConfig.desk(anchor="cv")
        t = np.arange(16)[:, None] * 0.2
        hist = np.stack([np.hstack([3.0 + 12.0 * t, np.full_like(t, 3.5)]), np.hstack([-5.0 - 2.0 * t, 0.5 * t])])
        fc = M.predict(hist, self.zero_out(cfg), cfg, n_pred=5)
        steps = np.arange(1, 6)[:, None] * 0.2
        expected = hist[:, -1:, :] + steps * np.array([[[12.0, 0.0]], [[-2.0, 0.5]]])
        for m in range(cfg.n_mix):
            np.testing.assert_allclose(fc.mean[:, :, m], expected, atol=1e-12)

    def test_last_position(self):
        cfg = M.ModelConfig.desk(anchor="last")
        hist = random_history(np.random.default_rng(0), 3)
        fc = M.predict(hist, self.zero_out(cfg), cfg, n_pred=4)
        np.testing.assert_array_equal(fc.mean, np.broadcast_to(hist[:, -1, None, None, :], fc.mean.shape))

    def test_gradient_reaches_history(self):
        cfg = M.ModelConfig.desk(anchor="cv", n_pred=3)
        p = M.init_params(cfg, seed=2)
        rng = np.random.default_rng(1)
        hist = Tensor(random_history(rng, 2), requires_grad=True)
        truth = hist.data[:, -1:, :] + rng.normal(0, 1, (2, 3, 2))

        def f():
            out = M.forward(hist, p, cfg)
            return ad.mean(mixture_nll_tensor(out.mean, out.sigma, out.rho, out.log_p, truth))

        assert ad.gradcheck(f, {"h": hist})["h"] <= 1e-4

    def test_lateral_scale(self):
        iso = M.ModelConfig.desk(lat_scale=None)
        aniso = M.ModelConfig.desk(lat_scale=1.0)
        np.testing.assert_array_equal(aniso.axis_scale, [10.0, 1.0])
        p = M.init_params(iso, seed=4)
        hist = random_history(np.random.default_rng(2), 2)
        a = M.predict(hist, p, iso, n_pred=3)
        b = M.predict(hist * [1.0, 0.1], p, aniso, n_pred=3)
        np.testing.assert_allclose(b.mean, a.mean * [1.0, 0.1], atol=1e-12)
        np.testing.assert_allclose(b.weights, a.weights, atol=1e-15)
        with pytest.raises(ConfigError):
            M.ModelConfig(lat_scale=0.0)


class TestCheckpoint:
    def test_round_trip(self, params, tmp_path):
        M.save_checkpoint(tmp_path / "ck", params, DESK)
        loaded, cfg = M.load_checkpoint(tmp_path / "ck")
        assert cfg == DESK
        assert list(loaded) == list(params)
        for k in params:
            assert loaded[k].data.tobytes() == params[k].data.tobytes()

    def test_manifest_layout(self, params, tmp_path):
        M.save_checkpoint(tmp_path, params, DESK)
        manifest = json.loads((tmp_path / "model.json").read_text())
        entries = manifest["parameters"]
        assert [e["name"] for e in entries] == sorted(params)
        assert entries[0]["offset"] == 0
        for a, b in zip(entries, entries[1:]):
            assert b["offset"] == a["offset"] + a["nbytes"]
        assert (tmp_path / "model.bin").stat().st_size == 8 * params.num_values()

    def test_bytes_stable(self, params, tmp_path):
        M.save_checkpoint(tmp_path / "a", params, DESK)
        M.save_checkpoint(tmp_path / "b", params, DESK)
        for name in ("model.json", "model.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
