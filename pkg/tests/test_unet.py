import hashlib
import math

import numpy as np
import pytest

from encprop import analysis
from encprop import schedule as sch
from encprop import tensor_core as tc
from encprop import unet

TINY = unet.UNetConfig(data_dim=2, stage_widths=(8, 4), bottleneck_width=4, time_embed_dim=8, seed=0)


@pytest.fixture(scope="module")
def s():
    return sch.make_linear_schedule()


@pytest.fixture(scope="module")
def params():
    return unet.init_params(unet.UNetConfig())


def rand_latent(rng, n, cfg=None):
    d = (cfg or unet.UNetConfig()).data_dim
    return tc.tensor(rng.standard_normal((n, d)))


class TestConfig:
    def test_default_values(self):
        cfg = unet.UNetConfig()
        assert cfg.data_dim == 2
        assert cfg.stage_widths == (64, 32, 16)
        assert cfg.bottleneck_width == 16
        assert cfg.time_embed_dim == 16

    def test_validation(self):
        with pytest.raises(ValueError):
            unet.UNetConfig(stage_widths=(8,))
        with pytest.raises(ValueError):
            unet.UNetConfig(stage_widths=(8, 1))
        with pytest.raises(ValueError):
            unet.UNetConfig(time_embed_dim=7)


class TestInitParams:
    def test_same_seed_bit_identical(self):
        a = unet.init_params(TINY)
        b = unet.init_params(TINY)
        for name in a.weights:
            assert np.array_equal(a.weights[name].data, b.weights[name].data)

    def test_different_seeds_differ(self):
        a = unet.init_params(TINY)
        b = unet.init_params(unet.UNetConfig(stage_widths=(8, 4), bottleneck_width=4, time_embed_dim=8, seed=1))
        assert any(
            not np.array_equal(a.weights[n].data, b.weights[n].data) for n in a.weights
        )

    def test_parameter_count_matches_shape_enumeration(self):
        # Independent closed-form enumeration over the declared layer shapes.
        cfg = unet.UNetConfig()
        widths = list(cfg.stage_widths)
        ted = cfg.time_embed_dim
        expected = cfg.data_dim * widths[0] + widths[0]
        prev = widths[0]
        for w in widths:
            expected += prev * w + w + ted * w
            prev = w
        expected += widths[-1] * cfg.bottleneck_width + cfg.bottleneck_width
        expected += ted * cfg.bottleneck_width
        inc = cfg.bottleneck_width
        for i in range(len(widths)):
            w = widths[len(widths) - 1 - i]
            expected += (w + inc) * w + w + ted * w
            inc = w
        expected += widths[0] * cfg.data_dim + cfg.data_dim
        counts = unet.parameter_counts(cfg)
        p = unet.init_params(cfg)
        actual = sum(t.size for t in p.weights.values())
        assert actual == expected
        assert counts["total"] == expected

    def test_biases_start_at_zero(self):
        p = unet.init_params(TINY)
        assert np.all(p.weights["lift.b"].data == 0.0)
        assert np.all(p.weights["enc0.b"].data == 0.0)

    def test_glorot_bounds(self):
        p = unet.init_params(unet.UNetConfig())
        w = p.weights["enc0.w"].data
        bound = math.sqrt(6.0 / (64 + 64))
        assert np.max(np.abs(w)) <= bound


class TestTimeEmbedding:
    def test_components_bounded(self):
        for t in (1, 17, 50):
            e = unet.time_embedding(t, 16, 50)
            assert np.all(np.abs(e.data) <= 1.0)

    def test_first_pair_is_plain_sin_cos(self):
        e = unet.time_embedding(7, 16, 50).data[0]
        assert e[0] == pytest.approx(math.sin(7), rel=1e-15)
        assert e[1] == pytest.approx(math.cos(7), rel=1e-15)

    def test_l2_distance_matches_direct_evaluation(self):
        # Independent evaluation of the embedding formula, frozen ahead of time.
        e1 = unet.time_embedding(1, 16, 50)
        e2 = unet.time_embedding(2, 16, 50)
        d = float(np.linalg.norm(e1.data - e2.data))
        assert d == pytest.approx(1.0147253387124022, rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            unet.time_embedding(0, 16, 50)
        with pytest.raises(ValueError):
            unet.time_embedding(51, 16, 50)


class TestEncode:
    def test_output_shapes_match_stage_widths(self, params, s):
        rng = np.random.default_rng(0)
        z = rand_latent(rng, 5)
        t_emb = unet.time_embedding(10, 16, s.T)
        cache = unet.encode(z, t_emb, params, 10)
        assert [sk.shape for sk in cache.skips] == [(5, 64), (5, 32), (5, 16)]
        assert cache.bot.shape == (5, 16)
        assert cache.source_key_t == 10

    def test_pure(self, params, s):
        rng = np.random.default_rng(1)
        z = rand_latent(rng, 3)
        t_emb = unet.time_embedding(5, 16, s.T)
        a = unet.encode(z, t_emb, params)
        b = unet.encode(z, t_emb, params)
        for x, y in zip(a.skips, b.skips):
            assert np.array_equal(x.data, y.data)
        assert np.array_equal(a.bot.data, b.bot.data)

    def test_every_stage_sees_time(self, params, s):
        rng = np.random.default_rng(2)
        z = rand_latent(rng, 4)
        a = unet.encode(z, unet.time_embedding(3, 16, s.T), params)
        b = unet.encode(z, unet.time_embedding(40, 16, s.T), params)
        for x, y in zip(a.skips, b.skips):
            assert np.max(np.abs(x.data - y.data)) > 0.0
        assert np.max(np.abs(a.bot.data - b.bot.data)) > 0.0

    def test_wrong_width_rejected(self, params):
        t_emb = unet.time_embedding(1, 16, 50)
        with pytest.raises(tc.ShapeError):
            unet.encode(tc.tensor(np.ones((2, 3))), t_emb, params)


class TestDecode:
    def test_eps_width(self, params, s):
        rng = np.random.default_rng(3)
        cache = unet.encode(rand_latent(rng, 6), unet.time_embedding(9, 16, s.T), params)
        eps, feats = unet.decode(cache, unet.time_embedding(9, 16, s.T), params)
        assert eps.shape == (6, 2)
        assert [f.shape for f in feats] == [(6, 16), (6, 32), (6, 64)]

    def test_time_reaches_decoder(self, params, s):
        rng = np.random.default_rng(4)
        cache = unet.encode(rand_latent(rng, 4), unet.time_embedding(20, 16, s.T), params)
        e1, _ = unet.decode(cache, unet.time_embedding(20, 16, s.T), params)
        e2, _ = unet.decode(cache, unet.time_embedding(21, 16, s.T), params)
        assert np.max(np.abs(e1.data - e2.data)) > 0.0

    def test_latent_independence(self, params, s):
        # The decoder's only inputs are the cache, the embedding, and the
        # weights; whatever the sampler does to its latent cannot reach it.
        rng = np.random.default_rng(5)
        t_emb = unet.time_embedding(12, 16, s.T)
        cache = unet.encode(rand_latent(rng, 4), t_emb, params)
        eps_before, _ = unet.decode(cache, t_emb, params)
        _ = rand_latent(rng, 4)  # sampler-side latent churn
        eps_after, _ = unet.decode(cache, t_emb, params)
        assert np.array_equal(eps_before.data, eps_after.data)

    def test_no_dead_skip(self, params, s):
        rng = np.random.default_rng(6)
        t_emb = unet.time_embedding(30, 16, s.T)
        cache = unet.encode(rand_latent(rng, 4), t_emb, params)
        eps_ref, _ = unet.decode(cache, t_emb, params)
        for i in range(len(cache.skips)):
            zeroed = list(cache.skips)
            zeroed[i] = tc.zeros(cache.skips[i].shape)
            cache_z = unet.EncoderCache(source_key_t=None, skips=tuple(zeroed), bot=cache.bot)
            eps_z, _ = unet.decode(cache_z, t_emb, params)
            assert tc.frobenius_norm(tc.sub(eps_z, eps_ref)) > 0.0


class TestForward:
    def test_composition_identity(self, params, s):
        rng = np.random.default_rng(7)
        z = rand_latent(rng, 5)
        t = 14
        fb = unet.forward(z, t, params, s)
        t_emb = unet.time_embedding(t, 16, s.T)
        cache = unet.encode(z, t_emb, params, t)
        eps, feats = unet.decode(cache, t_emb, params)
        assert np.array_equal(fb.eps.data, eps.data)
        for a, b in zip(fb.enc, cache.skips):
            assert np.array_equal(a.data, b.data)
        for a, b in zip(fb.dec, feats):
            assert np.array_equal(a.data, b.data)

    def test_bundle_records_t(self, params, s):
        rng = np.random.default_rng(8)
        fb = unet.forward(rand_latent(rng, 2), 33, params, s)
        assert fb.t == 33

    def test_flops_split_decoder_exceeds_encoder(self):
        macs = analysis.component_macs(unet.UNetConfig())
        assert macs["decoder"] > macs["encoder"]
        assert macs["decoder"] / macs["encoder"] > 1.0


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        p = unet.init_params(TINY)
        path = str(tmp_path / "ckpt.json")
        unet.save_params(p, path)
        q = unet.load_params(path)
        assert q.cfg == p.cfg
        for name in p.weights:
            assert np.array_equal(p.weights[name].data, q.weights[name].data)

    def test_file_hash_stable_across_saves(self, tmp_path):
        p = unet.init_params(TINY)
        h = []
        for name in ("a.json", "b.json"):
            path = str(tmp_path / name)
            unet.save_params(p, path)
            h.append(hashlib.sha256(open(path, "rb").read()).hexdigest())
        assert h[0] == h[1]

    def test_rejects_foreign_format(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError):
            unet.load_params(str(path))
