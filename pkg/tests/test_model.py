import numpy as np
import pytest

from gesturelab import ndgrad as nd
from gesturelab.audio import AudioFeature, N_MELS
from gesturelab.kinematics import canonical_skeleton
from gesturelab.model import (
    ABLATIONS,
    LatentCode,
    ModelConfig,
    ModelError,
    channels_to_motion,
    decode,
    encode_audio,
    encode_motion,
    generate,
    init_params,
    map_noise,
    motion_to_channels,
    reparameterize,
    sample_specific_code,
)


@pytest.fixture(scope="module")
def params():
    return init_params(ModelConfig(), np.random.default_rng(0), canonical_skeleton())


def feature(t, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return AudioFeature(scale * rng.standard_normal((N_MELS, t)), 30.0)


def receptive_field(cfg):
    # lift k + blocks * 2 convs of k + 1x1 head, each adding (k-1)/2 per side
    return (cfg.kernel - 1) // 2 * (1 + 2 * cfg.blocks)


class TestConfig:
    def test_ablation_table(self):
        assert list(ABLATIONS) == ["baseline", "split", "mapping", "bicycle", "diversity"]
        assert not ABLATIONS["baseline"]["split"]
        assert ABLATIONS["split"]["split"] and not ABLATIONS["split"]["mapping_net"]
        assert ABLATIONS["diversity"] == dict(
            split=True, mapping_net=True, bicycle=True, diversity=True
        )

    def test_with_ablation_round_trip(self):
        cfg = ModelConfig()
        for name in ABLATIONS:
            assert cfg.with_ablation(name).ablation_name() == name
        with pytest.raises(ModelError):
            cfg.with_ablation("nope")

    def test_hidden_floor(self):
        with pytest.raises(ModelError):
            ModelConfig(hidden=16)  # < 2 * code_dim with split on
        ModelConfig(hidden=16, split=False, mapping_net=False, bicycle=False, diversity=False)

    def test_pose_dim(self):
        assert ModelConfig().pose_dim == 48
        assert ModelConfig(mode="2d", joints=10).pose_dim == 20


class TestReparameterize:
    def test_deterministic_under_fixed_noise(self):
        rng = np.random.default_rng(1)
        mean = nd.Tensor(rng.standard_normal((16, 5)))
        lv = nd.Tensor(rng.uniform(-1, 1, (16, 5)))
        noise = rng.standard_normal((16, 5))
        a = reparameterize(mean, lv, noise=noise).sample.data
        b = reparameterize(mean, lv, noise=noise).sample.data
        assert np.array_equal(a, b)

    def test_sample_statistics(self):
        mean = nd.Tensor(np.full((1, 10000), 0.7))
        lv = nd.Tensor(np.full((1, 10000), np.log(0.25)))
        code = reparameterize(mean, lv, rng=np.random.default_rng(2))
        s = code.sample.data
        assert abs(s.mean() - 0.7) < 0.05 * 0.7 + 0.02
        assert abs(s.var() - 0.25) < 0.05 * 0.25

    def test_no_sampling_returns_mean(self):
        mean = nd.Tensor(np.ones((16, 4)))
        code = reparameterize(mean, nd.Tensor(np.zeros((16, 4))), sample=False)
        assert code.sample is mean


class TestEncoders:
    def test_audio_code_shape(self, params):
        code = encode_audio(params, feature(20), sample=False)
        assert code.mean.shape == (16, 20)
        assert code.log_var.shape == (16, 20)

    def test_zero_feature_zero_head_gives_zero_mean(self):
        p = init_params(ModelConfig(), np.random.default_rng(3), canonical_skeleton())
        p.tensors["audio_enc.out.w"].data[...] = 0.0
        p.tensors["audio_enc.out.b"].data[...] = 0.0
        code = encode_audio(p, AudioFeature(np.zeros((N_MELS, 10)), 30.0), sample=False)
        assert np.all(code.mean.data == 0.0)

    def test_bin_count_checked(self, params):
        with pytest.raises(ModelError):
            encode_audio(params, nd.Tensor(np.zeros((32, 10))), sample=False)

    def test_time_shift_equivariance_interior(self, params):
        rng = np.random.default_rng(4)
        t, k = 60, 7
        base = rng.standard_normal((N_MELS, t))
        shifted = np.roll(base, k, axis=1)
        c0 = encode_audio(params, nd.Tensor(base), sample=False).mean.data
        c1 = encode_audio(params, nd.Tensor(shifted), sample=False).mean.data
        rf = receptive_field(params.config)
        lo, hi = rf + k, t - rf
        assert np.abs(c1[:, lo:hi] - c0[:, lo - k : hi - k]).max() < 1e-6

    def test_motion_split_codes(self, params):
        rng = np.random.default_rng(5)
        motion = rng.standard_normal((30, 8, 6))
        s, i = encode_motion(params, motion, sample=False)
        assert s.mean.shape == (16, 30)
        assert i.mean.shape == (16, 30)

    def test_motion_no_split(self):
        cfg = ModelConfig(**ABLATIONS["baseline"])
        p = init_params(cfg, np.random.default_rng(6), canonical_skeleton())
        s, i = encode_motion(p, np.zeros((10, 8, 6)), sample=False)
        assert i is None
        assert s.mean.shape == (16, 10)

    def test_determinism(self, params):
        rng = np.random.default_rng(7)
        motion = rng.standard_normal((20, 8, 6))
        a, _ = encode_motion(params, motion, sample=False)
        b, _ = encode_motion(params, motion, sample=False)
        assert np.array_equal(a.mean.data, b.mean.data)

    def test_receptive_field_bound(self, params):
        # frames whose receptive field precedes the perturbation are unchanged
        rng = np.random.default_rng(8)
        t_cut = 40
        a = rng.standard_normal((60, 8, 6))
        b = a.copy()
        b[t_cut:] += 1.0
        ca, _ = encode_motion(params, a, sample=False)
        cb, _ = encode_motion(params, b, sample=False)
        rf = receptive_field(params.config)
        assert np.array_equal(ca.mean.data[:, : t_cut - rf], cb.mean.data[:, : t_cut - rf])
        assert not np.allclose(ca.mean.data[:, t_cut:], cb.mean.data[:, t_cut:])

    def test_joint_count_checked(self, params):
        with pytest.raises(ModelError):
            encode_motion(params, np.zeros((10, 5, 6)), sample=False)

    def test_channel_round_trip(self):
        rng = np.random.default_rng(9)
        motion = rng.standard_normal((2, 12, 8, 6))
        ch = motion_to_channels(motion)
        assert ch.shape == (2, 48, 12)
        back = channels_to_motion(ch, 8, 6)
        assert np.array_equal(back.data, motion)


class TestSpecificCode:
    def test_constant_code_collapses_to_constant(self, params):
        c = np.linspace(-1, 1, 16)[:, None] * np.ones((16, 30))
        code = LatentCode(nd.Tensor(c), nd.Tensor(np.zeros((16, 30))), nd.Tensor(c))
        before = params.var_floor_hits
        draw = sample_specific_code(params, code, 30, np.random.default_rng(10))
        assert np.abs(draw.data - c).max() < 1e-4
        assert params.var_floor_hits > before

    def test_fixed_seed_identical(self, params):
        rng = np.random.default_rng(11)
        vals = rng.standard_normal((16, 40))
        code = LatentCode(nd.Tensor(vals), nd.Tensor(np.zeros((16, 40))), nd.Tensor(vals))
        a = sample_specific_code(params, code, 40, np.random.default_rng(5)).data
        b = sample_specific_code(params, code, 40, np.random.default_rng(5)).data
        assert np.array_equal(a, b)

    def test_draws_match_fitted_gaussian(self, params):
        rng = np.random.default_rng(12)
        t = 64
        vals = rng.standard_normal((16, t))
        code = LatentCode(nd.Tensor(vals), nd.Tensor(np.zeros((16, t))), nd.Tensor(vals))
        ch_mean = vals.mean(axis=1)
        ch_std = vals.std(axis=1)
        draws = []
        for trial in range(400):
            draw = sample_specific_code(params, code, t, np.random.default_rng(trial)).data
            # each draw is one value per channel held constant over time
            assert np.allclose(draw, draw[:, :1])
            draws.append(draw[:, 0])
        draws = np.stack(draws)
        # across draws each channel follows the fitted per-channel Gaussian
        assert np.all(np.abs(draws.mean(axis=0) - ch_mean) <= 4 * ch_std / np.sqrt(400))
        assert np.all(np.abs(draws.std(axis=0) - ch_std) <= 0.2 * ch_std)

    def test_untrained_inference_raises(self, params):
        assert params.running_count == 0
        with pytest.raises(ModelError):
            sample_specific_code(params, None, 10, np.random.default_rng(0))

    def test_inference_uses_running_stats(self, params):
        params.running_count = 1
        params.running_mean = np.full(16, 2.0)
        params.running_var = np.full(16, 1e-12)
        try:
            draw = sample_specific_code(params, None, 25, np.random.default_rng(13))
            assert np.abs(draw.data - 2.0).max() < 1e-4
        finally:
            params.running_count = 0


class TestMapNoise:
    def test_identity_when_disabled(self):
        cfg = ModelConfig(**ABLATIONS["split"])
        p = init_params(cfg, np.random.default_rng(14), canonical_skeleton())
        noise = nd.Tensor(np.random.default_rng(15).standard_normal((16, 20)))
        out, bottleneck = map_noise(p, noise)
        assert out is noise
        assert bottleneck is None

    def test_deterministic_without_sampling(self, params):
        noise = np.random.default_rng(16).standard_normal((16, 20))
        a, _ = map_noise(params, nd.Tensor(noise), sample=False)
        b, _ = map_noise(params, nd.Tensor(noise), sample=False)
        assert np.array_equal(a.data, b.data)

    def test_distinct_inputs_distinct_outputs(self, params):
        rng = np.random.default_rng(17)
        a, _ = map_noise(params, nd.Tensor(rng.standard_normal((16, 20))), sample=False)
        b, _ = map_noise(params, nd.Tensor(rng.standard_normal((16, 20))), sample=False)
        assert np.abs(a.data - b.data).mean() > 0.0

    def test_bottleneck_carries_kl_stats(self, params):
        noise = np.random.default_rng(18).standard_normal((16, 20))
        out, bottleneck = map_noise(params, nd.Tensor(noise), sample=False)
        assert bottleneck.mean.shape == (16, 20)
        assert out.shape == (16, 20)

    def test_channel_check(self, params):
        with pytest.raises(ModelError):
            map_noise(params, nd.Tensor(np.zeros((8, 20))))


class TestDecode:
    def test_shape_and_determinism(self, params):
        rng = np.random.default_rng(19)
        s = nd.Tensor(rng.standard_normal((16, 25)))
        i = nd.Tensor(rng.standard_normal((16, 25)))
        a = decode(params, s, i)
        assert a.shape == (25, 8, 6)
        b = decode(params, s, i)
        assert np.array_equal(a.data, b.data)

    def test_frame_mismatch(self, params):
        with pytest.raises(ModelError):
            decode(params, nd.Tensor(np.zeros((16, 10))), nd.Tensor(np.zeros((16, 11))))

    def test_split_requires_specific_code(self, params):
        with pytest.raises(ModelError):
            decode(params, nd.Tensor(np.zeros((16, 10))))

    def test_baseline_single_code(self):
        cfg = ModelConfig(**ABLATIONS["baseline"])
        p = init_params(cfg, np.random.default_rng(20), canonical_skeleton())
        out = decode(p, nd.Tensor(np.zeros((16, 10))))
        assert out.shape == (10, 8, 6)

    def test_different_specific_codes_differ(self, params):
        rng = np.random.default_rng(21)
        s = nd.Tensor(rng.standard_normal((16, 15)))
        a = decode(params, s, nd.Tensor(rng.standard_normal((16, 15))))
        b = decode(params, s, nd.Tensor(rng.standard_normal((16, 15))))
        assert np.abs(a.data - b.data).mean() > 0.0


class TestGenerate:
    def test_untrained_raises(self, params):
        with pytest.raises(ModelError):
            generate(params, feature(20), seed=0)

    def test_seeded_generation(self, params):
        params.running_count = 1
        params.running_mean = np.zeros(16)
        params.running_var = np.ones(16)
        try:
            feat = feature(33)
            a = generate(params, feat, seed=7)
            b = generate(params, feat, seed=7)
            c = generate(params, feat, seed=8)
            assert a.frames == 33
            assert a.mode == "3d" and a.skeleton is not None
            assert np.array_equal(a.data, b.data)
            assert not np.array_equal(a.data, c.data)
        finally:
            params.running_count = 0
