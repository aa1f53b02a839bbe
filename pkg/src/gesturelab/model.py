"""The four networks: audio encoder, motion encoder, mapping net, decoder.

All networks are fully convolutional (stride-1, symmetric padding) so
temporal length is preserved end to end. Latent codes are per-frame
16-channel feature maps carried as (mean, log_var) pairs during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import ndgrad as nd
from .audio import AudioFeature, N_MELS
from .kinematics import MotionSequence, Skeleton
from .optim import xavier_init

LOGVAR_CLAMP = 8.0
VAR_FLOOR = 1e-12

ABLATIONS = {
    "baseline": dict(split=False, mapping_net=False, bicycle=False, diversity=False),
    "split": dict(split=True, mapping_net=False, bicycle=False, diversity=False),
    "mapping": dict(split=True, mapping_net=True, bicycle=False, diversity=False),
    "bicycle": dict(split=True, mapping_net=True, bicycle=True, diversity=False),
    "diversity": dict(split=True, mapping_net=True, bicycle=True, diversity=True),
}


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    mode: str = "3d"
    joints: int = 8
    audio_bins: int = N_MELS
    code_dim: int = 16
    hidden: int = 32
    kernel: int = 5
    blocks: int = 4
    split: bool = True
    mapping_net: bool = True
    bicycle: bool = True
    diversity: bool = True
    # measure diversity against the ground truth instead of a second sample
    diversity_literal: bool = False

    def __post_init__(self):
        if self.mode not in ("3d", "2d"):
            raise ModelError(f"unknown mode {self.mode!r}")
        if self.split and self.hidden < 2 * self.code_dim:
            raise ModelError("hidden channels must be >= 2*code_dim when split is on")
        if self.kernel % 2 == 0:
            raise ModelError("kernel size must be odd")

    @property
    def pose_dim(self):
        return self.joints * (6 if self.mode == "3d" else 2)

    def with_ablation(self, name):
        if name not in ABLATIONS:
            raise ModelError(f"unknown ablation {name!r}")
        d = asdict(self)
        d.update(ABLATIONS[name])
        return ModelConfig(**d)

    def ablation_name(self):
        for name, sw in ABLATIONS.items():
            if all(getattr(self, k) == v for k, v in sw.items()):
                return name
        return "custom"


@dataclass
class LatentCode:
    """Per-frame code as mean/log_var with a reparameterized sample."""

    mean: nd.Tensor
    log_var: nd.Tensor
    sample: nd.Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict
    running_mean: np.ndarray
    running_var: np.ndarray
    running_count: int = 0
    var_floor_hits: int = 0
    degenerate_rot_hits: list = field(default_factory=lambda: [0])
    skeleton: Skeleton | None = None
    frame_rate: float = 30.0


def _init_conv(store, name, c_in, c_out, k, rng):
    store[name + ".w"] = nd.Tensor(
        xavier_init((c_out, c_in, k), c_in * k, c_out * k, rng), requires_grad=True
    )
    store[name + ".b"] = nd.Tensor(np.zeros(c_out), requires_grad=True)


def _init_stack(store, prefix, c_in, c_out, cfg: ModelConfig, rng, blocks=None):
    h, k = cfg.hidden, cfg.kernel
    blocks = cfg.blocks if blocks is None else blocks
    _init_conv(store, f"{prefix}.lift", c_in, h, k, rng)
    for i in range(blocks):
        _init_conv(store, f"{prefix}.res{i}.a", h, h, k, rng)
        _init_conv(store, f"{prefix}.res{i}.b", h, h, k, rng)
    _init_conv(store, f"{prefix}.out", h, c_out, 1, rng)


def _apply_conv(params, name, x):
    return nd.conv1d(x, params.tensors[name + ".w"], params.tensors[name + ".b"])


def _apply_stack(params, prefix, x, blocks=None):
    cfg = params.config
    blocks = cfg.blocks if blocks is None else blocks
    x = nd.relu(_apply_conv(params, f"{prefix}.lift", x))
    for i in range(blocks):
        h = nd.relu(_apply_conv(params, f"{prefix}.res{i}.a", x))
        h = _apply_conv(params, f"{prefix}.res{i}.b", h)
        x = nd.relu(nd.add(x, h))
    return _apply_conv(params, f"{prefix}.out", x)


def init_params(cfg: ModelConfig, rng, skeleton=None, frame_rate=30.0) -> ModelParams:
    """Xavier-initialized weights for the networks the config enables."""
    store = {}
    c = cfg.code_dim
    _init_stack(store, "audio_enc", cfg.audio_bins, 2 * c, cfg, rng)
    motion_out = 4 * c if cfg.split else 2 * c
    _init_stack(store, "motion_enc", cfg.pose_dim, motion_out, cfg, rng)
    if cfg.mapping_net:
        # the mapping net is itself a small VAE: half its residual budget
        # encodes noise to a bottleneck, the other half decodes to the code
        _init_stack(store, "map_enc", c, 2 * c, cfg, rng, blocks=cfg.blocks // 2)
        _init_stack(store, "map_dec", c, c, cfg, rng, blocks=cfg.blocks - cfg.blocks // 2)
    dec_in = 2 * c if cfg.split else c
    _init_stack(store, "decoder", dec_in, cfg.pose_dim, cfg, rng)
    # log-variance output channels start strongly negative so early code
    # samples are nearly deterministic; unit-variance noise at initialization
    # drowns the code signal and drives the decoder into posterior collapse
    for prefix, n_codes in (
        ("audio_enc", 1),
        ("motion_enc", 2 if cfg.split else 1),
        ("map_enc", 1 if cfg.mapping_net else 0),
    ):
        for i in range(n_codes):
            store[f"{prefix}.out.b"].data[(2 * i + 1) * c : (2 * i + 2) * c] = -4.0
    return ModelParams(
        config=cfg,
        tensors=store,
        running_mean=np.zeros(c),
        running_var=np.ones(c),
        skeleton=skeleton,
        frame_rate=frame_rate,
    )


# ---------------------------------------------------------------------------
# code plumbing


def reparameterize(mean, log_var, rng=None, noise=None, sample=True) -> LatentCode:
    log_var = nd.clamp(log_var, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    if not sample:
        return LatentCode(mean, log_var, mean)
    if noise is None:
        noise = rng.standard_normal(mean.shape)
    eps = nd.astensor(noise)
    std = nd.exp(nd.mul(log_var, 0.5))
    return LatentCode(mean, log_var, nd.add(mean, nd.mul(std, eps)))


def _split_code(raw, n_codes, code_dim):
    """raw [..., n_codes*2*code_dim, T] -> list of (mean, log_var) pairs."""
    pairs = []
    for i in range(n_codes):
        base = 2 * i * code_dim
        mean = raw[..., base : base + code_dim, :]
        log_var = raw[..., base + code_dim : base + 2 * code_dim, :]
        pairs.append((mean, log_var))
    return pairs


def encode_audio(params: ModelParams, feat, rng=None, noise=None, sample=True):
    """S_A from a [64 x T] or [B x 64 x T] log-mel feature tensor."""
    x = feat.values if isinstance(feat, AudioFeature) else feat
    x = nd.astensor(x)
    if x.shape[-2] != params.config.audio_bins:
        raise ModelError("audio feature bin count does not match config")
    raw = _apply_stack(params, "audio_enc", x)
    (mean, log_var), = _split_code(raw, 1, params.config.code_dim)
    return reparameterize(mean, log_var, rng, noise, sample)


def motion_to_channels(motion):
    """[..., T, J, D] pose tensor -> [..., J*D, T] channel map."""
    motion = nd.astensor(motion)
    t, j, d = motion.shape[-3:]
    lead = motion.shape[:-3]
    flat = nd.reshape(motion, lead + (t, j * d))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    return nd.transpose(flat, axes)


def channels_to_motion(ch, joints, per_joint):
    ch = nd.astensor(ch)
    lead = ch.shape[:-2]
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    tj = nd.transpose(ch, axes)
    return nd.reshape(tj, lead + (ch.shape[-1], joints, per_joint))


def encode_motion(params: ModelParams, motion, rng=None, noise=None, sample=True):
    """(S_M, I_M) from pose data [T x J x D] / [B x T x J x D]; I_M is None
    when the latent split is disabled."""
    cfg = params.config
    if isinstance(motion, MotionSequence):
        motion = motion.data
    motion = nd.astensor(motion)
    if motion.shape[-2] != cfg.joints:
        raise ModelError("motion joint count does not match config")
    x = motion_to_channels(motion)
    raw = _apply_stack(params, "motion_enc", x)
    c = cfg.code_dim
    if not cfg.split:
        (m, lv), = _split_code(raw, 1, c)
        return reparameterize(m, lv, rng, noise, sample), None
    (sm, slv), (im, ilv) = _split_code(raw, 2, c)
    if noise is not None:
        ns, ni = noise
    else:
        ns = ni = None
    s_code = reparameterize(sm, slv, rng, ns, sample)
    i_code = reparameterize(im, ilv, rng, ni, sample)
    return s_code, i_code


def sample_specific_code(params: ModelParams, i_m, t, rng, noise=None):
    """Noise [.. x 16 x T] from a per-channel diagonal Gaussian.

    Training mode (i_m given): the Gaussian is fit per sample and channel to
    i_m's sample over time; the draw stays differentiable through the fitted
    mean and variance. Inference mode (i_m None): running statistics
    gathered during training parameterize the draw.
    """
    c = params.config.code_dim
    if i_m is not None:
        vals = i_m.sample
        mu = nd.mean(vals, axis=-1, keepdims=True)
        var = nd.sub(nd.mean(nd.square(vals), axis=-1, keepdims=True), nd.square(mu))
        hits = int((var.data < VAR_FLOOR).sum())
        if hits:
            params.var_floor_hits += hits
        var = nd.maximum(var, VAR_FLOOR)
        if noise is None:
            # one draw per channel held constant over time, mirroring the
            # inference path: the decoder consumes the code's sequence-level
            # component here, not per-frame jitter, so sampled decodes stay
            # inside the distribution inference will draw from
            noise = np.repeat(
                rng.standard_normal(vals.shape[:-1] + (1,)), t, axis=-1
            )
        return nd.add(mu, nd.mul(nd.sqrt(var), nd.astensor(noise)))
    if params.running_count == 0:
        raise ModelError("running latent statistics never populated (untrained model)")
    mean = params.running_mean[:, None]
    var = np.maximum(params.running_var[:, None], VAR_FLOOR)
    if noise is None:
        # one draw per channel, held constant over time: training feeds the
        # mapping net per-sequence code statistics, which are nearly constant
        # trajectories, so temporally white inference noise would be far
        # outside the distribution the mapping net was trained on
        noise = np.repeat(rng.standard_normal((c, 1)), t, axis=-1)
    return nd.Tensor(mean + np.sqrt(var) * noise)


def map_noise(params: ModelParams, noise, rng=None, sample=True):
    """(I_R, bottleneck LatentCode or None). Identity when the mapping net is off."""
    noise = nd.astensor(noise)
    if noise.shape[-2] != params.config.code_dim:
        raise ModelError("noise channel count does not match code dim")
    if not params.config.mapping_net:
        return noise, None
    raw = _apply_stack(params, "map_enc", noise, blocks=params.config.blocks // 2)
    (m, lv), = _split_code(raw, 1, params.config.code_dim)
    bottleneck = reparameterize(m, lv, rng, sample=sample)
    correction = _apply_stack(
        params, "map_dec", bottleneck.sample,
        blocks=params.config.blocks - params.config.blocks // 2,
    )
    # residual form: the net predicts a correction on the noise rather than
    # synthesizing the code outright, so the map starts near identity and
    # cannot collapse to an input-independent constant
    return nd.add(noise, correction), bottleneck


def decode(params: ModelParams, s, i=None):
    """Motion output [.. x T x J x D] from shared (and motion-specific) codes."""
    cfg = params.config
    s = nd.astensor(s)
    if cfg.split:
        if i is None:
            raise ModelError("split model requires a motion-specific code")
        i = nd.astensor(i)
        if s.shape[-1] != i.shape[-1]:
            raise ModelError("shared and specific codes disagree on frame count")
        x = nd.concat([s, i], axis=-2)
    else:
        x = s
    out = _apply_stack(params, "decoder", x)
    return channels_to_motion(out, cfg.joints, 6 if cfg.mode == "3d" else 2)


def generate(params: ModelParams, feature: AudioFeature, seed) -> MotionSequence:
    """Inference: audio -> shared code mean, seeded specific draw -> motion."""
    rng = np.random.default_rng(seed)
    s_a = encode_audio(params, feature, sample=False)
    if params.config.split:
        noise = sample_specific_code(params, None, feature.frames, rng)
        # the bottleneck stays stochastic here: training satisfies the
        # diversity pressure through this draw, so a deterministic bottleneck
        # would collapse inference onto a single motion
        i_r, _ = map_noise(params, noise, rng)
    else:
        i_r = None
    out = decode(params, s_a.sample, i_r)
    return MotionSequence(
        mode=params.config.mode,
        frame_rate=feature.frame_rate,
        data=out.data,
        skeleton=params.skeleton if params.config.mode == "3d" else None,
    )
