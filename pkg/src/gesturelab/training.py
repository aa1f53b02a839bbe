"""Training loop: batch assembly, the composite step, and checkpointing.

One step wires all enabled data flows: reconstruction from (S_M, I_M) and
(S_A, I_M), relaxed reconstruction from (S_A, I_R), bicycle re-encoding,
diversity between two sampled decodes, alignment, and KL on every code.
Fully deterministic under a fixed seed; checkpoints capture the RNG state
so resumed runs are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .kinematics import Skeleton, forward_kinematics
from .losses import (
    LossReport,
    LossWeights,
    alignment_loss,
    bicycle_loss,
    diversity_loss,
    kl_divergence,
    motion_reconstruction_loss,
    relaxed_motion_loss,
)
from .model import (
    ModelConfig,
    ModelParams,
    decode,
    encode_audio,
    encode_motion,
    init_params,
    map_noise,
    sample_specific_code,
)
from .optim import OptimizerState, adam_step, clip_global_norm, collect_grads


class TrainingError(Exception):
    pass


class NumericsError(TrainingError):
    """A loss term went non-finite; carries the offending term name."""


CHECKPOINT_MAGIC = b"GLCKPT1\n"


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    steps: int = 180000
    crop_frames: int = 128
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    clip_norm: float = 5.0
    running_momentum: float = 0.99
    log_every: int = 50
    checkpoint_every: int = 2000

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.crop_frames < 2:
            raise TrainingError("crop_frames must be >= 2")


def desk_preset(**overrides) -> TrainConfig:
    """Small CPU-friendly preset: 2000 steps, batch 8.

    The loss weights differ from the full-scale defaults: at 2000 steps a
    KL weight of 0.01 collapses every code channel before the decoder can
    use them, and the hinge bounds are scaled to the synthetic corpus'
    mode geometry (dead zone about a quarter of the mode gap, diversity
    bound small enough to be satisfiable inside the dead zone).  The
    learning rate is the largest at which the single-code configuration
    still converges to its one-output-per-sequence optimum; pushing it
    higher destabilizes that configuration without helping the full model.
    """
    base = dict(
        steps=2000,
        batch_size=8,
        learning_rate=1e-3,
        weights=LossWeights(kl=1e-4, rho=0.05, tau=0.03, ds=2.0, relax=4.0),
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# batches


def sample_batch(dataset, train_seqs, cfg: TrainConfig, rng):
    """Uniform sequence choice, then a uniform valid crop start."""
    if not train_seqs:
        raise TrainingError("empty training split")
    feats, motions, positions = [], [], []
    for _ in range(cfg.batch_size):
        seq = train_seqs[int(rng.integers(len(train_seqs)))]
        t = seq.motion.frames
        length = min(cfg.crop_frames, t)
        start = int(rng.integers(t - length + 1))
        feats.append(seq.feature.values[:, start : start + length])
        motions.append(seq.motion.data[start : start + length])
        positions.append(seq.positions[start : start + length])
    return {
        "feat": np.stack(feats),
        "motion": np.stack(motions),
        "positions": np.stack(positions),
    }


# ---------------------------------------------------------------------------
# the composite step


def _predicted_positions(params: ModelParams, out):
    if params.config.mode == "3d":
        return forward_kinematics(params.skeleton, out, params.degenerate_rot_hits)
    return out


def composite_objective(params: ModelParams, batch, w: LossWeights, rng):
    """Build every enabled data flow into one scalar objective.

    Returns (total, terms, i_m). Noise draws come from `rng` in a fixed
    order, so re-seeding the generator reproduces the objective exactly.
    """
    mcfg = params.config
    is3d = mcfg.mode == "3d"
    target_motion = batch["motion"]
    target_pos = batch["positions"]
    t_frames = target_motion.shape[-3]
    terms = {}
    jc = params.degenerate_rot_hits

    total = nd.Tensor(0.0)
    s_a = encode_audio(params, batch["feat"], rng)
    s_m, i_m = encode_motion(params, target_motion, rng)

    def recon(tag, s_code, i_code):
        nonlocal total
        out = decode(params, s_code, i_code)
        pos = _predicted_positions(params, out)
        loss, sub = motion_reconstruction_loss(
            out if is3d else None, pos, target_motion, target_pos, w, jc
        )
        for k, v in sub.items():
            terms[f"{tag}_{k}"] = float(v.data)
        total = nd.add(total, loss)
        return out, pos

    recon("mm", s_m.sample, i_m.sample if mcfg.split else None)

    kl_codes = {"kl_s_a": s_a, "kl_s_m": s_m}
    if mcfg.split:
        recon("am", s_a.sample, i_m.sample)
        kl_codes["kl_i_m"] = i_m

        noise1 = sample_specific_code(params, i_m, t_frames, rng)
        i_r1, bn1 = map_noise(params, noise1, rng)
        if bn1 is not None:
            kl_codes["kl_map1"] = bn1
        out_r1 = decode(params, s_a.sample, i_r1)
        pos_r1 = _predicted_positions(params, out_r1)
        relax_terms = [relaxed_motion_loss(pos_r1, nd.Tensor(target_pos), w.rho)]

        if mcfg.bicycle:
            _, i_hat = encode_motion(params, out_r1, rng)
            l_cyc = bicycle_loss(i_hat.mean, i_r1)
            terms["cyc"] = float(l_cyc.data)
            total = nd.add(total, nd.mul(l_cyc, w.cyc))

        if mcfg.diversity:
            if mcfg.diversity_literal:
                # one-sample variant: push the sampled decode away from the
                # ground truth rather than from a second sample
                l_ds = diversity_loss(pos_r1, nd.Tensor(target_pos), w.tau)
            else:
                noise2 = sample_specific_code(params, i_m, t_frames, rng)
                i_r2, bn2 = map_noise(params, noise2, rng)
                if bn2 is not None:
                    kl_codes["kl_map2"] = bn2
                out_r2 = decode(params, s_a.sample, i_r2)
                pos_r2 = _predicted_positions(params, out_r2)
                # the second sampled decode carries the same on-manifold
                # obligation as the first; leaving it unconstrained lets the
                # diversity pressure spend its budget on off-manifold motion
                relax_terms.append(
                    relaxed_motion_loss(pos_r2, nd.Tensor(target_pos), w.rho)
                )
                l_ds = diversity_loss(pos_r1, pos_r2, w.tau)
            terms["ds"] = float(l_ds.data)
            total = nd.add(total, nd.mul(l_ds, w.ds))

        l_relax = relax_terms[0]
        for extra in relax_terms[1:]:
            l_relax = nd.mul(nd.add(l_relax, extra), 0.5)
        terms["relax"] = float(l_relax.data)
        total = nd.add(total, nd.mul(l_relax, w.relax))

    l_align = alignment_loss(s_a.mean, s_m.mean)
    terms["align"] = float(l_align.data)
    total = nd.add(total, nd.mul(l_align, w.align))

    for name, code in kl_codes.items():
        l_kl = kl_divergence(code)
        terms[name] = float(l_kl.data)
        total = nd.add(total, nd.mul(l_kl, w.kl))
    return total, terms, i_m


def train_step(
    params: ModelParams,
    batch,
    cfg: TrainConfig,
    opt: OptimizerState,
    rng,
) -> LossReport:
    """Run every enabled data flow, backprop, and apply one Adam update."""
    with nd.Tape() as tape:
        total, terms, i_m = composite_objective(params, batch, cfg.weights, rng)

        for name, value in terms.items():
            if not np.isfinite(value):
                raise NumericsError(f"loss term {name!r} is non-finite")
        if not np.isfinite(total.data):
            raise NumericsError("total loss is non-finite")

        report = LossReport(terms=terms, total=float(total.data), tape_ops=len(tape))
        tape.backward(total)

    grads = collect_grads(params.tensors)
    clip_global_norm(grads, cfg.clip_norm)
    adam_step(params.tensors, grads, opt, cfg.learning_rate)
    for p in params.tensors.values():
        if not np.all(np.isfinite(p.data)):
            raise NumericsError("parameter became non-finite after update")

    if params.config.split:
        _update_running_stats(params, i_m.sample.data, cfg.running_momentum)
    report.step = opt.step
    return report


def _update_running_stats(params: ModelParams, i_m_samples, momentum):
    # per-channel stats over batch and time, taken after the optimizer step
    axes = tuple(i for i in range(i_m_samples.ndim) if i != i_m_samples.ndim - 2)
    mean = i_m_samples.mean(axis=axes)
    var = i_m_samples.var(axis=axes)
    if params.running_count == 0:
        params.running_mean = mean
        params.running_var = np.maximum(var, 1e-12)
    else:
        params.running_mean = momentum * params.running_mean + (1 - momentum) * mean
        params.running_var = np.maximum(
            momentum * params.running_var + (1 - momentum) * var, 1e-12
        )
    params.running_count += 1


# ---------------------------------------------------------------------------
# the loop


def train_loop(
    dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    log_fn=None,
):
    """Train to cfg.steps; returns (params, opt). Deterministic under seed."""
    if not dataset.sequences:
        raise TrainingError("empty dataset")
    train_seqs = dataset.by_split("train")
    if not train_seqs:
        raise TrainingError("empty training split")

    rng = np.random.default_rng(cfg.seed)
    if resume_from is not None:
        params, opt, rng_state, start_step = load_checkpoint(
            resume_from, expect_config=model_cfg
        )
        rng.bit_generator.state = rng_state
    else:
        params = init_params(model_cfg, rng, dataset.skeleton, dataset.frame_rate)
        opt = OptimizerState()
        start_step = 0

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a")
    try:
        for step in range(start_step, cfg.steps):
            batch = sample_batch(dataset, train_seqs, cfg, rng)
            report = train_step(params, batch, cfg, opt, rng)
            if log_fn is not None:
                log_fn(report)
            if log_file is not None and (step + 1) % cfg.log_every == 0:
                log_file.write(report.to_json() + "\n")
                log_file.flush()
            if out is not None and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.bin", params, opt, rng, step + 1)
        if out is not None:
            save_checkpoint(out / "checkpoint.bin", params, opt, rng, cfg.steps)
    finally:
        if log_file is not None:
            log_file.close()
    return params, opt


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, opt: OptimizerState, rng, step):
    """Binary blob: JSON header + raw float64 arrays + sha256 trailer."""
    names = list(params.tensors)
    header = {
        "config": asdict(params.config),
        "skeleton": params.skeleton.to_json() if params.skeleton else None,
        "frame_rate": params.frame_rate,
        "step": int(step),
        "running_mean": params.running_mean.tolist(),
        "running_var": params.running_var.tolist(),
        "running_count": params.running_count,
        "var_floor_hits": params.var_floor_hits,
        "degenerate_rot_hits": params.degenerate_rot_hits[0],
        "opt": {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "arrays": [
            {"name": n, "shape": list(params.tensors[n].shape)} for n in names
        ],
    }
    hjson = json.dumps(header).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<Q", len(hjson))
    blob += hjson
    for n in names:
        blob += params.tensors[n].data.astype("<f8").tobytes()
        m, v = opt.moments(n, params.tensors[n].shape)
        blob += m.astype("<f8").tobytes()
        blob += v.astype("<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def load_checkpoint(path, expect_config: ModelConfig | None = None):
    """Returns (params, opt, rng_state, step); verifies checksum first."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 40 or not raw.startswith(CHECKPOINT_MAGIC):
        raise TrainingError(f"not a checkpoint file: {path}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise TrainingError("checkpoint checksum failure")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", body, off)
    off += 8
    header = json.loads(body[off : off + hlen].decode())
    off += hlen
    cfg = ModelConfig(**header["config"])
    if expect_config is not None and asdict(expect_config) != asdict(cfg):
        raise TrainingError("checkpoint config conflicts with requested config")
    skeleton = (
        Skeleton.from_json(header["skeleton"]) if header["skeleton"] else None
    )
    rng0 = np.random.default_rng(0)  # placeholder generator for initialization
    params = init_params(cfg, rng0, skeleton, header["frame_rate"])
    opt = OptimizerState(**{
        "beta1": header["opt"]["beta1"],
        "beta2": header["opt"]["beta2"],
        "eps": header["opt"]["eps"],
    })
    opt.step = header["opt"]["step"]
    for entry in header["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        for target in ("param", "m", "v"):
            if off + nbytes > len(body):
                raise TrainingError("truncated checkpoint")
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape)
            off += nbytes
            if target == "param":
                params.tensors[name].data = arr.copy()
            elif target == "m":
                opt.m[name] = arr.copy()
            else:
                opt.v[name] = arr.copy()
    params.running_mean = np.array(header["running_mean"])
    params.running_var = np.array(header["running_var"])
    params.running_count = header["running_count"]
    params.var_floor_hits = header["var_floor_hits"]
    params.degenerate_rot_hits = [header["degenerate_rot_hits"]]
    return params, opt, header["rng_state"], header["step"]
