"""Synthetic one-to-many gesture dataset, cropping, and motion file I/O.

Each audio class has a fixed spectral signature and beat grid. Each class
carries K motion modes: beat-locked sinusoid mixtures over joint angles.
Modes of one class share the beat phase but swap which arm carries the
swing and lean to opposite sides, so their average is a symmetric middle
pose and mode identity is not recoverable from the audio alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import audio as audio_mod
from .audio import AudioClip, AudioFeature, synth_audio, log_mel
from .kinematics import MotionSequence, Skeleton, canonical_skeleton, matrix_to_rot6d


class DataError(Exception):
    pass


@dataclass
class SynthSpec:
    classes: int = 4
    modes: int = 2
    sequences_per: int = 4
    seq_seconds: float = 8.0
    frame_rate: float = 30.0
    sample_rate: int = 16000
    noise: float = 0.02  # radians of smoothed per-frame angle jitter
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2 or self.modes < 2:
            raise DataError("one-to-many needs at least 2 classes and 2 modes")
        if self.classes > len(audio_mod.AUDIO_CLASSES):
            raise DataError("not enough audio class signatures defined")


@dataclass
class SequenceRecord:
    seq_id: int
    class_id: int
    mode_id: int
    split: str
    clip: AudioClip
    feature: AudioFeature
    motion: MotionSequence
    positions: np.ndarray  # [T, J, 3] FK of the target rotations
    phase: float = 0.0  # beat-grid offset in seconds, shared by both modalities


@dataclass
class GestureDataset:
    skeleton: Skeleton
    frame_rate: float
    sequences: list
    spec: SynthSpec | None = None
    # noiseless per-(class, mode) position templates for mode recovery
    mode_templates: dict = field(default_factory=dict)

    def by_split(self, split):
        return [s for s in self.sequences if s.split == split]


# Per-joint rotation axes (unit vectors) for the synthetic trajectories.
_JOINT_AXES = np.array(
    [
        [0.0, 1.0, 0.0],  # root: twist about vertical
        [0.0, 0.0, 1.0],  # spine: lean
        [0.0, 0.0, 1.0],  # neck
        [1.0, 0.0, 0.0],  # head: nod
        [0.0, 0.0, 1.0],  # l_upper: swing
        [0.0, 0.0, 1.0],  # l_lower
        [0.0, 0.0, 1.0],  # r_upper
        [0.0, 0.0, 1.0],  # r_lower
    ]
)

# Base swing amplitudes (radians). Arms carry the mode signal.
_BASE_AMP = np.array([0.05, 0.1, 0.08, 0.15, 0.9, 0.6, 0.9, 0.6])

# Mode patterns: per-joint multipliers applied to the base amplitude. The
# two modes share the beat phase but swap which arm carries the swing, and
# lean to opposite sides, so their average is a symmetric mid pose that
# matches neither mode and the audio alone cannot reveal the mode.
_MODE_PATTERNS = [
    np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.15, 0.15]),
    np.array([1.0, 1.0, 1.0, 1.0, 0.15, 0.15, 1.0, 1.0]),
]

# Constant per-mode lean (radians) on the spine joint; opposite signs keep
# the mode average upright while giving each mode a static postural marker.
_MODE_LEAN = 0.15


def _axis_angle_matrices(axes, angles):
    """Rodrigues formula; axes [J,3], angles [T,J] -> [T,J,3,3]."""
    t, j = angles.shape
    u = np.broadcast_to(axes, (t, j, 3))
    c = np.cos(angles)[..., None, None]
    s = np.sin(angles)[..., None, None]
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    zero = np.zeros_like(ux)
    k = np.stack(
        [
            np.stack([zero, -uz, uy], axis=-1),
            np.stack([uz, zero, -ux], axis=-1),
            np.stack([-uy, ux, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), (t, j, 3, 3))
    return eye * c + s * k + (1 - c) * (u[..., :, None] * u[..., None, :])


def _beat_pulse(spec, class_id, frames, phase_frames=0.0):
    """Raised-cosine pulse train [T] on the class beat grid.

    Mirrors the amplitude envelope of the synthetic audio, so the swing
    timing is locally recoverable from the audio features.
    """
    fr = spec.frame_rate
    half = 0.075 * fr  # pulse half-width in frames, matching the audio
    t = np.arange(frames, dtype=float)
    pulse = np.zeros(frames)
    duration = frames / fr
    for bt in audio_mod.beat_times(class_id, duration, phase=phase_frames / fr):
        rel = (t - bt * fr) / half
        mask = np.abs(rel) < 1
        pulse[mask] += 0.5 * (1 + np.cos(np.pi * rel[mask]))
    return pulse


def _mode_angles(spec, class_id, mode_id, frames, phase_frames=0.0):
    """Noiseless joint-angle trajectory [T, J] for one (class, mode)."""
    pattern = _MODE_PATTERNS[mode_id % len(_MODE_PATTERNS)]
    if mode_id >= len(_MODE_PATTERNS):  # extra modes: scaled variants
        pattern = pattern * (0.5 + 0.5 * (mode_id // len(_MODE_PATTERNS)))
    amp = _BASE_AMP * pattern * (0.8 + 0.1 * class_id)
    pulse = _beat_pulse(spec, class_id, frames, phase_frames)
    main = amp[None, :] * pulse[:, None]
    # constant leans: a class-dependent one so classes differ in pose, and a
    # mode-dependent one with alternating sign as the static mode marker
    lean = np.zeros(len(_BASE_AMP))
    lean[1] = 0.08 * (class_id - (spec.classes - 1) / 2)
    lean[1] += _MODE_LEAN * (1.0 if mode_id % 2 == 0 else -1.0)
    return main + lean[None, :]


def _angles_to_rot6d(angles):
    return matrix_to_rot6d(_axis_angle_matrices(_JOINT_AXES, angles))


def generate_synthetic(spec: SynthSpec) -> GestureDataset:
    """Deterministic dataset of aligned (audio, feature, motion) triples."""
    skeleton = canonical_skeleton()
    frames = int(spec.seq_seconds * spec.frame_rate)
    root = np.random.SeedSequence(spec.seed)
    sequences = []
    templates = {}
    from .kinematics import fk_reference

    for c in range(spec.classes):
        templates[c] = {}
        for m in range(spec.modes):
            tmpl_angles = _mode_angles(spec, c, m, frames)
            templates[c][m] = fk_reference(skeleton, _angles_to_rot6d(tmpl_angles))
        for m0 in range(spec.modes):
            for m1 in range(m0 + 1, spec.modes):
                gap = np.abs(templates[c][m0] - templates[c][m1]).sum(-1).mean()
                if gap < 4 * spec.noise:
                    raise DataError(
                        f"modes {m0}/{m1} of class {c} separated by {gap:.4f} "
                        f"< 4x noise {spec.noise}"
                    )

    seq_id = 0
    for c in range(spec.classes):
        for m in range(spec.modes):
            for i in range(spec.sequences_per):
                rng = np.random.default_rng(root.spawn(1)[0])
                period_s = audio_mod.AUDIO_CLASSES[c]["beat_period"]
                phase_s = float(rng.uniform(0, period_s))
                clip = synth_audio(
                    c, spec.seq_seconds, seed=spec.seed * 10007 + seq_id,
                    sample_rate=spec.sample_rate, phase=phase_s,
                )
                feature = log_mel(clip, spec.frame_rate, target_frames=frames)
                angles = _mode_angles(
                    spec, c, m, frames, phase_frames=phase_s * spec.frame_rate
                )
                jitter = rng.standard_normal(angles.shape) * spec.noise
                kernel = np.ones(5) / 5.0
                for j in range(angles.shape[1]):
                    jitter[:, j] = np.convolve(jitter[:, j], kernel, mode="same")
                rot6d = _angles_to_rot6d(angles + jitter)
                positions = fk_reference(skeleton, rot6d)
                motion = MotionSequence("3d", spec.frame_rate, rot6d, skeleton)
                split = "test" if i == spec.sequences_per - 1 else "train"
                sequences.append(
                    SequenceRecord(
                        seq_id, c, m, split, clip, feature, motion, positions, phase_s
                    )
                )
                seq_id += 1
    return GestureDataset(skeleton, spec.frame_rate, sequences, spec, templates)


def mode_positions_for(dataset: GestureDataset, seq: SequenceRecord):
    """Noiseless per-mode position trajectories at the sequence's beat phase."""
    spec = dataset.spec
    if spec is None:
        raise DataError("mode recovery needs a labeled synthetic dataset")
    from .kinematics import fk_reference

    frames = seq.motion.frames
    out = {}
    for m in range(spec.modes):
        angles = _mode_angles(
            spec, seq.class_id, m, frames, phase_frames=seq.phase * spec.frame_rate
        )
        out[m] = fk_reference(dataset.skeleton, _angles_to_rot6d(angles))
    return out


def crop(dataset: GestureDataset, seq_id, start, length):
    """Frame-aligned (feature, rot6d, positions) window of one sequence."""
    seq = dataset.sequences[seq_id]
    t = seq.motion.frames
    if start < 0 or length < 2 or start + length > t:
        raise DataError(f"crop window [{start}, {start + length}) out of range 0..{t}")
    return (
        seq.feature.values[:, start : start + length],
        seq.motion.data[start : start + length],
        seq.positions[start : start + length],
    )


# ---------------------------------------------------------------------------
# file I/O


def save_motion(path, motion: MotionSequence):
    doc = {
        "mode": motion.mode,
        "frame_rate": motion.frame_rate,
        "skeleton": json.loads(motion.skeleton.to_json()) if motion.skeleton else None,
        "frames": [[list(map(float, j)) for j in frame] for frame in motion.data],
    }
    if motion.mode == "3d":
        doc["positions"] = [
            [list(map(float, j)) for j in frame] for frame in motion.positions()
        ]
    with open(path, "w") as f:
        json.dump(doc, f)


def load_motion(path) -> MotionSequence:
    with open(path) as f:
        doc = json.load(f)
    skeleton = None
    if doc.get("skeleton") is not None:
        skeleton = Skeleton.from_json(json.dumps(doc["skeleton"]))
    return MotionSequence(
        doc["mode"], doc["frame_rate"], np.array(doc["frames"]), skeleton
    )


def save_dataset(dataset: GestureDataset, out_dir):
    """Write WAVs, feature binaries, motion JSONs, and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "skeleton.json").write_text(dataset.skeleton.to_json())
    entries = []
    for seq in dataset.sequences:
        stem = f"seq{seq.seq_id:04d}"
        audio_mod.save_wav(out / f"{stem}.wav", seq.clip)
        audio_mod.save_feature(out / f"{stem}.f64", seq.feature)
        save_motion(out / f"{stem}.motion.json", seq.motion)
        entries.append(
            {
                "seq_id": seq.seq_id,
                "class_id": seq.class_id,
                "mode_id": seq.mode_id,
                "split": seq.split,
                "phase": seq.phase,
                "wav": f"{stem}.wav",
                "feature": f"{stem}.f64",
                "motion": f"{stem}.motion.json",
            }
        )
    manifest = {
        "frame_rate": dataset.frame_rate,
        "skeleton": "skeleton.json",
        "spec": asdict(dataset.spec) if dataset.spec else None,
        "sequences": entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return out / "manifest.json"


def load_dataset(manifest_path) -> GestureDataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    with open(manifest_path) as f:
        manifest = json.load(f)
    skeleton = Skeleton.from_json((root / manifest["skeleton"]).read_text())
    spec = SynthSpec(**manifest["spec"]) if manifest.get("spec") else None
    sequences = []
    from .kinematics import fk_reference

    for e in manifest["sequences"]:
        clip = audio_mod.load_wav(root / e["wav"])
        feature = audio_mod.load_feature(root / e["feature"])
        motion = load_motion(root / e["motion"])
        if motion.mode == "3d":
            motion.skeleton = skeleton
            positions = fk_reference(skeleton, motion.data)
        else:
            positions = motion.data
        sequences.append(
            SequenceRecord(
                e["seq_id"], e["class_id"], e["mode_id"], e["split"],
                clip, feature, motion, positions, e.get("phase", 0.0),
            )
        )
    ds = GestureDataset(skeleton, manifest["frame_rate"], sequences, spec)
    if spec is not None:
        frames = int(spec.seq_seconds * spec.frame_rate)
        for c in range(spec.classes):
            ds.mode_templates[c] = {}
            for m in range(spec.modes):
                ds.mode_templates[c][m] = fk_reference(
                    skeleton, _angles_to_rot6d(_mode_angles(spec, c, m, frames))
                )
    return ds
