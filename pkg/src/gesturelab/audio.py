"""Log-mel feature extraction and pseudo-audio synthesis.

Raw mono audio becomes a per-motion-frame 64-bin log-mel spectrogram with
hop = floor(SR / FR), so audio features align 1:1 with motion frames. The
synthetic dataset drives the pipeline with deterministic harmonic-stack
clips whose amplitude pulses mark the beat grid.
"""

from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass

import numpy as np

N_MELS = 64
WINDOW = 1024
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-6

# Fixed spectral signatures for the synthetic classes. f0 in Hz, harmonic
# amplitude rolloff, and the beat period in seconds (shared with the motion
# generator so audio onsets and motion velocity peaks coincide).
AUDIO_CLASSES = [
    {"f0": 150.0, "harmonics": [1.0, 0.5, 0.25, 0.12], "beat_period": 0.8},
    {"f0": 320.0, "harmonics": [1.0, 0.1, 0.6, 0.05], "beat_period": 1.0},
    {"f0": 640.0, "harmonics": [1.0, 0.7, 0.1, 0.3], "beat_period": 0.7},
    {"f0": 1200.0, "harmonics": [1.0, 0.3, 0.3, 0.3], "beat_period": 1.2},
]


class AudioError(Exception):
    pass


@dataclass
class AudioClip:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise AudioError("sample rate must be positive")
        if self.samples.size == 0:
            raise AudioError("empty audio clip")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class AudioFeature:
    """[64 x T] log-mel energies aligned to the paired motion."""

    values: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise AudioError(f"feature must be [{N_MELS} x T]")
        if not np.all(np.isfinite(self.values)):
            raise AudioError("non-finite feature values")

    @property
    def frames(self):
        return self.values.shape[1]


def hann_window(n):
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(clip: AudioClip, window=WINDOW, hop=None):
    """Magnitude spectrogram [window//2+1 x T], frame t centered at t*hop."""
    if hop is None or hop < 1:
        raise AudioError("hop must be a positive integer")
    x = clip.samples
    if x.size < 2:
        raise AudioError("clip too short for STFT")
    n_frames = math.ceil(x.size / hop)
    half = window // 2
    if x.size <= half + window:
        raise AudioError("clip shorter than one analysis window")
    xp = np.pad(x, (half, half + window), mode="reflect")
    w = hann_window(window)
    frames = np.empty((n_frames, window))
    for t in range(n_frames):
        start = t * hop
        frames[t] = xp[start : start + window]
    spec = np.fft.rfft(frames * w, axis=1)
    return np.abs(spec).T


def mel_scale(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft=WINDOW, n_mels=N_MELS, fmin=FMIN, fmax=FMAX):
    """Triangular filters [n_mels x n_fft//2+1], peak 1, column sums <= 1."""
    if sample_rate < 2 * fmax:
        raise AudioError("sample rate below Nyquist for requested fmax")
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    pts = mel_to_hz(np.linspace(mel_scale(fmin), mel_scale(fmax), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size))
    for i in range(n_mels):
        lo, c, hi = pts[i], pts[i + 1], pts[i + 2]
        rise = (freqs - lo) / max(c - lo, 1e-12)
        fall = (hi - freqs) / max(hi - c, 1e-12)
        fb[i] = np.clip(np.minimum(rise, fall), 0.0, 1.0)
    return fb


def log_mel(clip: AudioClip, frame_rate, target_frames=None) -> AudioFeature:
    """64-bin log-mel feature with one frame per motion frame.

    hop = floor(SR / FR). The output is truncated or edge-padded to
    target_frames (default floor(duration * FR)) so both modalities align.
    """
    if frame_rate <= 0:
        raise AudioError("frame rate must be positive")
    hop = int(clip.sample_rate // frame_rate)
    mag = stft(clip, WINDOW, hop)
    power = mag**2
    fb = mel_filterbank(clip.sample_rate)
    mel = fb @ power
    out = np.log(mel + LOG_FLOOR)
    if target_frames is None:
        target_frames = int(clip.samples.size / clip.sample_rate * frame_rate)
    t = out.shape[1]
    if t >= target_frames:
        out = out[:, :target_frames]
    else:
        out = np.pad(out, ((0, 0), (0, target_frames - t)), mode="edge")
    return AudioFeature(out, frame_rate)


def beat_times(class_id, duration, phase=0.0):
    """Beat onset times in seconds for a synthetic class."""
    period = AUDIO_CLASSES[class_id % len(AUDIO_CLASSES)]["beat_period"]
    t, out = phase, []
    while t < duration:
        if t >= 0:
            out.append(t)
        t += period
    return np.array(out)


def synth_audio(class_id, duration, seed, sample_rate=16000, phase=0.0) -> AudioClip:
    """Deterministic harmonic-stack clip with amplitude pulses on the beat grid."""
    spec = AUDIO_CLASSES[class_id % len(AUDIO_CLASSES)]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(class_id)]))
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    tone = np.zeros(n)
    for h, amp in enumerate(spec["harmonics"], start=1):
        tone += amp * np.sin(2 * np.pi * spec["f0"] * h * t)
    env = np.full(n, 0.25)
    pulse_half = 0.075  # seconds
    for bt in beat_times(class_id, duration, phase):
        lo = int((bt - pulse_half) * sample_rate)
        hi = int((bt + pulse_half) * sample_rate)
        idx = np.arange(max(lo, 0), min(hi, n))
        if idx.size:
            rel = (idx / sample_rate - bt) / pulse_half
            env[idx] += 0.75 * 0.5 * (1 + np.cos(np.pi * np.clip(rel, -1, 1)))
    x = env * tone + 0.003 * rng.standard_normal(n)
    x = np.clip(x / max(1.0, np.abs(x).max()), -1.0, 1.0)
    return AudioClip(sample_rate, x)


# ---------------------------------------------------------------------------
# file interchange


def save_wav(path, clip: AudioClip):
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(clip.sample_rate)
        f.writeframes(pcm.tobytes())


def load_wav(path) -> AudioClip:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise AudioError("expected 16-bit mono WAV")
        sr = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return AudioClip(sr, pcm.astype(np.float64) / 32767.0)


def save_feature(path, feature: AudioFeature):
    path = str(path)
    feature.values.astype("<f8").tofile(path)
    with open(path + ".json", "w") as f:
        json.dump(
            {
                "bins": int(feature.values.shape[0]),
                "frames": int(feature.values.shape[1]),
                "frame_rate": feature.frame_rate,
            },
            f,
        )


def load_feature(path) -> AudioFeature:
    path = str(path)
    with open(path + ".json") as f:
        meta = json.load(f)
    raw = np.fromfile(path, dtype="<f8")
    values = raw.reshape(meta["bins"], meta["frames"])
    return AudioFeature(values, meta["frame_rate"])
