"""Quantitative metrics: L1, PCK, diversity, multimodality, mode coverage."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class MetricError(Exception):
    pass


@dataclass
class MetricReport:
    l1: float = 0.0
    pck: float = 0.0
    diversity: float = 0.0
    multimodality: float | None = None
    mode_coverage: float | None = None
    per_run: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(
            {
                "l1": self.l1,
                "pck": self.pck,
                "diversity": self.diversity,
                "multimodality": self.multimodality,
                "mode_coverage": self.mode_coverage,
                "per_run": self.per_run,
            }
        )


def l1_metric(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over frames and joints of the per-joint coordinate-sum L1 norm."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).sum(axis=-1).mean())


def pck(pred: np.ndarray, target: np.ndarray, delta=0.2) -> float:
    """Fraction of keypoints with Euclidean error strictly below delta."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {target.shape}")
    dist = np.sqrt(((pred - target) ** 2).sum(axis=-1))
    return float((dist < delta).mean())


def _pairwise_l1_normalized(clips) -> float:
    # the 1/(N*ceil(N/2)) constant is the reporting convention, kept as is
    n = len(clips)
    total = 0.0
    for a in range(n):
        for b in range(a + 1, n):
            total += l1_metric(clips[a], clips[b])
    return total / (n * math.ceil(n / 2))


def diversity_metric(positions: np.ndarray, clip_len=50) -> float:
    """Average pairwise L1 between non-overlapping clips of one motion."""
    positions = np.asarray(positions)
    t = positions.shape[0]
    n = t // clip_len
    if n < 2:
        raise MetricError(f"motion too short for diversity: {t} frames < {2 * clip_len}")
    clips = [positions[i * clip_len : (i + 1) * clip_len] for i in range(n)]
    return _pairwise_l1_normalized(clips)


def multimodality_metric(motions) -> float:
    """Average pairwise L1 between motions generated for the same audio."""
    if len(motions) < 2:
        raise MetricError("multimodality needs at least two runs")
    shapes = {np.asarray(m).shape for m in motions}
    if len(shapes) != 1:
        raise MetricError("all runs must share one shape")
    return _pairwise_l1_normalized([np.asarray(m) for m in motions])


def mode_coverage(samples, modes, threshold):
    """(covered fraction, per-mode nearest l1 distance).

    A mode counts as covered when some sample is closer to it than to any
    other mode and within the absolute threshold.
    """
    if not modes:
        raise MetricError("mode coverage needs labeled ground-truth modes")
    keys = sorted(modes) if isinstance(modes, dict) else range(len(modes))
    mode_list = [modes[k] for k in keys]
    nearest = {k: float("inf") for k in keys}
    covered = set()
    for s in samples:
        dists = [l1_metric(s, m) for m in mode_list]
        best = int(np.argmin(dists))
        for k, d in zip(keys, dists):
            nearest[k] = min(nearest[k], d)
        if dists[best] < threshold:
            covered.add(keys[best])
    return len(covered) / len(keys), nearest
