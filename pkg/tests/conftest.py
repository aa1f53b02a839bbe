import numpy as np
import pytest

from gesturelab.data import SynthSpec, generate_synthetic
from gesturelab.kinematics import Skeleton, canonical_skeleton


@pytest.fixture(scope="session")
def skeleton():
    return canonical_skeleton()


@pytest.fixture(scope="session")
def two_joint_skeleton():
    return Skeleton(
        names=["root", "tip"],
        parent=[-1, 0],
        offsets=np.array([[0.0, 0.0, 0.0], [0.0, 0.3, 0.0]]),
    )


@pytest.fixture(scope="session")
def small_dataset():
    """Tiny corpus for fast unit tests: 2 classes x 2 modes x 2 sequences."""
    return generate_synthetic(
        SynthSpec(classes=2, modes=2, sequences_per=2, seq_seconds=6.0, seed=11)
    )


def random_rot6d(rng, shape=()):
    """Well-conditioned random 6D rotation inputs (away from degeneracy)."""
    r = rng.standard_normal(shape + (6,))
    while True:
        a, b = r[..., :3], r[..., 3:]
        na = np.linalg.norm(a, axis=-1)
        cross = np.linalg.norm(np.cross(a, b), axis=-1)
        bad = (na < 0.3) | (cross < 0.1)
        if not bad.any():
            return r
        r[bad] = rng.standard_normal((int(bad.sum()), 6))
