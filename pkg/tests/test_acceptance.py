"""End-to-end acceptance suite: one test per shipped guarantee.

Each test prints a single ``ACCEPTANCE n ... PASS/FAIL`` line (visible with
``pytest -s`` or in captured output on failure).  Tests 4, 5 and 7 train five
model configurations at desk scale (2000 steps each) and take ~40 minutes
combined; run the unit tests alone with
``pytest --ignore=tests/test_acceptance.py``.
"""

import hashlib
import time

import numpy as np
import pytest

from gesturelab import ndgrad as nd
from gesturelab.audio import log_mel
from gesturelab.cli import run_evaluation, timeline_edit
from gesturelab.data import SynthSpec, generate_synthetic, mode_positions_for
from gesturelab.kinematics import (
    Skeleton,
    canonical_skeleton,
    forward_kinematics,
    fk_reference,
    geodesic_distance,
    matrix_to_rot6d,
    rot6d_to_matrix,
)
from gesturelab.losses import (
    LossWeights,
    alignment_loss,
    bicycle_loss,
    diversity_loss,
    kl_divergence,
    kl_monte_carlo,
    position_loss,
    relaxed_motion_loss,
    rotation_loss,
    speed_loss,
)
from gesturelab.metrics import (
    diversity_metric,
    l1_metric,
    multimodality_metric,
    pck,
)
from gesturelab.model import (
    ABLATIONS,
    LatentCode,
    ModelConfig,
    generate,
    init_params,
)
from gesturelab.training import (
    TrainConfig,
    composite_objective,
    desk_preset,
    train_loop,
)


def gaussian_code(mean, log_var):
    """A diagonal-Gaussian latent code for exercising the KL term directly."""
    return LatentCode(mean=nd.astensor(mean), log_var=nd.astensor(log_var),
                      sample=nd.astensor(mean))


def report(criterion, failures):
    status = "PASS" if not failures else "FAIL — " + "; ".join(failures)
    print(f"\nACCEPTANCE {criterion}: {status}")
    assert not failures, f"ACCEPTANCE {criterion}: {failures}"


def two_joint_skeleton():
    return Skeleton(
        names=["root", "tip"],
        parent=[-1, 0],
        offsets=np.array([[0.0, 0.0, 0.0], [0.0, 0.3, 0.0]]),
    )


# ---------------------------------------------------------------------------
# shared desk-scale artifacts (trained once per session)

PINNED_DATA_SEED = 0
PINNED_TRAIN_SEED = 0
EVAL_RUNS = 20
EVAL_BASE_SEED = 1000


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic(SynthSpec(seed=PINNED_DATA_SEED))


@pytest.fixture(scope="session")
def trained(corpus):
    out = {}
    for name in ABLATIONS:
        cfg = ModelConfig().with_ablation(name)
        t0 = time.time()
        params, _ = train_loop(corpus, cfg, desk_preset(seed=PINNED_TRAIN_SEED))
        out[name] = (params, time.time() - t0)
    return out


@pytest.fixture(scope="session")
def reports(corpus, trained):
    out = {}
    for name, (params, train_s) in trained.items():
        t0 = time.time()
        rep = run_evaluation(params, corpus, runs=EVAL_RUNS, base_seed=EVAL_BASE_SEED)
        out[name] = (rep, train_s + (time.time() - t0))
    return out


# ---------------------------------------------------------------------------
# 1. gradient correctness


class TestCriterion1GradientCorrectness:
    TOL = 1e-4

    def test_every_loss_and_the_composite_objective(self):
        t0 = time.time()
        failures = []
        rng = np.random.default_rng(0)
        skel = two_joint_skeleton()
        frames, joints = 8, 2

        target6d = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (frames, joints, 1))
        target6d += 0.1 * rng.standard_normal(target6d.shape)
        target_pos = rng.standard_normal((frames, joints, 3))

        def check(name, f, x, h=1e-5):
            err = nd.grad_check(f, x, h=h)
            if err >= self.TOL:
                failures.append(f"{name} grad error {err:.3g}")

        pred6d = target6d + 0.2 * rng.standard_normal(target6d.shape)
        check("rotation", lambda p: rotation_loss(p, target6d), pred6d)
        pos = target_pos + 0.3 * rng.standard_normal(target_pos.shape)
        check("position", lambda p: position_loss(p, nd.Tensor(target_pos)), pos)
        check("speed", lambda p: speed_loss(p, nd.Tensor(target_pos)), pos)
        check(
            "relaxed",
            lambda p: relaxed_motion_loss(p, nd.Tensor(target_pos), rho=0.02),
            pos,
        )
        code_a = rng.standard_normal((4, frames))
        code_b = rng.standard_normal((4, frames))
        check("alignment", lambda c: alignment_loss(c, nd.Tensor(code_b)), code_a)
        check("bicycle", lambda c: bicycle_loss(c, nd.Tensor(code_b)), code_a)
        check(
            "diversity",
            lambda p: diversity_loss(p, nd.Tensor(target_pos), tau=1.0),
            pos,
        )
        mean = 0.5 * rng.standard_normal((4, frames))
        log_var = 0.3 * rng.standard_normal((4, frames))

        def kl_of_mean(m):
            return kl_divergence(gaussian_code(m, nd.Tensor(log_var)))

        def kl_of_log_var(lv):
            return kl_divergence(gaussian_code(nd.Tensor(mean), lv))

        check("kl/mean", kl_of_mean, mean)
        check("kl/log_var", kl_of_log_var, log_var)

        # full composite objective on the same 2-joint, 8-frame instance
        cfg = ModelConfig(joints=2, code_dim=4, hidden=8)
        params = init_params(cfg, np.random.default_rng(1), skel)
        rng2 = np.random.default_rng(2)
        angles = 0.4 * rng2.standard_normal((frames, joints))
        motion = np.zeros((frames, joints, 6))
        motion[..., 0] = np.cos(angles)
        motion[..., 1] = np.sin(angles)
        motion[..., 3] = -np.sin(angles)
        motion[..., 4] = np.cos(angles)
        positions = fk_reference(skel, motion)
        batch = {
            "feat": rng2.standard_normal((1, 64, frames)),
            "motion": motion[None],
            "positions": positions[None],
        }
        w = LossWeights()

        probe_names = [
            "audio_enc.lift.b",
            "motion_enc.lift.b",
            "map_enc.lift.b",
            "map_dec.lift.b",
            "decoder.lift.b",
            "decoder.out.w",
            "decoder.out.b",
        ]
        for name in probe_names:
            original = params.tensors[name]

            def objective(t):
                params.tensors[name] = t
                try:
                    total, _, _ = composite_objective(
                        params, batch, w, np.random.default_rng(7)
                    )
                    return total
                finally:
                    params.tensors[name] = original

            err = nd.grad_check(objective, original.data.copy(), h=1e-6)
            if err >= self.TOL:
                failures.append(f"composite/{name} grad error {err:.3g}")

        elapsed = time.time() - t0
        if elapsed >= 60.0:
            failures.append(f"runtime {elapsed:.1f}s exceeds 1 min")
        report("1 (gradient correctness < 1e-4, < 1 min)", failures)


# ---------------------------------------------------------------------------
# 2. analytic oracles


class TestCriterion2AnalyticOracles:
    def test_fk_geodesic_kl_and_rot6d(self):
        failures = []
        rng = np.random.default_rng(0)
        skel = canonical_skeleton()

        # FK vs naive recursion, 50 random cases, 1e-9
        worst_fk = 0.0
        for _ in range(50):
            rot = self._random_rot6d(rng, (4, skel.joint_count))
            fast = forward_kinematics(skel, nd.Tensor(rot)).data
            slow = fk_reference(skel, rot)
            worst_fk = max(worst_fk, float(np.abs(fast - slow).max()))
        if worst_fk >= 1e-9:
            failures.append(f"FK vs recursion {worst_fk:.3g}")

        # geodesic distance vs quaternion-angle oracle, 1e-6 away from 0/pi
        worst_geo, used = 0.0, 0
        while used < 50:
            a = rot6d_to_matrix(nd.Tensor(self._random_rot6d(rng, ()))).data
            b = rot6d_to_matrix(nd.Tensor(self._random_rot6d(rng, ()))).data
            ref = self._quat_angle(a, b)
            if ref < 0.05 or ref > np.pi - 0.05:
                continue
            used += 1
            got = float(geodesic_distance(nd.Tensor(a), nd.Tensor(b)).data)
            worst_geo = max(worst_geo, abs(got - ref))
        if worst_geo >= 1e-6:
            failures.append(f"geodesic vs quaternion {worst_geo:.3g}")

        # KL closed form vs Monte-Carlo (1e6 samples) within 1% at 20 points
        worst_kl = 0.0
        for i in range(20):
            mean = rng.uniform(-2.0, 2.0, size=4)
            var = rng.uniform(0.2, 3.0, size=4)
            closed = float(
                kl_divergence(
                    gaussian_code(
                        nd.Tensor(mean[:, None]), nd.Tensor(np.log(var)[:, None])
                    )
                ).data
            )
            mc = kl_monte_carlo(mean, var, 10**6, np.random.default_rng(100 + i))
            worst_kl = max(worst_kl, abs(closed - mc) / closed)
        if worst_kl >= 0.01:
            failures.append(f"KL closed form vs MC {worst_kl:.3g}")

        # 6D representation round trip within 1e-9
        mats = rot6d_to_matrix(nd.Tensor(self._random_rot6d(rng, (50,)))).data
        back = rot6d_to_matrix(nd.Tensor(matrix_to_rot6d(mats))).data
        worst_rt = float(np.abs(back - mats).max())
        if worst_rt >= 1e-9:
            failures.append(f"6D round trip {worst_rt:.3g}")

        report("2 (analytic oracles)", failures)

    @staticmethod
    def _random_rot6d(rng, shape):
        while True:
            r = rng.standard_normal(shape + (6,))
            a, b = r[..., :3], r[..., 3:]
            if np.all(np.linalg.norm(a, axis=-1) > 0.3) and np.all(
                np.linalg.norm(np.cross(a, b), axis=-1) > 0.1
            ):
                return r

    @staticmethod
    def _quat_angle(r1, r2):
        def to_quat(m):
            t = np.trace(m)
            if t > 0:
                s = np.sqrt(t + 1.0) * 2
                return np.array(
                    [s / 4, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                     (m[1, 0] - m[0, 1]) / s]
                )
            i = int(np.argmax(np.diag(m)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k]) * 2
            q = np.empty(4)
            q[0] = (m[k, j] - m[j, k]) / s
            q[1 + i] = s / 4
            q[1 + j] = (m[j, i] + m[i, j]) / s
            q[1 + k] = (m[k, i] + m[i, k]) / s
            return q

        dot = abs(float(np.dot(to_quat(r1), to_quat(r2))))
        return 2.0 * np.arccos(min(dot, 1.0))


# ---------------------------------------------------------------------------
# 3. metric fidelity


class TestCriterion3MetricFidelity:
    def test_hand_computed_values(self):
        failures = []

        target = np.zeros((6, 2, 3))
        pred = target.copy()
        pred[:, 1, 0] = 0.3
        if pck(pred, target, delta=0.2) != 0.5:
            failures.append("PCK two-joint/0.3-offset != 0.5")

        t = np.zeros((5, 4, 3))
        if abs(l1_metric(t + 0.1, t) - 0.3) > 1e-12:
            failures.append("l1 uniform-0.1 offset != 0.3")

        if diversity_metric(np.ones((150, 4, 3))) != 0.0:
            failures.append("diversity on static motion != 0")

        runs = [np.full((40, 3, 3), 0.7)] * 4
        if multimodality_metric(runs) != 0.0:
            failures.append("multimodality under a fixed seed != 0")

        report("3 (metric fidelity, exact hand-computed values)", failures)


# ---------------------------------------------------------------------------
# 6. alignment plumbing (cheap; runs before the desk-scale tests)


class TestCriterion6AlignmentPlumbing:
    def test_hop_and_frame_equality(self, corpus):
        failures = []
        if corpus.frame_rate != 30:
            failures.append(f"frame rate {corpus.frame_rate} != 30")
        sr = corpus.sequences[0].clip.sample_rate
        if sr != 16000:
            failures.append(f"sample rate {sr} != 16000")
        if sr // 30 != 533:
            failures.append(f"hop {sr // 30} != 533")
        for seq in corpus.sequences:
            feat = log_mel(seq.clip, corpus.frame_rate)
            if feat.frames != seq.motion.frames:
                failures.append(
                    f"seq {seq.seq_id}: {feat.frames} feature frames vs "
                    f"{seq.motion.frames} motion frames"
                )
                break
        report("6 (hop 533 and exact feature/motion frame equality)", failures)


# ---------------------------------------------------------------------------
# 8. determinism (cheap; independent of the desk-scale runs)


class TestCriterion8Determinism:
    def test_bit_identical_runs_and_resume(self, corpus, tmp_path):
        failures = []
        cfg = ModelConfig()
        short = dict(batch_size=2, crop_frames=48, seed=3, checkpoint_every=1000)

        digests = []
        for name in ("a", "b"):
            train_loop(corpus, cfg, TrainConfig(steps=6, **short),
                       out_dir=tmp_path / name)
            digests.append(
                hashlib.sha256((tmp_path / name / "checkpoint.bin").read_bytes())
                .hexdigest()
            )
        if digests[0] != digests[1]:
            failures.append("two seeded runs produced different checkpoints")

        p_full, _ = train_loop(corpus, cfg, TrainConfig(steps=6, **short),
                               out_dir=tmp_path / "full")
        train_loop(corpus, cfg, TrainConfig(steps=3, **short),
                   out_dir=tmp_path / "half")
        p_res, _ = train_loop(
            corpus, cfg, TrainConfig(steps=6, **short),
            out_dir=tmp_path / "resumed",
            resume_from=tmp_path / "half" / "checkpoint.bin",
        )
        for k in p_full.tensors:
            if not np.array_equal(p_full.tensors[k].data, p_res.tensors[k].data):
                failures.append(f"resume diverged at {k}")
                break
        if not np.array_equal(p_full.running_mean, p_res.running_mean):
            failures.append("resume diverged in running stats")

        report("8 (bit-identical seeded runs and bit-exact resume)", failures)


# ---------------------------------------------------------------------------
# 4. one-to-many behavior at desk scale


class TestCriterion4OneToMany:
    def test_baseline_averages_full_model_covers_modes(self, corpus, trained, reports):
        failures = []
        baseline, _ = trained["baseline"]
        full, _ = trained["diversity"]

        def best_of_runs(params):
            """Per (test sequence, mode): best-of-20 l1 to the mode template,
            and the distance from the mode average to that template."""
            rows = []
            for seq in corpus.by_split("test"):
                modes = mode_positions_for(corpus, seq)
                avg = np.mean([modes[m] for m in sorted(modes)], axis=0)
                samples = [
                    generate(params, seq.feature, seed=EVAL_BASE_SEED + r).positions()
                    for r in range(EVAL_RUNS)
                ]
                for m in sorted(modes):
                    best = min(l1_metric(s, modes[m]) for s in samples)
                    rows.append((best, l1_metric(avg, modes[m])))
            return rows

        base_rows = best_of_runs(baseline)
        full_rows = best_of_runs(full)

        # (a) a deterministic model emits one motion per sequence, so its mean
        # best-of-20 over both modes cannot drop below ~half the inter-mode gap,
        # i.e. the distance from the mode average to either mode.  The corpus
        # mean is the right aggregate: an L1-trained baseline may sit anywhere
        # between averaging and committing to one mode per sequence, and the
        # mean ratio is invariant to where on that spectrum it lands.
        ratio_a = np.mean([b for b, _ in base_rows]) / np.mean(
            [d for _, d in base_rows]
        )
        if ratio_a < 0.8:
            failures.append(f"baseline best-of-20 ratio {ratio_a:.3f} < 0.8")

        # (b) the full model lands much closer to the individual modes
        base_mean = np.mean([b for b, _ in base_rows])
        full_mean = np.mean([b for b, _ in full_rows])
        if not full_mean < 0.5 * base_mean:
            failures.append(
                f"full best-of-20 {full_mean:.4f} not < 0.5x baseline {base_mean:.4f}"
            )

        # (c) mode coverage
        cov_full = reports["diversity"][0].mode_coverage
        cov_base = reports["baseline"][0].mode_coverage
        if not cov_full >= 0.75:
            failures.append(f"full coverage {cov_full:.3f} < 0.75")
        if not cov_base <= 0.5:
            failures.append(f"baseline coverage {cov_base:.3f} > 0.5")

        # runtime: baseline + full training and evaluation within 1 hour
        elapsed = reports["baseline"][1] + reports["diversity"][1]
        if elapsed > 3600:
            failures.append(f"runtime {elapsed:.0f}s exceeds 1 hour")

        report("4 (one-to-many at desk scale)", failures)


# ---------------------------------------------------------------------------
# 5. ablation monotonicity


class TestCriterion5AblationMonotonicity:
    def test_each_component_adds_variety(self, reports):
        failures = []
        mm = {k: reports[k][0].multimodality for k in reports}
        dv = {k: reports[k][0].diversity for k in reports}

        if mm["baseline"] != 0.0:
            failures.append(f"baseline multimodality {mm['baseline']} != 0")
        if not mm["split"] > 0.0:
            failures.append(f"split multimodality {mm['split']} not > 0")
        for a, b in (("mapping", "bicycle"), ("bicycle", "diversity")):
            if not dv[b] > dv[a]:
                failures.append(f"diversity {b} {dv[b]:.5f} <= {a} {dv[a]:.5f}")
            if not mm[b] > mm[a]:
                failures.append(f"multimodality {b} {mm[b]:.5f} <= {a} {mm[a]:.5f}")

        report("5 (ablation monotonicity)", failures)


# ---------------------------------------------------------------------------
# 7. timeline editing


class TestCriterion7TimelineEdit:
    # frozen from the pinned desk-scale run (worst whole-splice l1 measured
    # at 0.033 across training sequences, bound set with ~1.5x headroom)
    RECONSTRUCTION_BOUND = 0.05

    def test_whole_splice_and_boundary_smoothness(self, corpus, trained):
        failures = []
        params, _ = trained["diversity"]
        train = corpus.by_split("train")

        # whole-sequence splice on a training sequence reproduces it
        worst = 0.0
        for seq in train[:4]:
            edited = timeline_edit(
                params, seq.feature, seq.motion, 0, seq.motion.frames, seed=0
            )
            worst = max(worst, l1_metric(edited.positions(), seq.positions))
        if worst >= self.RECONSTRUCTION_BOUND:
            failures.append(
                f"whole-splice l1 {worst:.4f} >= bound {self.RECONSTRUCTION_BOUND}"
            )

        # splice-boundary speed stays under 2x the 99th-percentile corpus speed
        speeds = np.concatenate(
            [
                np.abs(np.diff(seq.positions, axis=0)).sum(-1).ravel()
                for seq in train
            ]
        )
        limit = 2.0 * float(np.percentile(speeds, 99))
        rng = np.random.default_rng(2024)
        for i in range(10):
            seq = train[int(rng.integers(len(train)))]
            t = seq.motion.frames
            n = int(rng.integers(20, 60))
            t_start = int(rng.integers(3, t - n - 3))
            edited = timeline_edit(
                params, seq.feature, seq.motion, t_start, n, seed=int(rng.integers(10**6))
            )
            pos = edited.positions()
            window = pos[t_start - 3 : t_start + 4]
            peak = float(np.abs(np.diff(window, axis=0)).sum(-1).max())
            if peak > limit:
                failures.append(
                    f"edit {i}: boundary speed {peak:.4f} > limit {limit:.4f}"
                )

        report("7 (timeline edit reproduction and boundary smoothness)", failures)
