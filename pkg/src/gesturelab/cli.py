"""Command-line entry points: synth-data, train, generate, evaluate, ablate, edit."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import audio as audio_mod
from . import data as data_mod
from .kinematics import KinematicsError, MotionSequence
from .losses import LossWeights
from .metrics import MetricReport, diversity_metric, l1_metric, mode_coverage, multimodality_metric, pck
from .model import ABLATIONS, ModelConfig, ModelError, encode_audio, encode_motion, decode, generate, map_noise, sample_specific_code
from .ndgrad import DomainError
from .training import (
    NumericsError,
    TrainConfig,
    TrainingError,
    desk_preset,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _max_threads():
    try:
        return max(1, int(os.environ.get("GESTURELAB_THREADS", "4")))
    except ValueError:
        return 4


def _write_run_manifest(out_dir, command, resolved):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w") as f:
        json.dump({"command": command, **resolved}, f, indent=1, default=str)


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _build_configs(doc, args):
    """Resolve (ModelConfig, TrainConfig, data manifest path) from file + flags."""
    model_kwargs = dict(doc.get("model", {}))
    train_kwargs = dict(doc.get("train", {}))
    weights = LossWeights(**doc.get("weights", {}))
    if getattr(args, "steps", None) is not None:
        train_kwargs["steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        train_kwargs["seed"] = args.seed
    known = {f.name for f in fields(TrainConfig)} - {"weights"}
    unknown = set(train_kwargs) - known
    if unknown:
        raise TrainingError(f"unknown train config keys: {sorted(unknown)}")
    base = desk_preset() if doc.get("preset", "desk") == "desk" else TrainConfig()
    merged = {**{k: getattr(base, k) for k in known}, **train_kwargs}
    tcfg = TrainConfig(weights=weights, **merged)
    mcfg = ModelConfig(**model_kwargs)
    if getattr(args, "ablation", None):
        mcfg = mcfg.with_ablation(args.ablation)
    data_path = getattr(args, "data", None) or doc.get("data")
    return mcfg, tcfg, data_path


# ---------------------------------------------------------------------------
# evaluation protocol (shared by evaluate/ablate and the acceptance suite)


def default_coverage_threshold(dataset) -> float:
    """A bit under half the smallest template mode gap, so the mode average
    never counts as covering a mode."""
    gaps = []
    for c, modes in dataset.mode_templates.items():
        keys = sorted(modes)
        for a in range(len(keys)):
            for b in range(a + 1, len(keys)):
                gaps.append(l1_metric(modes[keys[a]], modes[keys[b]]))
    if not gaps:
        raise TrainingError("dataset has no mode templates")
    return 0.45 * min(gaps)


def run_evaluation(params, dataset, runs=20, base_seed=1000, threshold=None):
    """Table-style report: avg and best of L1/PCK/diversity over seeded runs,
    multimodality across runs, and mode coverage on labeled synthetic data."""
    test = dataset.by_split("test")
    if not test:
        raise TrainingError("empty held-out split")
    if threshold is None and dataset.mode_templates:
        threshold = default_coverage_threshold(dataset)

    def gen_positions(seq, run):
        motion = generate(params, seq.feature, seed=base_seed + run)
        return motion.positions()

    jobs = [(seq, run) for run in range(runs) for seq in test]
    with ThreadPoolExecutor(max_workers=_max_threads()) as ex:
        results = list(ex.map(lambda sr: gen_positions(*sr), jobs))
    by_run = {}
    for (seq, run), pos in zip(jobs, results):
        by_run.setdefault(run, {})[seq.seq_id] = pos

    per_run = {"l1": [], "pck": [], "diversity": []}
    for run in range(runs):
        l1s, pcks, divs = [], [], []
        for seq in test:
            pos = by_run[run][seq.seq_id]
            l1s.append(l1_metric(pos, seq.positions))
            pcks.append(pck(pos, seq.positions))
            if pos.shape[0] >= 100:
                divs.append(diversity_metric(pos))
        per_run["l1"].append(float(np.mean(l1s)))
        per_run["pck"].append(float(np.mean(pcks)))
        per_run["diversity"].append(float(np.mean(divs)) if divs else 0.0)

    report = MetricReport(
        l1=float(np.mean(per_run["l1"])),
        pck=float(np.mean(per_run["pck"])),
        diversity=float(np.mean(per_run["diversity"])),
        per_run={
            "l1": per_run["l1"],
            "pck": per_run["pck"],
            "diversity": per_run["diversity"],
            "l1_best": float(np.min(per_run["l1"])),
            "pck_best": float(np.max(per_run["pck"])),
            "diversity_best": float(np.max(per_run["diversity"])),
        },
    )
    if runs >= 2:
        mm = [
            multimodality_metric([by_run[r][seq.seq_id] for r in range(runs)])
            for seq in test
        ]
        report.multimodality = float(np.mean(mm))
    if dataset.mode_templates:
        covs = []
        nearest_all = []
        for seq in test:
            modes = data_mod.mode_positions_for(dataset, seq)
            samples = [by_run[r][seq.seq_id] for r in range(runs)]
            cov, nearest = mode_coverage(samples, modes, threshold)
            covs.append(cov)
            nearest_all.append(nearest)
        report.mode_coverage = float(np.mean(covs))
        report.per_run["mode_nearest"] = [
            {str(k): v for k, v in n.items()} for n in nearest_all
        ]
        report.per_run["coverage_threshold"] = threshold
    return report


def timeline_edit(params, feature, reference: MotionSequence, t_start, n_frames, seed):
    """Replace the sampled motion-specific code with the reference motion's
    code on frames [t_start, t_start + n_frames), then decode once."""
    if not params.config.split:
        raise ModelError("timeline editing needs the split latent code")
    t = feature.frames
    if t_start < 0 or t_start + n_frames > t:
        raise ModelError("splice window out of range")
    if reference.frames < n_frames:
        raise ModelError("reference motion shorter than the splice window")
    rng = np.random.default_rng(seed)
    s_a = encode_audio(params, feature, sample=False)
    noise = sample_specific_code(params, None, t, rng)
    i_r, _ = map_noise(params, noise, rng)
    spliced = i_r.data.copy()
    if n_frames > 0:
        _, i_ref = encode_motion(params, reference, sample=False)
        spliced[:, t_start : t_start + n_frames] = i_ref.mean.data[:, :n_frames]
    out = decode(params, s_a.sample, type(i_r)(spliced))
    return MotionSequence(
        params.config.mode, feature.frame_rate, out.data,
        params.skeleton if params.config.mode == "3d" else None,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    doc = _load_config_file(args.config)
    spec = data_mod.SynthSpec(**doc.get("synth", doc if "classes" in doc else {}))
    if args.seed is not None:
        spec.seed = args.seed
    dataset = data_mod.generate_synthetic(spec)
    manifest = data_mod.save_dataset(dataset, args.out)
    _write_run_manifest(args.out, "synth-data", {"spec": asdict(spec)})
    print(f"wrote {len(dataset.sequences)} sequences to {manifest}")
    return EXIT_OK


def cmd_train(args):
    doc = _load_config_file(args.config)
    mcfg, tcfg, data_path = _build_configs(doc, args)
    if data_path is None:
        raise TrainingError("no dataset manifest given (config 'data' or --data)")
    dataset = data_mod.load_dataset(data_path)
    out = Path(args.out)
    _write_run_manifest(
        out, "train",
        {"model": asdict(mcfg), "train": asdict(tcfg), "data": str(data_path)},
    )
    train_loop(dataset, mcfg, tcfg, out_dir=out)
    print(f"trained {tcfg.steps} steps; checkpoint at {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_generate(args):
    params, _, _, _ = load_checkpoint(args.checkpoint)
    if args.feature:
        feature = audio_mod.load_feature(args.feature)
    else:
        clip = audio_mod.load_wav(args.audio)
        feature = audio_mod.log_mel(clip, params.frame_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        motion = generate(params, feature, seed)
        data_mod.save_motion(out / f"motion_seed{seed}.json", motion)
    _write_run_manifest(out, "generate", {"checkpoint": args.checkpoint, "seeds": args.seeds})
    print(f"wrote {len(args.seeds)} motions to {out}")
    return EXIT_OK


def cmd_evaluate(args):
    params, _, _, _ = load_checkpoint(args.checkpoint)
    dataset = data_mod.load_dataset(args.data)
    report = run_evaluation(params, dataset, runs=args.runs, base_seed=args.seed or 1000)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    _write_table_csv(out / "metrics.csv", {"model": report})
    _write_run_manifest(out, "evaluate", {"checkpoint": args.checkpoint, "runs": args.runs})
    mm = "-" if report.multimodality is None else f"{report.multimodality:.3f}"
    print(
        f"L1 {report.l1:.3f} ({report.per_run['l1_best']:.3f})  "
        f"PCK {report.pck:.3f} ({report.per_run['pck_best']:.3f})  "
        f"Diversity {report.diversity:.3f} ({report.per_run['diversity_best']:.3f})  "
        f"Multimodality {mm}"
    )
    return EXIT_OK


def _write_table_csv(path, reports: dict):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "l1", "l1_best", "pck", "pck_best",
                    "diversity", "diversity_best", "multimodality", "mode_coverage"])
        for name, r in reports.items():
            w.writerow([
                name, f"{r.l1:.4f}", f"{r.per_run['l1_best']:.4f}",
                f"{r.pck:.4f}", f"{r.per_run['pck_best']:.4f}",
                f"{r.diversity:.4f}", f"{r.per_run['diversity_best']:.4f}",
                "" if r.multimodality is None else f"{r.multimodality:.4f}",
                "" if r.mode_coverage is None else f"{r.mode_coverage:.4f}",
            ])


def cmd_ablate(args):
    doc = _load_config_file(args.config)
    mcfg, tcfg, data_path = _build_configs(doc, args)
    if data_path is None:
        raise TrainingError("no dataset manifest given (config 'data' or --data)")
    dataset = data_mod.load_dataset(data_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for name in ABLATIONS:
        cfg_i = mcfg.with_ablation(name)
        run_dir = out / name
        params, _ = train_loop(dataset, cfg_i, tcfg, out_dir=run_dir)
        reports[name] = run_evaluation(params, dataset, runs=args.runs)
        print(f"{name}: L1 {reports[name].l1:.3f}  "
              f"multimodality {reports[name].multimodality}")
    _write_table_csv(out / "ablation.csv", reports)
    _write_run_manifest(out, "ablate", {"train": asdict(tcfg), "data": str(data_path)})
    return EXIT_OK


def cmd_edit(args):
    params, _, _, _ = load_checkpoint(args.checkpoint)
    if args.feature:
        feature = audio_mod.load_feature(args.feature)
    else:
        clip = audio_mod.load_wav(args.audio)
        feature = audio_mod.log_mel(clip, params.frame_rate)
    reference = data_mod.load_motion(args.reference)
    motion = timeline_edit(params, feature, reference, args.t_start, args.n_frames, args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_mod.save_motion(out / "edited_motion.json", motion)
    _write_run_manifest(out, "edit", {
        "checkpoint": args.checkpoint, "reference": args.reference,
        "t_start": args.t_start, "n_frames": args.n_frames, "seed": args.seed,
    })
    print(f"wrote edited motion to {out / 'edited_motion.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="gesturelab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth-data", help="generate the synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("generate", help="sample motions from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--audio", default=None)
    sp.add_argument("--feature", default=None)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0])
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("evaluate", help="score a checkpoint on the held-out split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--runs", type=int, default=20)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train and score all ablation configurations")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--runs", type=int, default=20)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("edit", help="timeline-edit a generated motion")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--audio", default=None)
    sp.add_argument("--feature", default=None)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--t-start", type=int, required=True)
    sp.add_argument("--n-frames", type=int, required=True)
    sp.set_defaults(fn=cmd_edit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (NumericsError, DomainError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelError, data_mod.DataError, KinematicsError, TrainingError,
            json.JSONDecodeError, TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
