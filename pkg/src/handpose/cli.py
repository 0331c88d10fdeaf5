"""Command-line surface.

    handpose synth-generate  render a synthetic dataset in MSRA layout
    handpose train-baseline  train the cascade and save a model bundle
    handpose train-voting    train the voting forest
    handpose detect          geometric finger detection debug dump
    handpose refine          baseline + detection + voting on a dataset
    handpose evaluate        score a predictions file against ground truth
    handpose bench           single-thread throughput / backend comparison

Every command writes a JSON run manifest next to its outputs. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, backend
from .cascade import load_cascade, predict_cascade, save_cascade, train_cascade
from .config import load_config, write_config
from .data_io import (
    load_icvl,
    load_msra,
    make_synth_index,
    write_msra_dataset,
)
from .detect import detect_fingers, detection_debug_record
from .errors import ConfigError, HandPoseError
from .forest import load_forest, save_forest
from .geometry import HandPose, skeleton_preset
from .metrics import (
    build_report,
    save_overlays,
    write_report_csv,
    write_report_json,
)
from .voting import collect_training_samples, refine, train_voting_forest


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _bundle_hash(path) -> str:
    path = Path(path)
    if path.is_file():
        return _sha256(path)
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(_sha256(p).encode())
    return h.hexdigest()


def _write_manifest(out_path, command, args, timing, inputs, outputs, model_hashes):
    manifest = {
        "command": command,
        "package_version": __version__,
        "backend": backend.BACKEND,
        "config": str(args.config) if args.config else None,
        "overrides": list(args.set or []),
        "seed": args.seed,
        "threads": args.threads,
        "inputs": inputs,
        "outputs": outputs,
        "timing": timing,
        "model_hashes": model_hashes,
    }
    Path(out_path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_dataset(args, cfg):
    path = Path(args.data)
    if not path.exists():
        raise FileNotFoundError(f"dataset path {path} does not exist")
    skeleton = skeleton_preset(cfg.skeleton)
    if args.format == "msra":
        return load_msra(path, cfg.intrinsics, cfg.background,
                         negate_z=cfg.msra_negate_z, skeleton=skeleton)
    return load_icvl(path, split=args.icvl_split, intrinsics=cfg.intrinsics,
                     background=cfg.background)


def _predict_refined(index, model, vforest, cfg, collect_votes=False):
    """Yield per-sample dicts with baseline, refined pose, mask, votes."""
    intr = index.intrinsics
    for i in range(len(index)):
        img = index.image(i)
        t0 = time.perf_counter()
        baseline = predict_cascade(model, img, intr)
        t1 = time.perf_counter()
        det = detect_fingers(img, model.skeleton, cfg.detect, baseline, intr)
        t2 = time.perf_counter()
        refined, mask, votes = refine(
            img, baseline, det["fingers"], vforest, cfg.voting, intr,
            collect_votes=collect_votes,
        )
        t3 = time.perf_counter()
        yield {
            "index": i,
            "image": img,
            "baseline": baseline,
            "refined": refined,
            "updated": mask,
            "votes": votes,
            "stage_seconds": (t1 - t0, t2 - t1, t3 - t2),
        }


def cmd_synth_generate(args, cfg):
    t0 = time.perf_counter()
    index = make_synth_index(args.count, args.seed, cfg.synth, cfg.intrinsics,
                             cfg.background, skeleton_preset(cfg.skeleton))
    out = Path(args.out)
    write_msra_dataset(out, index, negate_z=cfg.msra_negate_z)
    write_config(cfg, out / "dataset.ini")
    elapsed = time.perf_counter() - t0
    _write_manifest(
        out / "manifest.json", "synth-generate", args,
        {"elapsed_s": elapsed, "images_per_sec": args.count / elapsed},
        {"count": args.count}, {"dataset": str(out)}, {},
    )
    print(f"wrote {args.count} synthetic images to {out}")
    return 0


def cmd_train_baseline(args, cfg):
    index = _load_dataset(args, cfg)
    t0 = time.perf_counter()
    model = train_cascade(index.pairs(), cfg.cascade, args.seed,
                          threads=args.threads, intrinsics=index.intrinsics)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    save_cascade(model, out)
    _write_manifest(
        out / "run_manifest.json", "train-baseline", args,
        {"elapsed_s": elapsed, "images_per_sec": len(index) / elapsed},
        {"dataset": str(args.data), "images": len(index)},
        {"bundle": str(out)}, {"baseline": _bundle_hash(out)},
    )
    print(f"trained cascade on {len(index)} images -> {out}")
    return 0


def cmd_train_voting(args, cfg):
    index = _load_dataset(args, cfg)
    t0 = time.perf_counter()
    samples = collect_training_samples(index, cfg.voting.training_image_count, args.seed)
    forest = train_voting_forest(samples, cfg.voting, args.seed, threads=args.threads)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_forest(forest, out)
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"), "train-voting", args,
        {"elapsed_s": elapsed, "samples_per_sec": len(samples) / elapsed},
        {"dataset": str(args.data), "samples": len(samples)},
        {"forest": str(out)}, {"voting": _sha256(out)},
    )
    print(f"trained voting forest on {len(samples)} pixel samples -> {out}")
    return 0


def cmd_detect(args, cfg):
    index = _load_dataset(args, cfg)
    model = load_cascade(args.baseline) if args.baseline else None
    skeleton = model.skeleton if model else index.skeleton
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with open(out, "w") as fh:
        for i in range(len(index)):
            img = index.image(i)
            baseline = predict_cascade(model, img, index.intrinsics) if model else None
            result = detect_fingers(img, skeleton, cfg.detect, baseline, index.intrinsics)
            fh.write(json.dumps(detection_debug_record(i, result), sort_keys=True) + "\n")
    elapsed = time.perf_counter() - t0
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"), "detect", args,
        {"elapsed_s": elapsed, "images_per_sec": len(index) / elapsed},
        {"dataset": str(args.data), "images": len(index)}, {"dump": str(out)},
        {"baseline": _bundle_hash(args.baseline)} if args.baseline else {},
    )
    print(f"detection dump for {len(index)} images -> {out}")
    return 0


def cmd_refine(args, cfg):
    index = _load_dataset(args, cfg)
    model = load_cascade(args.baseline)
    vforest = load_forest(args.voting)
    if vforest.dim != 3:
        raise HandPoseError("voting forest must have 3D targets")
    if model.skeleton.joint_count != index.skeleton.joint_count:
        raise HandPoseError("baseline model skeleton does not match the dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds_path = out / "predictions.jsonl"
    votes_path = out / "votes.jsonl" if args.dump_votes else None
    stage_totals = [0.0, 0.0, 0.0]
    baselines, refineds = [], []
    t0 = time.perf_counter()
    with open(preds_path, "w") as fh, (
        open(votes_path, "w") if votes_path else _null_ctx()
    ) as vfh:
        for rec in _predict_refined(index, model, vforest, cfg, collect_votes=args.dump_votes):
            baselines.append(rec["baseline"])
            refineds.append(rec["refined"])
            for k in range(3):
                stage_totals[k] += rec["stage_seconds"][k]
            fh.write(json.dumps({
                "sample_id": rec["index"],
                "joints_mm": [[float(x) for x in row] for row in rec["refined"].joints],
                "updated": [bool(b) for b in rec["updated"]],
            }, sort_keys=True) + "\n")
            if votes_path:
                vfh.write(json.dumps({
                    "sample_id": rec["index"], "votes": rec["votes"]
                }, sort_keys=True) + "\n")
    elapsed = time.perf_counter() - t0
    gts = [index.pose(i) for i in range(len(index))]
    try:
        flags = index.stretched_flags(cfg.gesture_table)
    except HandPoseError:
        flags = None
    refined_report = build_report("refine", refineds, gts, flags)
    baseline_report = build_report("baseline", baselines, gts, flags)
    write_report_json(refined_report, out / "report.json")
    write_report_csv(refined_report, out / "report.csv")
    write_report_json(baseline_report, out / "report_baseline.json")
    outputs = {"predictions": str(preds_path), "report": str(out / "report.json")}
    if votes_path:
        outputs["votes"] = str(votes_path)
    _write_manifest(
        out / "manifest.json", "refine", args,
        {
            "elapsed_s": elapsed,
            "images_per_sec": len(index) / elapsed,
            "per_stage_s": {
                "cascade": stage_totals[0], "detect": stage_totals[1],
                "vote": stage_totals[2],
            },
        },
        {"dataset": str(args.data), "images": len(index)}, outputs,
        {"baseline": _bundle_hash(args.baseline), "voting": _sha256(args.voting)},
    )
    print(f"refined {len(index)} images -> {preds_path}")
    print(f"fingertips mean: baseline {baseline_report.fingertips_mean:.2f}mm, "
          f"refined {refined_report.fingertips_mean:.2f}mm")
    return 0


class _null_ctx:
    def __enter__(self):
        return None

    def __exit__(self, *a):
        return False


def cmd_evaluate(args, cfg):
    index = _load_dataset(args, cfg)
    preds_path = Path(args.predictions)
    if not preds_path.is_file():
        raise FileNotFoundError(f"predictions file {preds_path} does not exist")
    skeleton = index.skeleton
    poses = {}
    with open(preds_path) as fh:
        for line in fh:
            rec = json.loads(line)
            poses[int(rec["sample_id"])] = HandPose(
                np.asarray(rec["joints_mm"], dtype=np.float64), skeleton
            )
    if sorted(poses) != list(range(len(index))):
        raise HandPoseError(
            f"predictions cover samples {sorted(poses)[:3]}..., dataset has {len(index)}"
        )
    preds = [poses[i] for i in range(len(index))]
    gts = [index.pose(i) for i in range(len(index))]
    try:
        flags = index.stretched_flags(cfg.gesture_table)
    except HandPoseError:
        flags = None
    report = build_report(args.method, preds, gts, flags)
    t0 = time.perf_counter()
    out_json = Path(str(args.out) + ".json")
    out_csv = Path(str(args.out) + ".csv")
    out_json.parent.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out_json)
    write_report_csv(report, out_csv)
    outputs = {"report_json": str(out_json), "report_csv": str(out_csv)}
    if args.overlays:
        names = save_overlays(
            args.overlays,
            ((i, index.image(i), preds[i]) for i in range(len(index))),
            args.method, index.intrinsics,
        )
        outputs["overlays"] = f"{args.overlays} ({len(names)} images)"
    _write_manifest(
        Path(str(args.out) + ".manifest.json"), "evaluate", args,
        {"elapsed_s": time.perf_counter() - t0},
        {"dataset": str(args.data), "predictions": str(preds_path)},
        outputs, {},
    )
    print(f"overall mean error {report.overall_mean:.2f}mm, "
          f"fingertips {report.fingertips_mean:.2f}mm -> {out_json}")
    return 0


def _bench_backends(frames, cfg, seed):
    """Time the hot kernels under every importable backend."""
    from . import _kernels_numpy
    impls = {"numpy": _kernels_numpy}
    try:
        from . import _kernels_numba
        impls["numba"] = _kernels_numba
    except ImportError:
        pass
    from .geometry import foreground_mask
    img = frames[0]
    mask = np.ascontiguousarray(foreground_mask(img), dtype=np.uint8)
    rng = np.random.default_rng(seed)
    uv = np.argwhere(mask)[:, ::-1]
    us = np.ascontiguousarray(uv[:, 0], dtype=np.int64)
    vs = np.ascontiguousarray(uv[:, 1], dtype=np.int64)
    scale = 241.42 / img.depths[vs, us].astype(np.float64)
    depths3 = img.depths[None]
    img_idx = np.zeros(us.shape[0], dtype=np.int64)
    idx = np.arange(us.shape[0], dtype=np.int64)
    targets = rng.normal(0, 5, (us.shape[0], 3))
    row_sq = np.einsum("ij,ij->i", targets, targets)
    du = rng.uniform(-60, 60, (4, 64))
    q01 = np.sort(rng.random((64, 50)), axis=1)
    joints = rng.normal(0, 50, (21, 3)) + np.array([0, 0, 600.0])
    pts = np.column_stack([
        (us - 160) * img.depths[vs, us] / 241.42,
        (vs - 120) * img.depths[vs, us] / 241.42,
        img.depths[vs, us],
    ]).astype(np.float64)
    results = {}
    for name, impl in impls.items():
        timings = {}
        impl.edt_sq(mask)  # warm up compilation
        t0 = time.perf_counter()
        for _ in range(20):
            impl.edt_sq(mask)
        timings["edt_sq_ms"] = (time.perf_counter() - t0) / 20 * 1e3
        impl.pair_responses(depths3, img_idx, us, vs, scale, img.background_value,
                            idx, du[0, 0], du[1, 0], du[2, 0], du[3, 0])
        t0 = time.perf_counter()
        for k in range(20):
            impl.pair_responses(depths3, img_idx, us, vs, scale, img.background_value,
                                idx, du[0, k % 64], du[1, k % 64], du[2, k % 64], du[3, k % 64])
        timings["pair_responses_ms"] = (time.perf_counter() - t0) / 20 * 1e3
        impl.node_split(depths3, img_idx, us, vs, scale, img.background_value,
                        targets, row_sq, idx, du[0], du[1], du[2], du[3], q01, 5)
        t0 = time.perf_counter()
        impl.node_split(depths3, img_idx, us, vs, scale, img.background_value,
                        targets, row_sq, idx, du[0], du[1], du[2], du[3], q01, 5)
        timings["node_split_64feat_ms"] = (time.perf_counter() - t0) * 1e3
        impl.nearest_joint(pts, joints)
        t0 = time.perf_counter()
        for _ in range(50):
            impl.nearest_joint(pts, joints)
        timings["nearest_joint_ms"] = (time.perf_counter() - t0) / 50 * 1e3
        results[name] = timings
    return results


def cmd_bench(args, cfg):
    from .data_io import make_synth_index

    model = load_cascade(args.baseline)
    vforest = load_forest(args.voting)
    index = make_synth_index(args.frames, args.seed, cfg.synth, cfg.intrinsics,
                             cfg.background, model.skeleton)
    stage_totals = [0.0, 0.0, 0.0]
    t0 = time.perf_counter()
    count = 0
    for rec in _predict_refined(index, model, vforest, cfg):
        for k in range(3):
            stage_totals[k] += rec["stage_seconds"][k]
        count += 1
    elapsed = time.perf_counter() - t0
    fps = count / elapsed
    timing = {
        "elapsed_s": elapsed,
        "images_per_sec": fps,
        "per_stage_s": {
            "cascade": stage_totals[0], "detect": stage_totals[1], "vote": stage_totals[2],
        },
        "per_stage_ms_per_image": {
            "cascade": stage_totals[0] / count * 1e3,
            "detect": stage_totals[1] / count * 1e3,
            "vote": stage_totals[2] / count * 1e3,
        },
    }
    comparison = None
    if args.compare_backends:
        comparison = _bench_backends([index.image(0)], cfg, args.seed)
        timing["backend_comparison"] = comparison
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        out, "bench", args, timing,
        {"frames": count, "width": cfg.synth.width, "height": cfg.synth.height},
        {}, {"baseline": _bundle_hash(args.baseline), "voting": _sha256(args.voting)},
    )
    print(f"end-to-end single-thread: {fps:.2f} images/sec over {count} frames "
          f"({cfg.synth.width}x{cfg.synth.height}, backend={backend.BACKEND})")
    for stage, ms in timing["per_stage_ms_per_image"].items():
        print(f"  {stage:8s} {ms:7.2f} ms/image")
    if comparison:
        print("backend comparison (lower is better):")
        for name, t in comparison.items():
            desc = ", ".join(f"{k}={v:.2f}" for k, v in t.items())
            print(f"  {name:6s} {desc}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="handpose",
        description="Hand pose estimation from depth images (forest baseline + "
                    "stretched-finger voting refinement)",
    )
    p.add_argument("--config", type=Path, default=None, help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; results are identical for any value")
    sub = p.add_subparsers(dest="command", required=True)

    def add_data(sp):
        sp.add_argument("--data", required=True, help="dataset root directory")
        sp.add_argument("--format", choices=("msra", "icvl"), default="msra")
        sp.add_argument("--icvl-split", choices=("train", "test"), default="train")

    sp = sub.add_parser("synth-generate", help="render a synthetic dataset (MSRA layout)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.set_defaults(func=cmd_synth_generate)

    sp = sub.add_parser("train-baseline", help="train the cascade model")
    add_data(sp)
    sp.add_argument("--out", required=True, help="output bundle directory")
    sp.set_defaults(func=cmd_train_baseline)

    sp = sub.add_parser("train-voting", help="train the voting forest")
    add_data(sp)
    sp.add_argument("--out", required=True, help="output forest file")
    sp.set_defaults(func=cmd_train_voting)

    sp = sub.add_parser("detect", help="stretched-finger detection debug dump")
    add_data(sp)
    sp.add_argument("--out", required=True, help="output JSONL file")
    sp.add_argument("--baseline", default=None, help="cascade bundle for identities")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("refine", help="run the full pipeline over a dataset")
    add_data(sp)
    sp.add_argument("--baseline", required=True, help="cascade bundle directory")
    sp.add_argument("--voting", required=True, help="voting forest file")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--dump-votes", action="store_true",
                    help="write per-image vote audit records")
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("evaluate", help="score a predictions file")
    add_data(sp)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--out", required=True, help="output path prefix")
    sp.add_argument("--method", default="refine", help="method label for the report")
    sp.add_argument("--overlays", default=None, help="directory for overlay images")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", help="single-thread throughput benchmark")
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--voting", required=True)
    sp.add_argument("--frames", type=int, default=200)
    sp.add_argument("--out", required=True, help="benchmark manifest path")
    sp.add_argument("--compare-backends", action="store_true",
                    help="also time hot kernels under numba and numpy")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set or ())
        return args.func(args, cfg)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except HandPoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
