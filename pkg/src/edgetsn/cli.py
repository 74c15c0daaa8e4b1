"""Command line entry point: ``python -m edgetsn <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import memory, synthetic, tsn
from .data import (
    ManifestRecord, RunConfig, append_manifest, ingest, load_clip, load_dataset,
    num_classes, read_manifest, top1_accuracy, write_clip, write_edgv, write_manifest,
)
from .errors import ContractError, DataError, EdgeTSNError, InvariantError, ShapeError
from .flow import clip_to_flow
from .sampling import CROP_STRATEGIES, VideoClip

log = logging.getLogger("edgetsn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _manifest_base(path) -> Path:
    return Path(path).resolve().parent


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    base = _manifest_base(args.manifest) if args.manifest else None
    record = ingest(args.input, args.out, fps=args.fps, src_fps=args.src_fps, label=args.label,
                    class_name=args.class_name, manifest_base=base)
    if args.manifest:
        append_manifest(args.manifest, record)
    print(record.to_json())
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "raw").mkdir(parents=True, exist_ok=True)
    splits = [("train", args.per_class, args.seed), ("test", args.test_per_class, args.seed + 1)]
    for split, per_class, seed in splits:
        if per_class == 0:
            continue
        records = []
        for v in synthetic.make_dataset(per_class, seed, static_classes=args.static_classes):
            name = f"{split}_{v.clip.source_id}"
            raw = out / "raw" / f"{name}.edgv"
            write_edgv(raw, synthetic.to_uint8(v.clip), v.clip.fps)
            records.append(ingest(raw, out / "rgb" / name, fps=v.clip.fps, label=v.label,
                                  class_name=v.class_name, manifest_base=out))
        write_manifest(out / f"{split}.jsonl", records)
        print(f"{split}: {len(records)} videos -> {out / f'{split}.jsonl'}")
    return EXIT_OK


def cmd_flow(args) -> int:
    records = read_manifest(args.manifest)
    base = _manifest_base(args.manifest)
    out = Path(args.out)
    manifest_out = Path(args.manifest_out) if args.manifest_out else out / "manifest.jsonl"
    manifest_out.parent.mkdir(parents=True, exist_ok=True)
    out_base = manifest_out.resolve().parent
    flows = []
    for r in records:
        if r.modality != "rgb":
            raise DataError(f"{r.video_dir}: flow needs rgb input, got {r.modality}")
        clip = load_clip(r, base)
        fclip = clip_to_flow(clip, args.window, args.vmax)
        vdir = out / Path(r.video_dir).name
        write_clip(fclip, vdir)
        rel = os.path.relpath(vdir.resolve(), out_base)
        flows.append(ManifestRecord(rel, r.label, r.class_name, len(fclip), "flow", r.fps,
                                    float(args.vmax), int(args.window)))
    write_manifest(manifest_out, flows)
    print(f"{len(flows)} flow videos -> {manifest_out}")
    return EXIT_OK


def _spec_for(records, config: RunConfig) -> bb.BackboneSpec:
    modalities = {r.modality for r in records}
    if len(modalities) != 1:
        raise DataError(f"manifest mixes modalities {sorted(modalities)}")
    return bb.default_spec(num_classes(records), modalities.pop(), config.stack, tuple(config.widths))


def cmd_train(args) -> int:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.optimizer.epochs = args.epochs
    records = read_manifest(args.manifest)
    dataset, skipped = load_dataset(records, _manifest_base(args.manifest))
    spec = _spec_for(records, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    log_path = out / "metrics.jsonl"
    log_path.unlink(missing_ok=True)
    weights, metrics = tsn.train(dataset, spec, config.consensus_spec(), config.optimizer_config(),
                                 config.train_settings(), log_path=log_path, skipped=skipped)
    weights.save(out)
    last = metrics[-1] if metrics else {}
    print(json.dumps({"epochs": len(metrics), "train_top1": last.get("train_top1"),
                      "mean_loss": last.get("mean_loss"), "skipped": len(skipped)}))
    return EXIT_OK


def _predict(weights, records, base, args, consensus):
    preds = []
    for i, r in enumerate(records):
        clip = load_clip(r, base)
        preds.append(tsn.predict_video(weights, clip, args.k, args.crops, consensus,
                                       crop_size=args.crop_size, seed=[args.seed, i]))
    return np.stack(preds)


def _run_config_near(weights_dir) -> RunConfig:
    path = Path(weights_dir) / "config.json"
    return RunConfig.load(path) if path.exists() else RunConfig()


def cmd_eval(args) -> int:
    records = read_manifest(args.manifest)
    weights = bb.BackboneWeights.load(args.weights)
    config = _run_config_near(args.weights)
    if args.k is None:
        args.k = config.k_test
    if args.crop_size is None:
        args.crop_size = config.crop_size
    probs = _predict(weights, records, _manifest_base(args.manifest), args, config.consensus_spec())
    if args.weights_flow:
        if not args.manifest_flow:
            raise UsageError("--weights-flow needs --manifest-flow")
        frecords = read_manifest(args.manifest_flow)
        if [r.label for r in frecords] != [r.label for r in records]:
            raise DataError("rgb and flow manifests must list the same videos in the same order")
        fweights = bb.BackboneWeights.load(args.weights_flow)
        fconfig = _run_config_near(args.weights_flow)
        fprobs = _predict(fweights, frecords, _manifest_base(args.manifest_flow), args,
                          fconfig.consensus_spec())
        probs = np.stack([tsn.fuse_streams(p, q, args.fuse) for p, q in zip(probs, fprobs)])
    labels = [r.label for r in records]
    acc = top1_accuracy(probs, labels)
    out = Path(args.out) if args.out else None
    lines = []
    for r, p in zip(records, probs):
        lines.append(json.dumps({"video_dir": r.video_dir, "label": r.label,
                                 "pred": int(np.argmax(p)), "probs": p.tolist()}))
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("".join(line + "\n" for line in lines))
    else:
        for line in lines:
            print(line)
    print(json.dumps({"top1": acc, "videos": len(labels), "k": args.k, "crops": args.crops}))
    return EXIT_OK


def cmd_inflate(args) -> int:
    weights2d = bb.BackboneWeights.load(args.weights2d)
    sizes = bb.load_temporal_sizes(args.temporal_sizes) if args.temporal_sizes \
        else bb.default_temporal_sizes(weights2d.spec)
    spec3d, weights3d = bb.inflate_backbone(weights2d.spec, weights2d, sizes)
    weights3d.save(args.out)
    print(json.dumps({"out": str(args.out), "fingerprint": spec3d.fingerprint(),
                      "temporal_sizes": sizes}))
    return EXIT_OK


def cmd_bench_mem(args) -> int:
    if args.spec in (None, "default"):
        spec = bb.default_spec(args.classes)
    else:
        spec = bb.BackboneSpec.load(args.spec)
    strategies = [s for s in args.crops.split(",") if s]
    if not strategies:
        raise UsageError("--crops needs at least one strategy")
    frames = None
    if spec.dims == 3:
        frames = args.frames if args.frames is not None else bb.min_clip_length(spec)
    input_shape = spec.input_shape(args.crop_size, args.crop_size, frames)
    reports = [memory.profile_inference(spec, memory.Protocol(args.k, s, args.batch), input_shape,
                                        args.architecture) for s in strategies]
    result = {"reports": [r.to_dict() for r in reports]}
    if len(reports) > 1:
        ref = reports[0].peak_activation_bytes
        result["activation_ratio_vs_first"] = [r.peak_activation_bytes / ref for r in reports]
    if args.measure:
        weights = bb.init_weights(spec, args.seed)
        rng = np.random.default_rng(args.seed)
        channels = 3 if spec.modality == "rgb" else 2
        t = 2 * args.k + (frames or spec.stack)
        clip = VideoClip(rng.uniform(size=(t, channels, args.input_size, args.input_size)),
                         spec.modality)
        measured = []
        for s in strategies:
            measured.append(memory.measure_runtime_peak(
                lambda s=s: tsn.predict_video(weights, clip, args.k, s, crop_size=args.crop_size,
                                              seed=args.seed)))
        result["measured_peak_bytes"] = measured
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    print(memory.format_table(reports), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgetsn", description="Temporal segment networks on small devices.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="resample a raw video into PPM frames")
    s.add_argument("--in", dest="input", required=True, help="frame directory or .edgv file")
    s.add_argument("--out", required=True)
    s.add_argument("--fps", type=float, default=25.0)
    s.add_argument("--src-fps", type=float, help="source rate (frame directories carry none)")
    s.add_argument("--label", type=int, default=0)
    s.add_argument("--class-name", default="")
    s.add_argument("--manifest", help="manifest to append the record to")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate the synthetic motion dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--test-per-class", type=int, default=20)
    s.add_argument("--static-classes", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("flow", help="compute a flow-modality dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--window", type=int, default=3, help="window radius")
    s.add_argument("--vmax", type=float, default=8.0)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest-out", help="default: OUT/manifest.jsonl")
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("train", help="train a TSN stream")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="RunConfig JSON (defaults otherwise)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="predict and score videos")
    s.add_argument("--manifest", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--weights-flow")
    s.add_argument("--manifest-flow")
    s.add_argument("--fuse", type=float, default=0.5, help="rgb weight in the fused score")
    s.add_argument("--k", type=int)
    s.add_argument("--crops", choices=CROP_STRATEGIES, default="center1")
    s.add_argument("--crop-size", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="predictions JSON-lines file (default: stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inflate", help="inflate 2D weights to 3D")
    s.add_argument("--weights2d", required=True)
    s.add_argument("--temporal-sizes", help="JSON {layer: Nt}; default uses each kernel's size")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inflate)

    s = sub.add_parser("bench-mem", help="memory report for test-time protocols")
    s.add_argument("--spec", default="default", help="backbone spec JSON or 'default'")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--k", type=int, default=25)
    s.add_argument("--crops", default="center1,tencrop")
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--input-size", type=int, default=32)
    s.add_argument("--crop-size", type=int, default=28)
    s.add_argument("--frames", type=int, help="snippet length for 3D specs (default: shortest valid)")
    s.add_argument("--architecture", default="toy")
    s.add_argument("--measure", action="store_true", help="also measure runtime peaks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench_mem)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"edgetsn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"edgetsn: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, OSError) as exc:
        print(f"edgetsn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, EdgeTSNError) as exc:
        print(f"edgetsn: internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
