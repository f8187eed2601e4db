"""Command-line entry point: generate, train, evaluate, dedup, fuse, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

SCHEMA_VERSION = 1

log = logging.getLogger("platescan")


class ConfigError(ValueError):
    pass


def load_config(path: str | Path) -> dict:
    """Read a YAML or JSON config tree and check its ``schema_version``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = yaml.safe_load(text) or {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    ver = cfg.get("schema_version")
    if ver != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version {ver!r} is not supported (expected {SCHEMA_VERSION})")
    return cfg


def cmd_generate(args) -> int:
    from .synth import DatasetConfig, make_dataset

    cfg = load_config(args.config)
    dcfg = DatasetConfig.from_dict(cfg.get("dataset", {}))
    manifests = make_dataset(dcfg, args.out)
    for split, p in manifests.items():
        print(f"{split}\t{p}")
    return 0


def cmd_train(args) -> int:
    from .train import TrainConfig, train_from_manifest

    cfg = load_config(args.config)
    tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    ckpt = train_from_manifest(tcfg, args.train, args.out, log_every=args.log_every)
    print(ckpt)
    return 0


def cmd_evaluate(args) -> int:
    from .annotations import read_manifest
    from .data import load_samples
    from .evaluate import (
        predict_results, predictor_from_checkpoint, report_splits, results_from_prediction_manifest, write_reports,
    )

    if args.pred:
        gt = [a.validate() for a in read_manifest(args.gt)]
        # predictions may be empty or unsorted; they are re-sorted when paired
        pred = read_manifest(args.pred)
        results = results_from_prediction_manifest(pred, gt)
    else:
        predictor = predictor_from_checkpoint(args.checkpoint, args.prompt_index)
        results = predict_results(predictor, load_samples(args.gt), threshold=args.threshold)
    reports = report_splits(results, args.mode, args.per_split, weighted=args.weighted)
    title = f"mode={args.mode}"
    if args.out:
        paths = write_reports(reports, args.out, title)
        print(paths["table"].read_text(encoding="utf-8"), end="")
    else:
        from .metrics import format_table

        print(format_table(reports, title))
    return 0


def _read_features(path: Path):
    ids, feats = [], []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                ids.append(rec["image_id"])
                feats.append(rec["feature"])
    return ids, feats


def cmd_dedup(args) -> int:
    from .annotate import EncoderFeatures, dedup

    if args.features:
        ids, feats = _read_features(Path(args.features))
    else:
        from .data import load_samples
        from .model import load_checkpoint

        model, extra = load_checkpoint(args.checkpoint)
        extract = EncoderFeatures(model, int(extra["input_size"]))
        samples = load_samples(args.manifest)
        ids = [s.ann.image_id for s in samples]
        feats = [extract(s.image).tolist() for s in samples]
    res = dedup(feats, ids, args.threshold)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for rep, members in zip(res.representatives, res.clusters):
            out.write(json.dumps({"representative": rep, "members": members}) + "\n")
    finally:
        if args.out:
            out.close()
    print(f"{len(ids)} images, {len(res.clusters)} clusters", file=sys.stderr)
    return 0


def cmd_fuse(args) -> int:
    from .annotate import AnnotationBundle, VoteRequest, fuse_annotations, resolve_vote
    from .annotations import read_manifest, write_manifest

    per_image: dict = {}
    for path in args.annotations:
        for a in read_manifest(path):
            a.validate()
            per_image.setdefault(a.image_id, []).append(a)
    fused, log_recs = [], []
    for image_id in sorted(per_image):
        out = fuse_annotations(AnnotationBundle(image_id, per_image[image_id]), args.eps)
        if isinstance(out, VoteRequest):
            chosen = resolve_vote(out)
            fused.append(chosen)
            log_recs.append({"image_id": image_id, "status": "voted", "reason": out.reason})
        else:
            fused.append(out.fused)
            log_recs.append({"image_id": image_id, "status": "fused", "flags": out.flags})
    write_manifest(args.out, fused)
    log_path = Path(args.out).with_suffix(".log.jsonl")
    with log_path.open("w", encoding="utf-8") as fh:
        for r in log_recs:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    n_vote = sum(r["status"] == "voted" for r in log_recs)
    print(f"{len(fused)} images: {len(fused) - n_vote} fused, {n_vote} voted")
    return 0


def cmd_report(args) -> int:
    from .evaluate import read_reports
    from .metrics import format_table

    for path in args.records:
        print(format_table(read_reports(path), title=str(path)))
        print()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="platescan", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic train/test dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", required=True)
    t.add_argument("--train", required=True, help="training manifest (.jsonl)")
    t.add_argument("--out", required=True)
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred", help="predicted manifest")
    src.add_argument("--checkpoint", help="trained checkpoint; predictions are made on the --gt images")
    e.add_argument("--gt", required=True)
    e.add_argument("--mode", choices=("pixel", "paper"), default="pixel")
    e.add_argument("--per-split", action="store_true")
    e.add_argument("--weighted", action="store_true", help="weight split averages by image count")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--prompt-index", type=int, default=0)
    e.add_argument("--out", help="directory for report.txt and report.jsonl")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("dedup", help="cluster near-duplicate images")
    fsrc = d.add_mutually_exclusive_group(required=True)
    fsrc.add_argument("--features", help="jsonl with image_id and feature per line")
    fsrc.add_argument("--checkpoint", help="use pooled encoder features of this model")
    d.add_argument("--manifest", help="images to embed (with --checkpoint)")
    d.add_argument("--threshold", type=float, required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_dedup)

    f = sub.add_parser("fuse", help="fuse multi-annotator manifests, voting on disagreement")
    f.add_argument("annotations", nargs="+", help="one manifest per annotator")
    f.add_argument("--eps", type=float, default=3.5, help="max point deviation in px for fusion")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("report", help="print tables from report.jsonl files")
    r.add_argument("records", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "dedup" and args.checkpoint and not args.manifest:
        print("dedup --checkpoint requires --manifest", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
