"""Command-line entry point.

Every subcommand accepts ``--config`` (a JSON file whose top-level sections
mirror :class:`~groundnlq.config.RunConfig`) and repeated ``--set
section.key=value`` overrides, and writes the resolved configuration to
``config.json`` in its output directory.

Exit codes: 0 success, 1 validation error (bad config, data or usage),
2 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, TrainConfig
from .data import DataError, GroundingDataset, build_pretrain_corpus, load_annotations, load_feature_index, load_narrations, synthetic_dataset, write_annotations
from .decode_eval import ensemble_predictions, evaluate, read_predictions, write_predictions
from .training import Checkpoint, TrainingDiverged, grad_check, predict, run_stage

logger = logging.getLogger("groundnlq")

CONFIG_FILE = "config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(path: str | None, overrides: list[str]) -> RunConfig:
    data = RunConfig().to_dict()
    # stage-dependent fields stay unset so the stage picks their defaults
    data["train"] = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    if path:
        loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(loaded) - set(RunConfig.SECTIONS)
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
        for section, values in loaded.items():
            data[section].update(values)
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, _, field = key.partition(".")
        if not sep or section not in data or field not in data[section]:
            raise ConfigError(f"override {item!r} does not name an existing section.key")
        data[section][field] = _parse_value(raw)
    return RunConfig.from_dict(data)


def _write_config(out_dir: Path, cfg: RunConfig, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {**cfg.to_dict(), **extra}
    (out_dir / CONFIG_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _load_dataset(args) -> GroundingDataset:
    root = Path(args.data)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    if not args.annotations:
        return GroundingDataset.load(root)
    ds = None
    for ann in args.annotations:
        part = GroundingDataset.load(root, ann)
        ds = part if ds is None else ds.merged(part)
    return ds


# ------------------------------------------------------------------ commands


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    ds = synthetic_dataset(cfg.synth)
    if args.append and (out / "annotations.jsonl").exists():
        prev = load_annotations(out / "annotations.jsonl")
        ds.samples = prev + ds.samples
    ds.save(out)
    _write_config(out, cfg, command="synth")
    print(f"wrote {len(ds.features)} videos, {len(ds.queries)} queries to {out}")
    return 0


def cmd_build_corpus(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    index = load_feature_index(args.features)
    narrations = load_narrations(args.narrations)
    result = build_pretrain_corpus(narrations, cfg.jitter, index)
    out.mkdir(parents=True, exist_ok=True)
    write_annotations(out / "annotations.jsonl", result.samples)
    _write_config(out, cfg, command="build-corpus", skipped=result.skipped)
    print(f"built {len(result.samples)} pretraining samples ({result.skipped} narrations skipped)")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if args.init:
        cfg.train.init_checkpoint = args.init
    ds = _load_dataset(args)
    out = Path(args.out)
    _write_config(out, cfg, command=args.command)
    ckpt = run_stage(cfg.train, cfg.model, ds, cfg.assign, cfg.decode, out_dir=out)
    best = ckpt.manifest.get("best", {})
    print(f"{args.command}: best epoch {ckpt.manifest['epoch']} {best} -> {out}")
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    ds = _load_dataset(args)
    samples = ds.split(args.split)
    if not samples:
        raise DataError(f"no samples in split {args.split!r}")
    preds = predict(model, samples, ds, cfg.decode)
    out = Path(args.out)
    _write_config(out, cfg, command="predict", checkpoint=str(args.checkpoint))
    write_predictions(out / "predictions.jsonl", preds)
    print(f"wrote predictions for {len(preds)} queries to {out / 'predictions.jsonl'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    preds = read_predictions(args.preds)
    samples = load_annotations(args.gt)
    if args.split:
        samples = [s for s in samples if s.split == args.split]
    gts = {s.query_id: s.moment for s in samples}
    result = evaluate(preds, gts)
    print(result.table())
    if args.out:
        out = Path(args.out)
        _write_config(out, cfg, command="eval")
        (out / "eval.json").write_text(json.dumps({"recall": result.recall, "n_queries": result.n_queries}, indent=2))
    return 0


def cmd_ensemble(args, cfg: RunConfig) -> int:
    weights = args.weights or [1.0] * len(args.preds)
    if len(weights) != len(args.preds):
        raise ConfigError("--weights must give one weight per --preds file")
    files = [read_predictions(p) for p in args.preds]
    queries = sorted(set().union(*files))
    merged = {
        q: ensemble_predictions([(f.get(q, []), w) for f, w in zip(files, weights)], cfg.decode)
        for q in queries
    }
    out = Path(args.out)
    _write_config(out, cfg, command="ensemble", inputs=[str(p) for p in args.preds], weights=weights)
    write_predictions(out / "predictions.jsonl", merged)
    print(f"ensembled {len(files)} prediction files over {len(queries)} queries")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    tol = args.tolerance if args.tolerance is not None else (1e-6 if args.precision == "f64" else 1e-3)
    report = grad_check(cfg.model, seed=args.seed, tolerance=tol, precision=args.precision, T=args.T)
    print(f"precision={report.precision} max_rel_err={report.max_rel_err:.3e} tolerance={tol:g} "
          f"{'PASS' if report.passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        _write_config(out, cfg, command="gradcheck")
        (out / "gradcheck.json").write_text(json.dumps({
            "max_rel_err": report.max_rel_err, "passed": report.passed,
            "per_param": report.per_param, "below_noise": report.below_noise,
        }, indent=2))
    return 0 if report.passed else 1


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groundnlq", description="Temporal grounding of natural language queries in long videos.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config with sections model/train/assign/decode/jitter/synth")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth", help="write a synthetic planted-signal dataset")
    common(p)
    p.add_argument("--append", action="store_true", help="append to an existing annotations file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-corpus", help="jittered pretraining samples from narrations")
    common(p)
    p.add_argument("--narrations", required=True)
    p.add_argument("--features", required=True, help="feature directory (sidecars give durations)")
    p.set_defaults(func=cmd_build_corpus)

    for name in ("pretrain", "finetune"):
        p = sub.add_parser(name, help=f"run the {name} stage")
        common(p)
        p.add_argument("--data", required=True, help="dataset directory with features/ and queries/")
        p.add_argument("--annotations", action="append", help="annotation files (default DATA/annotations.jsonl)")
        p.add_argument("--init", help="checkpoint directory to start from")
        p.set_defaults(func=cmd_train, stage=name)

    p = sub.add_parser("predict", help="write top-K predictions as JSON Lines")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--annotations", action="append")
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="Recall@{1,5}@{0.3,0.5} of a prediction file")
    common(p, out_required=False)
    p.add_argument("--preds", required=True)
    p.add_argument("--gt", required=True, help="annotation JSON Lines with ground-truth moments")
    p.add_argument("--split", help="only evaluate queries of this split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="merge prediction files with weighted soft-NMS")
    common(p)
    p.add_argument("--preds", action="append", required=True)
    p.add_argument("--weights", type=float, nargs="+")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("gradcheck", help="compare autograd with finite differences on a tiny model")
    common(p, out_required=False)
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--T", type=int, default=16)
    p.set_defaults(func=cmd_gradcheck, tiny=True)
    return parser


TINY_MODEL = {"d_model": 32, "n_heads": 4, "window": 5, "D_video_in": 8, "D_text_in": 6}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "tiny", False):
            args.overrides = [f"model.{k}={v}" for k, v in TINY_MODEL.items()] + args.overrides
        if getattr(args, "stage", None):
            args.overrides = args.overrides + [f"train.stage={args.stage}"]
        cfg = resolve_config(args.config, args.overrides)
        return args.func(args, cfg)
    except (ConfigError, DataError, TrainingDiverged, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        path = getattr(exc, "filename", None)
        print(f"I/O error: {path or ''} {exc.strerror or exc}".strip(), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
