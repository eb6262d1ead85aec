"""Command-line entry point: ``ner-rpn <command> --config run.cfg [--set key=value ...]``.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import ConfigError, RunConfig, check_paths, dump_config, load_config
from .corpus import Dataset, length_coverage, load_dataset
from .encoder import Vocab
from .metrics import classify_errors, emit_report, evaluate, write_error_csv, plot_errors
from .region_proposal import region_metrics, write_candidates
from .stage2 import write_examples

logger = logging.getLogger("ner_rpn")

CHECKPOINT = "checkpoint.pt"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _load(config: RunConfig, path: str | Path) -> Dataset:
    kwargs = {"max_len": config.encoder.max_len}
    fmt = config.paths.format
    if fmt == "conll" or (fmt == "auto" and Path(path).suffix not in (".jsonl", ".json")):
        kwargs["scheme"] = config.paths.tag_scheme
    return load_dataset(path, fmt, **kwargs)


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.effective")
    return out


def save_checkpoint(path: Path, config: RunConfig, vocab: Vocab, types, stage1, stage2=None) -> None:
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "arch_hash": config.arch_hash(),
            "config": {k: v for k, v in config.to_flat().items()},
            "vocab": vocab.itos,
            "type_inventory": list(types),
            "stage1": stage1.state_dict(),
            "stage2": None if stage2 is None else stage2.state_dict(),
        },
        path,
    )


def load_checkpoint(path: Path, config: RunConfig, need_stage2: bool = True):
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}; run 'train' first")
    blob = torch.load(path, weights_only=True)
    if blob.get("arch_hash") != config.arch_hash():
        raise CheckpointError(
            f"checkpoint {path} was trained with a different model configuration "
            f"(hash {blob.get('arch_hash')} != {config.arch_hash()})"
        )
    if need_stage2 and blob["stage2"] is None:
        raise CheckpointError(f"checkpoint {path} has no stage-2 model; run 'train-stage2'")
    vocab = Vocab(blob["vocab"][3:])
    stage1, stage2 = pipeline.build_models(vocab, blob["type_inventory"], config.encoder, config.stage2, config.seed)
    stage1.load_state_dict(blob["stage1"])
    if blob["stage2"] is not None:
        stage2.load_state_dict(blob["stage2"])
    stage1.eval()
    stage2.eval()
    return vocab, blob["type_inventory"], stage1, stage2


# ------------------------------------------------------------------ commands

def cmd_train_stage1(config: RunConfig, args) -> None:
    check_paths(config, ["train"])
    out = _out_dir(config)
    data = _load(config, config.paths.train)
    vocab = Vocab.from_sentences(data)
    stage1, stage2 = pipeline.build_models(vocab, data.type_inventory, config.encoder, config.stage2, config.seed)
    losses = pipeline.train_stage1(stage1, data, config.stage1, config.train, config.seed)
    cands = pipeline.propose(stage1, data, config.stage1, config.train.batch_size)
    write_candidates(out / "candidates.jsonl", data, cands)
    p, r = region_metrics(cands, data)
    _write_json(out / "stage1_report.json", {"stage1_losses": losses, "region_precision": p, "region_recall": r})
    save_checkpoint(out / CHECKPOINT, config, vocab, data.type_inventory, stage1)
    print(f"stage1 region precision {p:.4f} recall {r:.4f}")


def cmd_train_stage2(config: RunConfig, args) -> None:
    check_paths(config, ["train"])
    out = _out_dir(config)
    data = _load(config, config.paths.train)
    vocab, types, stage1, stage2 = load_checkpoint(out / CHECKPOINT, config, need_stage2=False)
    if config.encoder.share:
        stage2.encoder = stage1.encoder
    cands = pipeline.propose(stage1, data, config.stage1, config.train.batch_size)
    examples, counts = pipeline.build_stage2_examples(data, cands, config.stage1, config.stage2, config.seed)
    write_examples(out / "stage2_examples.jsonl", examples)
    losses = pipeline.train_stage2(stage2, examples, config.stage2, config.train, config.seed)
    _write_json(out / "stage2_report.json", {"stage2_losses": losses, "example_counts": counts})
    save_checkpoint(out / CHECKPOINT, config, vocab, types, stage1, stage2)
    print(f"stage2 final loss {losses[-1]:.4f}" if losses else "stage2 trained for 0 epochs")


def cmd_train(config: RunConfig, args) -> None:
    check_paths(config, ["train"])
    out = _out_dir(config)
    data = _load(config, config.paths.train)
    vocab = Vocab.from_sentences(data)
    stage1, stage2, report = pipeline.train_end_to_end(
        data, config.stage1, config.stage2, config.train, config.seed, config.encoder, vocab
    )
    _write_json(out / "training_report.json", report.to_dict())
    save_checkpoint(out / CHECKPOINT, config, vocab, data.type_inventory, stage1, stage2)
    print(f"trained: region P/R {report.region_precision:.4f}/{report.region_recall:.4f}, "
          f"stage2 examples {report.example_counts.get('examples', 0)}")


def _eval_input(config: RunConfig, args) -> str:
    path = args.input or config.paths.test or config.paths.dev
    if not path:
        raise ConfigError(["paths.test: required (or pass --input)"])
    if not Path(path).exists():
        raise ConfigError([f"input: file {path!r} does not exist"])
    return path


def _predict(config: RunConfig, args):
    out = _out_dir(config)
    data = _load(config, _eval_input(config, args))
    _, _, stage1, stage2 = load_checkpoint(out / CHECKPOINT, config)
    preds = pipeline.predict_corpus(data, stage1, stage2, config.stage1, config.stage2, config.train.batch_size)
    return out, data, preds


def cmd_predict(config: RunConfig, args) -> None:
    out, data, preds = _predict(config, args)
    path = Path(args.output) if args.output else out / "predictions.jsonl"
    pipeline.write_predictions(path, data, preds)
    print(f"wrote {sum(map(len, preds))} predictions to {path}")


def cmd_evaluate(config: RunConfig, args) -> None:
    if args.predictions:
        out = _out_dir(config)
        data = _load(config, _eval_input(config, args))
        preds = pipeline.read_predictions(args.predictions, data)
    else:
        out, data, preds = _predict(config, args)
        pipeline.write_predictions(out / "predictions.jsonl", data, preds)
    result = evaluate(preds, data)
    errors = classify_errors(preds, data)
    emit_report(result, errors, out, plot=args.plot)
    print(f"precision {result.precision:.4f} recall {result.recall:.4f} f1 {result.f1:.4f}")


def cmd_profile_errors(config: RunConfig, args) -> None:
    out = _out_dir(config)
    data = _load(config, _eval_input(config, args))
    pred_path = args.predictions or out / "predictions.jsonl"
    if not Path(pred_path).exists():
        raise ConfigError([f"predictions: file {str(pred_path)!r} does not exist"])
    report = classify_errors(pipeline.read_predictions(pred_path, data), data)
    write_error_csv(report, out / "errors.csv")
    if args.plot:
        plot_errors(report, out / "errors.png")
    for cls, n in report.counts.items():
        print(f"{cls}\t{n}")


def cmd_coverage(config: RunConfig, args) -> None:
    path = args.input or config.paths.train
    if not path or not Path(path).exists():
        raise ConfigError([f"paths.train: file {path!r} does not exist"])
    data = _load(config, path)
    for limit in args.limits:
        print(f"{limit}\t{length_coverage(data, limit):.6f}")


def cmd_sweep_threshold(config: RunConfig, args) -> None:
    out = _out_dir(config)
    data = _load(config, _eval_input(config, args))
    _, types, stage1, stage2 = load_checkpoint(out / CHECKPOINT, config)
    cands = pipeline.propose(stage1, data, config.stage1, config.train.batch_size)
    scored = pipeline.score_candidates(stage2, data, cands, config.train.batch_size)
    with open(out / "scores.jsonl", "w", encoding="utf-8") as f:
        for sent, rows in zip(data, scored):
            f.write(json.dumps({
                "sentence_id": sent.id,
                "candidates": [
                    {"start": s.span.start, "end": s.span.end, "entityness": s.entityness_prob, "type_probs": s.type_probs}
                    for s in rows
                ],
            }) + "\n")
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "n_pred", "precision", "recall", "f1"])
        for thr in args.thresholds:
            preds = [pipeline.select_predictions(s, thr, types) for s in scored]
            res = evaluate(preds, data)
            n_pred = sum(map(len, preds))
            w.writerow([repr(thr), n_pred, repr(res.precision), repr(res.recall), repr(res.f1)])
            print(f"{thr}\t{n_pred}\t{res.f1:.4f}")


COMMANDS = {
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "profile-errors": cmd_profile_errors,
    "coverage": cmd_coverage,
    "sweep-threshold": cmd_sweep_threshold,
}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ner-rpn", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", "-c", help="flat 'key.path = value' config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--input", help="dataset to predict/evaluate/profile (defaults to paths.test)")
    parser.add_argument("--predictions", help="prediction JSONL to evaluate or profile instead of the checkpoint")
    parser.add_argument("--output", help="prediction output path for 'predict'")
    parser.add_argument("--limits", type=_ints, default=[6, 8, 12], help="comma-separated length limits")
    parser.add_argument("--thresholds", type=_floats, default=[0.1, 0.3, 0.5, 0.7, 0.9],
                        help="comma-separated entityness thresholds")
    parser.add_argument("--plot", action="store_true", help="also draw the error pie chart")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        COMMANDS[args.command](config, args)
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
