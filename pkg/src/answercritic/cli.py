"""Command-line entry points: gen-data, train, eval, infer, verify.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 runtime
failure.  Every run writes its fully-resolved config beside its outputs and
takes a lock file so a directory has one writer at a time.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, restore_model
from .microworld import (
    DatasetError,
    Sample,
    Scene,
    SceneObject,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .model import ModelError, PrefixLM
from .oracle import OracleError, run_verification
from .prompts import TemplateError
from .runconfig import (
    ConfigError,
    RunConfig,
    apply_overrides,
    build_components,
    load_run_config,
    parse_kv_text,
    resolved_text,
)
from .trainer import LAST_CHECKPOINT, Trainer, TrainingDiverged, evaluate, infer
from .vocab import VocabError, Vocabulary

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_RUNTIME = 3

ENV_OUT_ROOT = "ANSWERCRITIC_OUT_ROOT"

USAGE_ERRORS = (ConfigError, DatasetError, VocabError, CheckpointError, FileNotFoundError)
RUNTIME_ERRORS = (TrainingDiverged, OracleError, ModelError, TemplateError)

RESOLVED_CONFIG_NAME = "config_resolved.txt"
METRICS_NAME = "metrics.jsonl"


class UsageError(ValueError):
    pass


def _resolve_out(arg: str | None, default_name: str) -> Path:
    if arg:
        return Path(arg)
    root = os.environ.get(ENV_OUT_ROOT)
    if not root:
        raise UsageError(
            f"no --out given and {ENV_OUT_ROOT} is not set; pass an output directory"
        )
    return Path(root) / default_name


@contextlib.contextmanager
def _output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock} if it is stale)"
        ) from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_config(args) -> RunConfig:
    return load_run_config(
        getattr(args, "config", None),
        preset=getattr(args, "preset", None),
        overrides=getattr(args, "set", None) or [],
    )


def _write_resolved(config: RunConfig, out_dir: Path) -> str:
    text = resolved_text(config)
    (out_dir / RESOLVED_CONFIG_NAME).write_text(text)
    return text


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    out_dir = _resolve_out(args.out, "dataset")
    with _output_lock(out_dir):
        _write_resolved(config, out_dir)
        train, val, test = generate_dataset(config.world)
        for name, split in (("train", train), ("val", val), ("test", test)):
            save_dataset(split, out_dir / f"{name}.jsonl")
        n_labelled = sum(s.labelled for s in train + val + test)
        print(
            f"wrote {len(train)}/{len(val)}/{len(test)} train/val/test samples "
            f"({n_labelled} labelled) to {out_dir}"
        )
    return EXIT_OK


def _load_splits(data_dir: Path) -> tuple[list[Sample], list[Sample], list[Sample]]:
    splits = []
    for name in ("train", "val", "test"):
        path = data_dir / f"{name}.jsonl"
        if not path.exists():
            raise UsageError(f"data directory {data_dir} is missing {name}.jsonl")
        splits.append(load_dataset(path))
    return tuple(splits)


def _write_metrics(outcome, out_dir: Path | None) -> None:
    lines = []
    for report in (outcome.unfiltered, outcome.filtered):
        record = report.as_dict()
        record["mean_base_score"] = outcome.mean_base_score
        record["mean_expl_score"] = outcome.mean_expl_score
        lines.append(json.dumps(record))
    if out_dir is not None:
        (out_dir / METRICS_NAME).write_text("".join(line + "\n" for line in lines))
    for report in (outcome.unfiltered, outcome.filtered):
        print(report.table())
        print()
    print(
        f"mean base answer score {outcome.mean_base_score:.4f}, "
        f"mean explanatory answer score {outcome.mean_expl_score:.4f}"
    )


def cmd_train(args) -> int:
    config = _load_config(args)
    data_dir = Path(args.data)
    out_dir = _resolve_out(args.out, "run")
    train_samples, _val_samples, test_samples = _load_splits(data_dir)
    with _output_lock(out_dir):
        config_text = _write_resolved(config, out_dir)
        vocab, space, model_config = build_components(config)
        model = PrefixLM(model_config)
        trainer = Trainer(
            model, vocab, space, config.train, out_dir=out_dir, config_text=config_text
        )
        if args.resume:
            start = trainer.resume()
            print(f"resuming from epoch {start}")
        else:
            (out_dir / "run_log.jsonl").unlink(missing_ok=True)
        trainer.run(train_samples)
        vocab.save(out_dir / "vocab.txt")
        outcome = evaluate(model, vocab, space, test_samples, config.train)
        _write_metrics(outcome, out_dir)
    return EXIT_OK


def _rebuild_from_checkpoint(path: Path):
    data = load_checkpoint(path)
    config = apply_overrides(RunConfig(), parse_kv_text(data.config_text)).validate()
    vocab, space, model_config = build_components(config)
    if vocab.to_text() != data.vocab_text:
        raise CheckpointError(
            "checkpoint vocabulary does not match the one derived from its config"
        )
    model = PrefixLM(model_config)
    restore_model(data, model)
    return model, vocab, space, config


def cmd_eval(args) -> int:
    model, vocab, space, config = _rebuild_from_checkpoint(Path(args.checkpoint))
    splits = _load_splits(Path(args.data))
    split = {"train": 0, "val": 1, "test": 2}[args.split]
    outcome = evaluate(model, vocab, space, splits[split], config.train)
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    _write_metrics(outcome, out_dir)
    return EXIT_OK


def _read_record(path: Path) -> Sample:
    lines = [line for line in path.read_text().splitlines() if line.strip()]
    if not lines:
        raise DatasetError(f"{path}: no record found")
    record = json.loads(lines[0])
    scene = Scene(
        scene_id=int(record["scene"]["scene_id"]),
        objects=tuple(
            SceneObject(
                row=int(o["row"]),
                col=int(o["col"]),
                shape=o["shape"],
                color=o["color"],
                size=o["size"],
            )
            for o in record["scene"]["objects"]
        ),
    )
    # the answer is optional here: inference must not need it
    return Sample(
        sample_id=int(record.get("sample_id", 0)),
        scene=scene,
        question=tuple(record["question"].split()),
        answer=tuple(record.get("answer", "").split()),
        rationale=tuple(record["rationale"].split()) if "rationale" in record else None,
        labelled=bool(record.get("labelled", "rationale" in record)),
    )


def cmd_infer(args) -> int:
    model, vocab, space, config = _rebuild_from_checkpoint(Path(args.checkpoint))
    sample = _read_record(Path(args.record))
    result = infer(model, vocab, space, sample, config.train)
    print(f"rationale: {' '.join(result.rationale)}")
    print(f"answer: {' '.join(result.answer)}")
    print(f"base answer score: {result.base_score:.6f}")
    print(f"explanatory answer score: {result.expl_score:.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_verification(quick=args.quick, seed=args.seed)
    for result in results:
        print(result.line())
    if all(r.passed for r in results):
        print("all checks passed")
        return EXIT_OK
    return EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="answercritic",
        description="Self-critical answer+rationale training on a synthetic shape world",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--preset", help="ablation preset row1..row5")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )

    p = sub.add_parser("gen-data", help="generate the three dataset splits")
    add_config_args(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and evaluate the test split")
    add_config_args(p)
    p.add_argument("--data", required=True, help="directory with train/val/test.jsonl")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", action="store_true", help="resume from the last checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="optional output directory for metrics.jsonl")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="two-stage inference for one sample record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True, help="file with one JSON sample record")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("verify", help="run the brute-force verification suite")
    p.add_argument("--quick", action="store_true", help="reduced trial counts")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.fn(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
