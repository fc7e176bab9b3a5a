"""Command-line entry point: synthesize, train, eval, predict.

Settings come from three layers: built-in defaults, a flat ``key = value``
config file (``--config``), and command-line flags, later layers winning.
Every command that writes an output directory echoes the merged settings to
``resolved_config`` in the same format, so ``--config out/resolved_config``
replays a run.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Callable

from PIL import Image

from .alphabet import Alphabet, AlphabetError
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    IMAGE_SUFFIXES,
    AugmentationConfig,
    DatasetError,
    ImageError,
    SplitSpec,
    SynthesisError,
    class_balance_report,
    load_dataset,
    oversample_minority,
    preprocess,
    split_dataset,
    synthesize_corpus,
    write_corpus,
)
from .evaluate import EvalError, evaluate, predict_texts
from .model import ConfigError, ModelConfig
from .train import TrainConfig, TrainConfigError, train

log = logging.getLogger("captcha_ocr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
RESOLVED = "resolved_config"
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- config layer


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _pair(text: str) -> tuple[float, float]:
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


RUN_DEFAULTS = {
    "seed": 0,
    "data": "",
    "synthetic_count": 2000,
    "min_length": 4,
    "max_length": 6,
    "rebalance": False,
    "decoder": "greedy",
    "beam_width": 10,
}

_SKIP = {"alphabet_size", "seed", "augmentation"}


def _field_parser(default) -> Callable[[str], object]:
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _pair if isinstance(default[0], float) else _ints
    return str


def _defaults() -> dict[str, tuple[str, object]]:
    """key -> (section, default value)."""
    table: dict[str, tuple[str, object]] = {}
    for section, obj in (
        ("model", ModelConfig()),
        ("train", TrainConfig()),
        ("split", SplitSpec()),
        ("augment", AugmentationConfig()),
    ):
        for f in fields(obj):
            if f.name not in _SKIP:
                table[f.name] = (section, getattr(obj, f.name))
    for k, v in RUN_DEFAULTS.items():
        table[k] = ("run", v)
    return table


DEFAULTS = _defaults()


def parse_config_text(text: str, source: str = "config") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value, f"{source}:{lineno}")
    return values


def coerce(key: str, value: str, where: str = "override"):
    if key not in DEFAULTS:
        raise UsageError(f"{where}: unknown setting {key!r}")
    try:
        return _field_parser(DEFAULTS[key][1])(value)
    except ValueError as exc:
        raise UsageError(f"{where}: bad value for {key}: {exc}") from None


def resolve(config_path: str | None, overrides: dict[str, object]) -> dict[str, object]:
    """Defaults, then the config file, then flag overrides."""
    values = {k: v for k, (_, v) in DEFAULTS.items()}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        values.update(parse_config_text(path.read_text(), str(path)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return values


def render_config(values: dict[str, object]) -> str:
    lines = ["# fully resolved settings; replay with --config"]
    for section in ("run", "model", "train", "split", "augment"):
        lines.append(f"# {section}")
        lines += [f"{k} = {_fmt(values[k])}" for k, (s, _) in DEFAULTS.items() if s == section]
    return "\n".join(lines) + "\n"


def _section(values: dict, section: str) -> dict:
    return {k: values[k] for k, (s, _) in DEFAULTS.items() if s == section}


def build_configs(values: dict, alphabet: Alphabet):
    try:
        model = ModelConfig(**_section(values, "model"), alphabet_size=alphabet.size)
        aug = AugmentationConfig(**_section(values, "augment"))
        train_cfg = TrainConfig(**_section(values, "train"), seed=int(values["seed"]), augmentation=aug)
        split = SplitSpec(**_section(values, "split"), seed=int(values["seed"]))
    except (ConfigError, TrainConfigError, DatasetError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return model, train_cfg, split


# ---------------------------------------------------------------- helpers


def _length_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN-MAX, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"invalid length range {text!r}")
    return lo, hi


def _set_pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _overrides(args, mapping: dict[str, str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in getattr(args, "set", None) or []:
        out[key] = coerce(key, value, f"--set {key}")
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "length_range", None) is not None:
        out["min_length"], out["max_length"] = args.length_range
    return out


def _write_resolved(out: Path, values: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED).write_text(render_config(values))


def load_samples(values: dict, alphabet: Alphabet, model: ModelConfig, *, strict_alphabet: bool = False):
    """Samples from ``data`` when set, otherwise the synthetic corpus the settings describe.

    With ``strict_alphabet`` a filename label outside ``alphabet`` is fatal
    instead of a skipped file.
    """
    if values["data"]:
        if strict_alphabet and Path(values["data"]).is_dir():
            stems = [p.stem for p in Path(values["data"]).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]
            bad = sorted({c for stem in stems for c in alphabet.unknown_characters(stem)})
            if bad:
                raise DataError(f"dataset labels use characters missing from the checkpoint alphabet: {bad}")
        skipped: list = []
        samples = load_dataset(
            values["data"], alphabet, height=model.input_height, width=model.input_width, skipped=skipped
        )
        for name, reason in skipped:
            print(f"skipped {name}: {reason}", file=sys.stderr)
        if not samples:
            raise DataError(f"no usable images in {values['data']}")
        return samples
    samples, _ = synthesize_corpus(
        int(values["synthetic_count"]),
        alphabet,
        min_length=int(values["min_length"]),
        max_length=int(values["max_length"]),
        seed=int(values["seed"]),
        height=model.input_height,
        width=model.input_width,
    )
    return samples


def _write_splits(path: Path, parts) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["source_id", "label", "split"])
        for name, part in zip(SPLITS, parts):
            for s in part:
                w.writerow([s.source_id, s.label, name])


def _print_report(report, prefix: str = "") -> None:
    print(f"{prefix}char accuracy: {report.char_accuracy:.4f}")
    print(f"{prefix}word accuracy: {report.word_accuracy:.4f}")
    print(f"{prefix}mean edit distance: {report.mean_edit_distance:.4f}")


# ---------------------------------------------------------------- commands


def cmd_synthesize(args) -> int:
    values = resolve(args.config, _overrides(args, {"seed": "seed", "count": "synthetic_count"}))
    alphabet = Alphabet.default()
    model, _, _ = build_configs(values, alphabet)
    count = int(values["synthetic_count"])
    if count < 0:
        raise UsageError(f"count must be non-negative, got {count}")
    samples, seeds = synthesize_corpus(
        count,
        alphabet,
        min_length=int(values["min_length"]),
        max_length=int(values["max_length"]),
        seed=int(values["seed"]),
        height=model.input_height,
        width=model.input_width,
    )
    out = Path(args.out)
    manifest = write_corpus(samples, out, seeds)
    _write_resolved(out, values)
    print(f"wrote {len(samples)} images and {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    mapping = {
        "seed": "seed",
        "data": "data",
        "synthetic": "synthetic_count",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "lr": "learning_rate",
        "patience": "early_stop_patience",
        "precision": "precision",
    }
    overrides = _overrides(args, mapping)
    if args.rebalance:
        overrides["rebalance"] = True
    if args.no_augment:
        overrides["augment"] = False
    values = resolve(args.config, overrides)
    alphabet = Alphabet.default()
    model, train_cfg, split = build_configs(values, alphabet)
    out = Path(args.out)
    resume = None
    if args.resume:
        last = out / "last.bin"
        if not last.is_file():
            raise UsageError(f"--resume given but {last} does not exist")
        resume = load_checkpoint(last, alphabet)
        if resume.config != model:
            raise UsageError("resumed checkpoint was trained with a different model configuration")

    samples = load_samples(values, alphabet, model)
    train_set, val_set, test_set = split_dataset(samples, split)
    report = class_balance_report(train_set, alphabet)
    print(f"train/val/test: {len(train_set)}/{len(val_set)}/{len(test_set)}; "
          f"class imbalance ratio {report.imbalance_ratio:.2f}", file=sys.stderr)
    if values["rebalance"]:
        train_set = oversample_minority(train_set, alphabet)
        print(f"rebalanced training split to {len(train_set)} samples", file=sys.stderr)

    _write_resolved(out, values)
    _write_splits(out / "splits.tsv", (train_set, val_set, test_set))
    result = train(model, train_set, val_set, alphabet, train_cfg, out_dir=out, resume=resume)
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'checkpoint.bin'}")
    if test_set:
        report = evaluate(result.checkpoint, test_set)
        report.write(out / "test_eval")
        _print_report(report, "test ")
    return EXIT_OK


def cmd_eval(args) -> int:
    overrides = _overrides(args, {"seed": "seed", "data": "data", "decoder": "decoder", "beam_width": "beam_width"})
    values = resolve(args.config, overrides)
    if values["decoder"] not in ("greedy", "beam"):
        raise UsageError(f"decoder must be greedy or beam, got {values['decoder']!r}")
    ckpt = load_checkpoint(args.checkpoint)
    _, _, split = build_configs(values, ckpt.alphabet)
    samples = load_samples(values, ckpt.alphabet, ckpt.config, strict_alphabet=True)
    if args.split != "all":
        samples = split_dataset(samples, split)[SPLITS.index(args.split)]
        if not samples:
            raise DataError(f"the {args.split} split is empty")
    report = evaluate(ckpt, samples, str(values["decoder"]), int(values["beam_width"]))
    out = Path(args.out)
    report.write(out)
    _write_resolved(out, values)
    _print_report(report)
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.images:
        raise UsageError("predict needs at least one image path")
    values = resolve(args.config, _overrides(args, {"decoder": "decoder", "beam_width": "beam_width"}))
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    failed = 0
    for path in args.images:
        try:
            with Image.open(path) as im:
                im.load()
                image = preprocess(im, cfg.input_height, cfg.input_width)
        except Exception as exc:  # per-file failure, keep going
            print(f"error: {path}: {exc}", file=sys.stderr)
            failed += 1
            continue
        text = predict_texts(
            ckpt.params, ckpt.alphabet, [image], decoder=str(values["decoder"]), beam_width=int(values["beam_width"])
        )[0]
        print(f"{path}\t{text}", flush=True)
    return EXIT_DATA if failed else EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="flat key = value settings file")
    shared.add_argument("--seed", type=int, metavar="N")
    shared.add_argument("--set", type=_set_pair, action="append", metavar="KEY=VALUE",
                        help="override any setting (repeatable)")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="captcha-ocr", description="CRNN + CTC captcha recognizer")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthesize", parents=[shared], help="write a synthetic captcha corpus")
    p.add_argument("--count", type=int)
    p.add_argument("--length-range", type=_length_range, metavar="MIN-MAX")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", parents=[shared], help="train a model")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--data", metavar="DIR", help="directory of <label>.png images")
    p.add_argument("--synthetic", type=int, metavar="COUNT", help="synthetic corpus size when --data is absent")
    p.add_argument("--length-range", type=_length_range, metavar="MIN-MAX")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--rebalance", action="store_true", help="oversample samples holding rare characters")
    p.add_argument("--resume", action="store_true", help="continue from DIR/last.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--length-range", type=_length_range, metavar="MIN-MAX")
    p.add_argument("--split", choices=["all", *SPLITS], default="all",
                   help="evaluate one split of the dataset, cut as in training")
    p.add_argument("--decoder", choices=["greedy", "beam"])
    p.add_argument("--beam-width", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[shared], help="decode image files")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--decoder", choices=["greedy", "beam"])
    p.add_argument("--beam-width", type=int)
    p.add_argument("images", nargs="*", metavar="IMAGE")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetError, ImageError, SynthesisError, AlphabetError, EvalError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # training failures and anything unforeseen
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

if __name__ == "__main__":
    sys.exit(main())
