"""Command-line interface: ``medprefix <subcommand> [flags]``.

Subcommands::

    synth        --out PATH [--seed N --train N --val N --test N]
    pretrain-lm  --data PATH --out PATH [--epochs N]
    train        --data PATH --lm PATH --out PATH [--mode prefix|finetune]
    generate     --ckpt PATH --in PATH --out PATH [--beam W] [--max-len N]
    evaluate     --ckpt PATH --data PATH --out PATH

Every subcommand also accepts ``--config FILE`` (JSON with the sections in
``DEFAULTS``) and ``--section.key=value`` overrides. Precedence, lowest
first: built-in defaults, config file, flags. Exit status is 0 on success,
1 on an operational error and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import SPLITS, build_vocab, load_dataset, parse_record, save_dataset
from .exceptions import ConfigError, MedPrefixError
from .generate import DecodeConfig, generate_reports
from .lm import LMConfig, lm_pretrain
from .mapper import MapperConfig, mapper_init
from .metrics import evaluate_split, write_bleu_csv, write_outputs_jsonl
from .numerics import AdamHyper
from .synth import SynthConfig, gen_basis, gen_split
from .trainer import ReportModel, TrainConfig, train, write_metrics_csv

logger = logging.getLogger("medprefix")

DEFAULTS: dict[str, dict] = {
    "lm": {"d_model": 256, "n_layers": 2, "n_heads": 4, "max_seq": 128},
    "mapper": {"clip_length": 4, "prefix_length": 8, "n_layers": 1, "n_heads": 4},
    "pretrain": {"epochs": 10, "batch_size": 16, "lr": 1e-3, "seed": 0, "max_offset": 64},
    "train": {"mode": "prefix", "epochs": 30, "batch_size": 16, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999,
              "eps": 1e-8, "seed": 0, "shuffle": True},
    "synth": {"seed": 0, "k": 8, "clip_dim": 512, "noise_sigma": 0.05, "max_findings": 3,
              "train": 500, "val": 100, "test": 100},
    "decode": {"strategy": "greedy", "beam_width": 4, "max_len": 64},
    "evaluate": {"split": "test"},
    "paths": {"data": None, "lm": None, "ckpt": None, "in": None, "out": None},
}

SUBCOMMANDS = ("synth", "pretrain-lm", "train", "generate", "evaluate")


def _expected_type(section: str, key: str):
    default = DEFAULTS[section][key]
    return str if default is None else type(default)


def _check_key(section: str, key: str) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section {section!r}")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {section}.{key}")


def _check_value(section: str, key: str, value):
    kind = _expected_type(section, key)
    if value is None and DEFAULTS[section][key] is None:
        return None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{section}.{key} must be {kind.__name__}, got {type(value).__name__} {value!r}")
    return value


def _coerce(section: str, key: str, text: str):
    """Parse a command-line string into the type of the default."""
    kind = _expected_type(section, key)
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise ConfigError(f"{section}.{key} expects {kind.__name__}, got {text!r}") from None


@dataclass
class RunConfig:
    """Merged configuration for one command."""

    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def digest(self) -> str:
        canonical = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def path(self, key: str) -> Path:
        value = self.values["paths"][key]
        if value is None:
            flag = "--in" if key == "in" else f"--{key}"
            raise ConfigError(f"missing required path {flag} (paths.{key})")
        return Path(value)

    def lm_config(self, vocab_size: int) -> LMConfig:
        return LMConfig(vocab_size=vocab_size, **self.values["lm"]).validate()

    def mapper_config(self, clip_dim: int, d_model: int) -> MapperConfig:
        return MapperConfig(clip_dim=clip_dim, d_model=d_model, **self.values["mapper"]).validate()

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        adam = AdamHyper(lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"])
        return TrainConfig(mode=t["mode"], epochs=t["epochs"], batch_size=t["batch_size"], adam=adam,
                           seed=t["seed"], shuffle=t["shuffle"])

    def decode_config(self) -> DecodeConfig:
        d = self.values["decode"]
        return DecodeConfig(strategy=d["strategy"], beam_width=d["beam_width"], max_len=d["max_len"])


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``.

    ``overrides`` maps ``"section.key"`` to either a typed value or a string
    taken from the command line.
    """
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        for section, entries in data.items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(entries, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in entries.items():
                _check_key(section, key)
                cfg.values[section][key] = _check_value(section, key, value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        _check_key(section, key)
        value = _coerce(section, key, value) if isinstance(value, str) else value
        cfg.values[section][key] = _check_value(section, key, value)
    try:
        cfg.train_config()
        cfg.decode_config()
        AdamHyper(lr=cfg["pretrain"]["lr"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["evaluate"]["split"] not in SPLITS:
        raise ConfigError(f"evaluate.split must be one of {SPLITS}")
    return cfg


# principal flags: (subcommand, flag) -> config key
_FLAGS = {
    "synth": {"out": "paths.out", "seed": "synth.seed", "train": "synth.train", "val": "synth.val",
              "test": "synth.test"},
    "pretrain-lm": {"data": "paths.data", "out": "paths.out", "epochs": "pretrain.epochs"},
    "train": {"data": "paths.data", "lm": "paths.lm", "out": "paths.out", "mode": "train.mode"},
    "generate": {"ckpt": "paths.ckpt", "in": "paths.in", "out": "paths.out", "max_len": "decode.max_len"},
    "evaluate": {"ckpt": "paths.ckpt", "data": "paths.data", "out": "paths.out"},
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medprefix", description="Prefix-conditioned report generation.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "synth": "write a synthetic embedding/report dataset",
        "pretrain-lm": "pretrain the language model on report text",
        "train": "train the mapping network (optionally the LM too)",
        "generate": "generate reports for embeddings",
        "evaluate": "score a checkpoint with corpus BLEU",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", metavar="FILE", help="JSON config file")
        for flag in _FLAGS[name]:
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, metavar=flag.upper())
        if name == "generate":
            p.add_argument("--beam", type=int, metavar="W", help="beam search with width W")
    return parser


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise _UsageError(f"unrecognized argument {arg!r}")
        name, eq, value = arg[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise _UsageError(f"missing value for --{name}")
            i += 1
            value = extra[i]
        out[name] = value
        i += 1
    return out


def _versions() -> dict:
    from . import __version__

    return {"medprefix": __version__, "python": platform.python_version(), "numpy": np.__version__}


def _write_run_record(cfg: RunConfig, command: str, inputs: list[Path], outputs: list[Path]) -> Path:
    """Merge this command's provenance into ``run.json`` next to its outputs."""
    record_path = outputs[0].parent / "run.json"
    records = {}
    if record_path.exists():
        try:
            records = json.loads(record_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            records = {}
    seed_section = {"synth": "synth", "pretrain-lm": "pretrain"}.get(command, "train")
    records[command] = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg[seed_section]["seed"],
        "versions": _versions(),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }
    record_path.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return record_path


def _prepare(cfg: RunConfig, inputs: list[str]) -> tuple[list[Path], Path]:
    paths = [cfg.path(k) for k in inputs]
    out = cfg.path("out")
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        if p.resolve() == out.resolve():
            raise ConfigError(f"output {out} would overwrite input {p}")
    out.parent.mkdir(parents=True, exist_ok=True)
    return paths, out


def _sibling(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def cmd_synth(cfg: RunConfig) -> list[Path]:
    _, out = _prepare(cfg, [])
    s = cfg["synth"]
    basis = gen_basis(s["seed"], s["k"], s["clip_dim"])
    splits = gen_split(s["train"], s["val"], s["test"], SynthConfig(basis, s["noise_sigma"], s["max_findings"]),
                       s["seed"])
    save_dataset(splits, out)
    logger.info("wrote %d records to %s", len(splits.all_records()), out)
    return [out]


def cmd_pretrain(cfg: RunConfig) -> list[Path]:
    (data,), out = _prepare(cfg, ["data"])
    splits = load_dataset(data)
    reports = [r.report for r in splits.train]
    if not reports:
        raise ConfigError(f"{data} has no training records")
    vocab = build_vocab(reports)
    p = cfg["pretrain"]
    result = lm_pretrain(reports, vocab, cfg.lm_config(len(vocab)), epochs=p["epochs"], seed=p["seed"],
                         batch_size=p["batch_size"], adam=AdamHyper(lr=p["lr"]), max_offset=p["max_offset"])
    ckpt = ReportModel(result.lm, None, vocab).to_checkpoint()
    ckpt.configs["pretrain"] = dict(p)
    save_checkpoint(ckpt, out)
    if result.log:
        logger.info("pretraining loss %.4f -> %.4f", result.log[0][1], result.log[-1][1])
    return [out]


def cmd_train(cfg: RunConfig) -> list[Path]:
    (data, lm_path), out = _prepare(cfg, ["data", "lm"])
    splits = load_dataset(data)
    base = ReportModel.from_checkpoint(load_checkpoint(lm_path))
    if not splits.train:
        raise ConfigError(f"{data} has no training records")
    clip_dim = splits.train[0].embedding.shape[0]
    train_cfg = cfg.train_config()
    mapper = mapper_init(cfg.mapper_config(clip_dim, base.lm.config.d_model), seed=train_cfg.seed)
    result = train(splits, base.lm, mapper, base.vocab, train_cfg)
    save_checkpoint(result.checkpoint, out)
    metrics = _sibling(out, ".metrics.csv")
    write_metrics_csv(result.log, metrics)
    return [out, metrics]


def cmd_generate(cfg: RunConfig) -> list[Path]:
    (ckpt_path, in_path), out = _prepare(cfg, ["ckpt", "in"])
    model = ReportModel.from_checkpoint(load_checkpoint(ckpt_path))
    if model.mapper is None:
        raise ConfigError(f"{ckpt_path} holds a language model only; train a mapper first")
    clip_dim = model.mapper.config.clip_dim
    records = []
    with open(in_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(parse_record(line, lineno, clip_dim, require_report=False)[0])
    reports = generate_reports(model.lm, model.mapper, model.vocab, [r.embedding for r in records],
                               cfg.decode_config()) if records else []
    with open(out, "w", encoding="utf-8") as fh:
        for rec, text in zip(records, reports):
            fh.write(json.dumps({"id": rec.id, "report": text}) + "\n")
    return [out]


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    (ckpt_path, data), out = _prepare(cfg, ["ckpt", "data"])
    model = ReportModel.from_checkpoint(load_checkpoint(ckpt_path))
    if model.mapper is None:
        raise ConfigError(f"{ckpt_path} holds a language model only; train a mapper first")
    splits = load_dataset(data, model.mapper.config.clip_dim)
    split = cfg["evaluate"]["split"]
    records = dict(splits.items())[split]
    report, outputs = evaluate_split(model, records, cfg.decode_config())
    write_bleu_csv(report, out)
    listing = _sibling(out, ".records.jsonl")
    write_outputs_jsonl(outputs, listing)
    print(" ".join(f"BLEU-{n}={v}" for n, v in enumerate(report.percent(), start=1)))
    return [out, listing]


_COMMANDS = {
    "synth": (cmd_synth, []),
    "pretrain-lm": (cmd_pretrain, ["data"]),
    "train": (cmd_train, ["data", "lm"]),
    "generate": (cmd_generate, ["ckpt", "in"]),
    "evaluate": (cmd_evaluate, ["ckpt", "data"]),
}


def run(command: str, cfg: RunConfig) -> int:
    """Run one subcommand; returns the exit status."""
    if command not in _COMMANDS:
        print(f"medprefix: unknown command {command!r}; choose from {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return 2
    func, input_keys = _COMMANDS[command]
    try:
        outputs = func(cfg)
        inputs = [cfg.path(k) for k in input_keys]
        _write_run_record(cfg, command, inputs, outputs)
    except ConfigError as exc:
        print(f"medprefix {command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (MedPrefixError, OSError, ValueError) as exc:
        print(f"medprefix {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise _UsageError("medprefix: a command is required")
        overrides = {}
        for flag, key in _FLAGS[args.command].items():
            value = getattr(args, flag)
            if value is not None:
                overrides[key] = value
        if getattr(args, "beam", None) is not None:
            overrides["decode.strategy"] = "beam"
            overrides["decode.beam_width"] = str(args.beam)
        overrides.update(_split_overrides(extra))
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 2
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"medprefix {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"medprefix {args.command}: cannot read config: {exc}", file=sys.stderr)
        return 1
    return run(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
