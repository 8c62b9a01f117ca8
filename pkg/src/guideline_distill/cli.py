"""Command-line entry point: ``guideline-distill <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure. Every subcommand
accepts ``--seed``, ``--config`` and ``--out``; explicit flags override values
read from the config file. Each run writes ``config.cfg`` (the resolved
configuration, seed included) and ``run.log`` into its output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import RunConfig, load_config, parse_value
from .errors import ConfigError

log = logging.getLogger("guideline_distill")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_help()}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _assignment(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), parse_value(value)


# flag dest -> dotted config key; flags left at None do not override anything
FLAG_KEYS = {
    "seed": "seed",
    "out": "out",
    "dataset": "dataset",
    "backbone": "backbone",
    "backbones": "backbones",
    "seeds": "seeds",
    "alpha": "loss.alpha",
    "temperature": "loss.temperature",
    "epochs": None,  # routed per subcommand below
    "lr": None,
    "values": "alphas",
    "arms": "arms",
    "split": "eval_split",
    "n_train": "data.n_train",
    "n_val": "data.n_val",
    "n_test": "data.n_test",
    "label_noise": "data.label_noise",
    "volume_shape": "data.volume_shape",
    "class_distribution": "data.class_distribution",
    "pretrain_steps": "pretrain.steps",
}
EPOCH_SECTION = {"stage1": "stage1", "stage2": "stage2", "train-scoring": "student"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--seed", type=int, help="run seed (for synth: dataset seed)")
    g.add_argument("--config", help="flat key = value config file")
    g.add_argument("--out", help="output directory")
    g.add_argument("--dataset", help="dataset directory")
    g.add_argument("--set", dest="overrides", action="append", type=_assignment, default=[], metavar="KEY=VALUE",
                   help="override any dotted config key, e.g. --set stage2.epochs=12 (repeatable)")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(
        prog="guideline-distill",
        description="Guideline-conditioned teacher, feature distillation into 3D scoring networks, and ablations.",
        epilog=(
            "subcommand flags: synth [--n-train --n-val --n-test --label-noise --volume-shape --class-distribution]; "
            "stage1/stage2 [--epochs --lr --pretrain-steps --checkpoint]; cache [--checkpoint --untrained]; "
            "train-scoring [--backbone --cache --alpha --temperature --epochs --lr]; "
            "eval [--checkpoint --backbone --split]; ablate-alpha [--values --backbone --seeds]; "
            "suite [--backbones --seeds --arms --split]"
        ),
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--label-noise", type=float, help="fraction of labels flipped by +-1")
    p.add_argument("--volume-shape", type=_int_list, help="D,H,W")
    p.add_argument("--class-distribution", type=_float_list, help="five probabilities")

    for name, text in (("stage1", "language pretraining then sequence-discrimination tuning"),
                       ("stage2", "guideline-captioning tuning from a stage-1 checkpoint")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        if name == "stage1":
            p.add_argument("--pretrain-steps", type=int)
        else:
            p.add_argument("--checkpoint", help="stage-1 checkpoint (default <out>/teacher/stage1)")

    p = sub.add_parser("cache", parents=[common], help="teacher feature cache for the training split")
    p.add_argument("--checkpoint", help="teacher checkpoint (default <out>/teacher/stage2)")
    p.add_argument("--untrained", action="store_true", help="accept a checkpoint that has not finished stage 2")

    p = sub.add_parser("train-scoring", parents=[common], help="train one scoring network")
    p.add_argument("--backbone")
    p.add_argument("--cache", help="feature cache directory; omit for the plain baseline")
    p.add_argument("--alpha", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("eval", parents=[common], help="metrics of a trained scoring network")
    p.add_argument("--checkpoint", help="student checkpoint (default <out>/student)")
    p.add_argument("--backbone")
    p.add_argument("--split", choices=["train", "val", "test"])

    p = sub.add_parser("ablate-alpha", parents=[common], help="Table-2 shaped alpha ablation")
    p.add_argument("--values", type=_float_list, help="comma-separated alphas")
    p.add_argument("--backbone")
    p.add_argument("--seeds", type=_int_list)

    p = sub.add_parser("suite", parents=[common], help="Table-1 and Table-3 shaped experiment suite")
    p.add_argument("--backbones", type=_str_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--arms", type=lambda t: [a.strip() for a in t.split(",") if a.strip()])
    p.add_argument("--split", choices=["train", "val", "test"])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if key is not None and value is not None:
            overrides[key] = value
    section = EPOCH_SECTION.get(args.command)
    if section is not None:
        if getattr(args, "epochs", None) is not None:
            overrides[f"{section}.epochs"] = args.epochs
        if getattr(args, "lr", None) is not None:
            overrides[f"{section}.learning_rate"] = args.lr
    if args.command == "synth" and args.seed is not None:
        overrides["data.seed"] = overrides.pop("seed")
    overrides.update(dict(args.overrides))
    cfg = load_config(args.config, overrides)
    if section is not None:
        sched = getattr(cfg, section)
        if sched.warmup_epochs > sched.epochs:
            setattr(cfg, section, dataclasses.replace(sched, warmup_epochs=sched.epochs))
    return cfg


def _start_run(cfg: RunConfig, verbose: bool) -> logging.Handler:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg: RunConfig, args) -> None:
    from .data_synth import generate_dataset

    d = cfg.data
    manifest = generate_dataset(cfg.dataset, d.seed, d.n_train, d.n_val, d.n_test, d.class_distribution, d.volume_shape, d.label_noise)
    print(f"wrote {manifest.n_train}/{manifest.n_val}/{manifest.n_test} samples to {cfg.dataset}")


def cmd_stage1(cfg: RunConfig, args) -> None:
    from .checkpoint import state_digest
    from .instructions import default_tokenizer, load_registry
    from .guideline_network import build_guideline_network
    from .pipeline import deterministic_torch, ensure_dataset, load_split
    from .train_eval import STAGE0, pretrain_decoder, stage1_accuracy, train_stage1

    deterministic_torch()
    ensure_dataset(cfg)
    tdir = Path(cfg.out) / "teacher"
    tok, reg = default_tokenizer(), load_registry()
    model = build_guideline_network(cfg.teacher, seed=cfg.seed)
    p = cfg.pretrain
    pretrain_decoder(model, tok, reg, p.steps, p.batch_size, p.learning_rate, p.warmup_steps, p.seed, checkpoint=tdir / STAGE0)
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    run = train_stage1(model, train, dataclasses.replace(cfg.stage1, seed=cfg.seed), tok, checkpoint=tdir / "stage1")
    result = {"epoch_losses": run.epoch_losses, "digest": state_digest(model)}
    if val:
        result["val_accuracy"] = stage1_accuracy(model, val, tok)
    _print_json(result)


def cmd_stage2(cfg: RunConfig, args) -> None:
    from .checkpoint import state_digest
    from .errors import StateError
    from .instructions import default_tokenizer, load_registry
    from .pipeline import deterministic_torch, ensure_dataset, load_split, load_teacher
    from .train_eval import caption_accuracy, train_stage2

    deterministic_torch()
    ensure_dataset(cfg)
    source = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "teacher" / "stage1"
    model = load_teacher(cfg, source)
    if model.stage != "stage1":
        raise StateError(f"stage 2 starts from a stage-1 checkpoint, {source} is at {model.stage!r}")
    tok, reg = default_tokenizer(), load_registry()
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    run = train_stage2(model, train, dataclasses.replace(cfg.stage2, seed=cfg.seed), tok, reg,
                       checkpoint=Path(cfg.out) / "teacher" / "stage2")
    result = {"epoch_losses": run.epoch_losses, "digest": state_digest(model)}
    if val:
        result["val_caption_accuracy"] = caption_accuracy(model, val, tok, reg)
    _print_json(result)


def cmd_cache(cfg: RunConfig, args) -> None:
    from .checkpoint import state_digest
    from .distill import build_feature_cache
    from .instructions import default_tokenizer, load_registry
    from .pipeline import deterministic_torch, load_split, load_teacher

    deterministic_torch()
    source = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "teacher" / "stage2"
    model = load_teacher(cfg, source)
    cache = build_feature_cache(model, load_split(cfg, "train"), default_tokenizer(), load_registry(),
                                source_digest=state_digest(model), allow_untrained=args.untrained)
    target = Path(cfg.out) / "cache"
    cache.save(target)
    _print_json({"cache": str(target), "entries": len(cache), "feature_dim": cache.feature_dim, "checksum": cache.checksum})


def cmd_train_scoring(cfg: RunConfig, args) -> None:
    from .distill import FeatureCache
    from .pipeline import deterministic_torch, ensure_dataset, load_split
    from .scoring import build_scoring_model
    from .train_eval import evaluate, train_student

    deterministic_torch()
    ensure_dataset(cfg)
    cache = FeatureCache.load(args.cache) if args.cache else None
    model = build_scoring_model(cfg.backbone, cfg.seed)
    run = train_student(model, load_split(cfg, "train"), cache, cfg.loss.to_loss_config(),
                        dataclasses.replace(cfg.student, seed=cfg.seed), checkpoint=Path(cfg.out) / "student")
    result = {"epoch_losses": run.log.epoch_losses}
    val = load_split(cfg, "val")
    if val:
        result["val"] = evaluate(model, val)
    _print_json(result)


def cmd_eval(cfg: RunConfig, args) -> None:
    from .checkpoint import load_checkpoint
    from .pipeline import load_split
    from .scoring import build_scoring_model
    from .train_eval import evaluate, write_json

    model = build_scoring_model(cfg.backbone, cfg.seed)
    source = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "student"
    load_checkpoint(model, source)
    model.eval()
    metrics = evaluate(model, load_split(cfg, cfg.eval_split))
    write_json(Path(cfg.out) / f"metrics_{cfg.eval_split}.json", metrics)
    _print_json(metrics)


def cmd_ablate_alpha(cfg: RunConfig, args) -> None:
    from .pipeline import ablate_alpha

    files = ablate_alpha(cfg)
    print(Path(files["table2.md"]).read_text(), end="")


def cmd_suite(cfg: RunConfig, args) -> None:
    from .pipeline import run_experiment_suite

    files = run_experiment_suite(cfg)
    print(Path(files["table1.md"]).read_text())
    print(Path(files["table3.md"]).read_text(), end="")


COMMANDS = {
    "synth": cmd_synth,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "cache": cmd_cache,
    "train-scoring": cmd_train_scoring,
    "eval": cmd_eval,
    "ablate-alpha": cmd_ablate_alpha,
    "suite": cmd_suite,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = resolve_config(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    handler = _start_run(cfg, args.verbose)
    try:
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("%s: configuration error: %s", args.command, exc)
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("%s failed", args.command)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        log.removeHandler(handler)
        handler.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
