"""Experiment harness: dataset, teacher stages, feature caches, student arms, reports.

Everything here is driven by a :class:`~guideline_distill.config.RunConfig`.
Reports never contain timings or absolute paths, so two executions with the
same config produce byte-identical files.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch

from .checkpoint import config_digest, load_checkpoint, read_header, state_digest
from .config import RunConfig
from .data_synth import Sample, generate_dataset, load_dataset, read_manifest
from .distill import FeatureCache, build_feature_cache
from .errors import ConfigError, ConsistencyError
from .guideline_network import STAGE1, STAGE2, GuidelineNetwork, build_guideline_network, is_trainable
from .instructions import default_tokenizer, load_registry
from .scoring import build_scoring_model
from .train_eval import (
    METRIC_NAMES,
    STAGE0,
    MetricsReport,
    caption_accuracy,
    evaluate,
    pretrain_decoder,
    stage1_accuracy,
    train_stage1,
    train_stage2,
    train_student,
    write_json,
)

log = logging.getLogger(__name__)

ARM_PLAIN, ARM_PICG, ARM_BASELINE = "w/o PICG", "with PICG", "baseline MLLM"
ARMS = (ARM_PLAIN, ARM_PICG, ARM_BASELINE)
COLUMNS = {
    "accuracy": "Accuracy %",
    "mse": "MSE",
    "mae": "MAE",
    "precision_macro": "Precision %",
    "recall_macro": "Recall %",
    "f1_macro": "F1 %",
}
PERCENT = {"accuracy", "precision_macro", "recall_macro", "f1_macro"}


def deterministic_torch() -> None:
    """Single-threaded deterministic kernels; called by every pipeline entry point."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- dataset

def ensure_dataset(cfg: RunConfig) -> Path:
    """Generate ``cfg.dataset`` if absent; otherwise check it matches ``cfg.data``."""
    root = Path(cfg.dataset)
    d = cfg.data
    if not (root / "manifest.json").exists():
        log.info("generating dataset under %s", root)
        generate_dataset(root, d.seed, d.n_train, d.n_val, d.n_test, d.class_distribution, d.volume_shape, d.label_noise)
        return root
    m = read_manifest(root)
    want = (d.seed, d.n_train, d.n_val, d.n_test, list(d.volume_shape), float(d.label_noise))
    have = (m.seed, m.n_train, m.n_val, m.n_test, list(m.volume_shape), float(m.label_noise))
    if want != have:
        raise ConfigError(f"dataset at {root} was generated with {have}, config asks for {want}")
    return root


def load_split(cfg: RunConfig, split: str) -> list[Sample]:
    return load_dataset(cfg.dataset, split, canonical_shape=cfg.teacher.volume_shape)


# ---------------------------------------------------------------- teacher

@dataclass
class TeacherArtifacts:
    directory: Path
    summary: dict

    def checkpoint(self, stage: str) -> Path:
        return self.directory / stage

    @property
    def picg_cache(self) -> Path:
        return self.directory / "cache_picg"

    @property
    def baseline_cache(self) -> Path:
        return self.directory / "cache_baseline"


def teacher_key(cfg: RunConfig) -> str:
    """Digest of everything the teacher and its caches depend on."""
    flat = cfg.to_flat()
    keep = {k: v for k, v in flat.items() if k.split(".")[0] in ("data", "teacher", "pretrain", "stage1", "stage2")}
    keep["seed"] = cfg.seed
    return config_digest(keep)


def _frozen_digest(model: GuidelineNetwork, stage: str) -> str:
    return state_digest(model, names=[n for n, _ in model.named_parameters() if not is_trainable(n, stage)])


def run_teacher_pipeline(cfg: RunConfig, out: str | Path | None = None, reuse: bool = True) -> TeacherArtifacts:
    """Pretrain, run both fine-tuning stages, and write the two training-split caches.

    Outputs land in ``<out>/teacher``. With ``reuse`` a previous run whose
    recorded key matches the current config is returned as is.
    """
    deterministic_torch()
    tdir = Path(out or cfg.out) / "teacher"
    key = teacher_key(cfg)
    summary_path = tdir / "summary.json"
    if reuse and summary_path.exists():
        summary = json.loads(summary_path.read_text())
        if summary.get("key") == key:
            log.info("reusing teacher artifacts in %s", tdir)
            return TeacherArtifacts(tdir, summary)

    ensure_dataset(cfg)
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    tokenizer, registry = default_tokenizer(), load_registry()
    if tokenizer.vocab_size > cfg.teacher.vocab_size:
        raise ConfigError(f"teacher.vocab_size {cfg.teacher.vocab_size} < tokenizer size {tokenizer.vocab_size}")
    model = build_guideline_network(cfg.teacher, seed=cfg.seed)
    p = cfg.pretrain
    log.info("stage 0: decoder language pretraining, %d steps", p.steps)
    pre = pretrain_decoder(
        model, tokenizer, registry, p.steps, p.batch_size, p.learning_rate, p.warmup_steps, p.seed,
        checkpoint=tdir / STAGE0,
    )
    digest0 = state_digest(model)
    baseline = build_feature_cache(model, train, tokenizer, registry, source_digest=digest0, allow_untrained=True)
    baseline.save(tdir / "cache_baseline")

    frozen_before = _frozen_digest(model, STAGE1)
    log.info("stage 1: sequence discrimination, %d epochs", cfg.stage1.epochs)
    log1 = train_stage1(model, train, dataclasses.replace(cfg.stage1, seed=cfg.seed), tokenizer, checkpoint=tdir / STAGE1)
    freeze1 = _frozen_digest(model, STAGE1) == frozen_before
    acc1 = stage1_accuracy(model, val, tokenizer) if val else None

    adapter_before = state_digest(model, prefix="adapter.")
    log.info("stage 2: guideline captioning, %d epochs", cfg.stage2.epochs)
    log2 = train_stage2(
        model, train, dataclasses.replace(cfg.stage2, seed=cfg.seed), tokenizer, registry, checkpoint=tdir / STAGE2
    )
    freeze2 = state_digest(model, prefix="adapter.") == adapter_before
    captions = caption_accuracy(model, val, tokenizer, registry) if val else None
    digest2 = state_digest(model)
    picg = build_feature_cache(model, train, tokenizer, registry, source_digest=digest2)
    picg.save(tdir / "cache_picg")

    summary = {
        "key": key,
        "pretrain_loss": [pre.step_losses[0], pre.step_losses[-1]] if pre.step_losses else [],
        "stage1_epoch_losses": log1.epoch_losses,
        "stage1_val_accuracy": acc1,
        "stage1_frozen_unchanged": freeze1,
        "stage2_epoch_losses": log2.epoch_losses,
        "stage2_adapter_unchanged": freeze2,
        "stage2_val_caption_accuracy": captions,
        "digests": {"stage0": digest0, "stage2": digest2},
        "caches": {"picg": picg.checksum, "baseline": baseline.checksum},
    }
    write_json(summary_path, summary)
    return TeacherArtifacts(tdir, summary)


def load_teacher(cfg: RunConfig, checkpoint: str | Path) -> GuidelineNetwork:
    """Rebuild a teacher from ``cfg.teacher`` and load a checkpoint into it."""
    model = build_guideline_network(cfg.teacher, seed=cfg.seed)
    header = load_checkpoint(model, checkpoint)
    if header["config"] != cfg.teacher.to_dict():
        raise ConsistencyError(f"checkpoint {checkpoint} was written for a different teacher config")
    model.stage = header["stage"]
    return model


# ---------------------------------------------------------------- students

def arm_cache(arm: str, teacher: TeacherArtifacts | None) -> FeatureCache | None:
    if arm == ARM_PLAIN:
        return None
    if teacher is None:
        raise ConsistencyError(f"arm {arm!r} needs teacher artifacts")
    return FeatureCache.load(teacher.picg_cache if arm == ARM_PICG else teacher.baseline_cache)


def run_student(
    cfg: RunConfig,
    backbone: str,
    seed: int,
    train: Sequence[Sample],
    eval_samples: Sequence[Sample],
    cache: FeatureCache | None,
    alpha: float | None = None,
    checkpoint: str | Path | None = None,
) -> dict[str, float]:
    deterministic_torch()
    model = build_scoring_model(backbone, seed)
    schedule = dataclasses.replace(cfg.student, seed=seed)
    train_student(model, train, cache, cfg.loss.to_loss_config(alpha), schedule, checkpoint=checkpoint)
    return evaluate(model, eval_samples)


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text.lower()).strip("_")


def _run_arm(runner: Callable[[int], dict[str, float]], seeds: Sequence[int], what: str) -> dict:
    """Run ``runner`` for every seed; a failure marks the whole arm without raising."""
    runs = []
    for seed in seeds:
        try:
            runs.append(runner(seed))
        except Exception as exc:  # noqa: BLE001 - reported in the table, not swallowed silently
            log.error("%s seed %d failed: %s", what, seed, exc)
            return {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "seeds": list(seeds)}
    report = MetricsReport.aggregate(runs)
    return {"status": "ok", "seeds": list(seeds), **report.to_dict()}


# ---------------------------------------------------------------- report rendering

def _fmt(metric: str, value: float) -> str:
    return f"{100 * value:.1f}" if metric in PERCENT else f"{value:.2f}"


def _cell(entry: dict, metric: str, delta: float | None = None) -> str:
    if entry.get("status") != "ok":
        return "FAILED"
    text = f"{_fmt(metric, entry['mean'][metric])} ± {_fmt(metric, entry['std'][metric])}"
    if delta is not None:
        text += f" ({'+' if delta >= 0 else '-'}{_fmt(metric, abs(delta))})"
    return text


def table1_markdown(rows: list[dict]) -> str:
    head = "| Model | " + " | ".join(COLUMNS.values()) + " |\n"
    head += "|---" * (len(COLUMNS) + 1) + "|\n"
    lines = []
    for row in rows:
        name = row["backbone"] + ("+PICG" if row["arm"] == ARM_PICG else "")
        cells = [_cell(row, m, (row.get("delta") or {}).get(m)) for m in COLUMNS]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "Mean ± std over seeds; deltas relative to the same backbone without PICG.\n\n" + head + "\n".join(lines) + "\n"


def table2_markdown(rows: list[dict]) -> str:
    head = "| alpha | Acc. % (best) | MSE (best) | MAE (best) | Acc. % mean ± std |\n|---|---|---|---|---|\n"
    lines = []
    for row in rows:
        if row["status"] != "ok":
            lines.append(f"| {row['alpha']} | FAILED | FAILED | FAILED | FAILED |")
            continue
        b = row["best"]
        lines.append(
            f"| {row['alpha']} | {_fmt('accuracy', b['accuracy'])} | {_fmt('mse', b['mse'])} | "
            f"{_fmt('mae', b['mae'])} | {_cell(row, 'accuracy')} |"
        )
    return "Best run over seeds, plus mean ± std.\n\n" + head + "\n".join(lines) + "\n"


def table3_markdown(rows: list[dict], arms: Sequence[str]) -> str:
    head = "| Model | " + " | ".join(arms) + " |\n" + "|---" * (len(arms) + 1) + "|\n"
    lines = []
    for row in rows:
        cells = []
        for arm in arms:
            v = row["best_accuracy"].get(arm)
            cells.append("FAILED" if v is None else f"{100 * v:.1f}%")
        lines.append(f"| {row['backbone']} | " + " | ".join(cells) + " |")
    return "Best accuracy over seeds.\n\n" + head + "\n".join(lines) + "\n"


def _write_report(out: Path, name: str, payload: dict, markdown: str) -> dict[str, Path]:
    write_json(out / f"{name}.json", payload)
    (out / f"{name}.md").write_text(markdown)
    return {f"{name}.json": out / f"{name}.json", f"{name}.md": out / f"{name}.md"}


# ---------------------------------------------------------------- harnesses

def run_experiment_suite(cfg: RunConfig, out: str | Path | None = None) -> dict[str, Path]:
    """Every requested arm x backbone x seed; writes Table-1 and Table-3 shaped reports."""
    deterministic_torch()
    out = Path(out or cfg.out)
    unknown = [a for a in cfg.arms if a not in ARMS]
    if unknown:
        raise ConfigError(f"unknown arms {unknown}; choose from {list(ARMS)}")
    ensure_dataset(cfg)
    train, held_out = load_split(cfg, "train"), load_split(cfg, cfg.eval_split)
    needs_teacher = any(a != ARM_PLAIN for a in cfg.arms)
    teacher = run_teacher_pipeline(cfg, out) if needs_teacher else None

    results: dict[tuple[str, str], dict] = {}
    for arm in cfg.arms:
        try:
            cache = arm_cache(arm, teacher)
        except Exception as exc:  # noqa: BLE001
            for backbone in cfg.backbones:
                results[backbone, arm] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "seeds": list(cfg.seeds)}
            continue
        for backbone in cfg.backbones:
            ckpt_dir = out / "students" / backbone / _slug(arm)
            results[backbone, arm] = _run_arm(
                lambda seed: run_student(cfg, backbone, seed, train, held_out, cache, checkpoint=ckpt_dir / f"seed{seed}"),
                cfg.seeds, f"{backbone}/{arm}",
            )

    rows1 = []
    for backbone in cfg.backbones:
        plain = results.get((backbone, ARM_PLAIN))
        for arm in (ARM_PLAIN, ARM_PICG):
            if (backbone, arm) not in results:
                continue
            row = {"backbone": backbone, "arm": arm, **results[backbone, arm]}
            if arm == ARM_PICG and plain and plain["status"] == "ok" and row["status"] == "ok":
                row["delta"] = {m: row["mean"][m] - plain["mean"][m] for m in METRIC_NAMES}
            rows1.append(row)
    rows3 = []
    for backbone in cfg.backbones:
        best = {}
        for arm in cfg.arms:
            entry = results[backbone, arm]
            best[arm] = entry["best"]["accuracy"] if entry["status"] == "ok" else None
        rows3.append({"backbone": backbone, "best_accuracy": best})

    common = {"eval_split": cfg.eval_split, "seeds": list(cfg.seeds), "metrics": list(METRIC_NAMES)}
    reports = out / "reports"
    files = {}
    files.update(_write_report(reports, "table1", {**common, "rows": rows1}, table1_markdown(rows1)))
    files.update(_write_report(reports, "table3", {**common, "arms": list(cfg.arms), "rows": rows3}, table3_markdown(rows3, cfg.arms)))
    if teacher is not None:
        teacher_view = {k: v for k, v in teacher.summary.items() if k != "key"}
        write_json(reports / "teacher.json", teacher_view)
        files["teacher.json"] = reports / "teacher.json"
    return files


def ablate_alpha(cfg: RunConfig, values: Sequence[float] | None = None, out: str | Path | None = None) -> dict[str, Path]:
    """Distilled student of ``cfg.backbone`` for each alpha; writes a Table-2 shaped report."""
    deterministic_torch()
    out = Path(out or cfg.out)
    values = list(cfg.alphas if values is None else values)
    if not values or any(v < 0 for v in values):
        raise ConfigError(f"alpha values must be a non-empty list of non-negative numbers, got {values}")
    ensure_dataset(cfg)
    train, held_out = load_split(cfg, "train"), load_split(cfg, cfg.eval_split)
    teacher = run_teacher_pipeline(cfg, out)
    cache = arm_cache(ARM_PICG, teacher)
    rows = []
    for alpha in values:
        ckpt_dir = out / "students" / cfg.backbone / f"alpha_{alpha:g}"
        entry = _run_arm(
            lambda seed: run_student(cfg, cfg.backbone, seed, train, held_out, cache, alpha, ckpt_dir / f"seed{seed}"),
            cfg.seeds, f"alpha={alpha:g}",
        )
        rows.append({"alpha": alpha, **entry})
    payload = {"backbone": cfg.backbone, "eval_split": cfg.eval_split, "seeds": list(cfg.seeds), "rows": rows}
    return _write_report(out / "reports", "table2", payload, table2_markdown(rows))


def checkpoint_stage(path: str | Path) -> str:
    return read_header(path)["stage"]
