"""Training schedules, metrics and the experiment harness.

Three training procedures share one schedule type:

* stage 1 teaches the teacher to name the sequence group of a single volume,
* stage 2 teaches it to caption the lesion under the guideline prompt,
* student training optimizes focal loss plus alpha * KL against cached
  teacher features (or focal loss alone for the plain baseline).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint, state_digest
from .data_synth import KIND_ORDER, TOY_SHAPE, Sample, criterion_phrase, render_caption, sample_attributes, stage1_group
from .distill import AlignmentHead, FeatureCache, LossConfig, combined_objective, kl_feature_loss, normalize_teacher
from .errors import ConsistencyError, TrainingError
from .guideline_network import (
    STAGE1,
    STAGE2,
    GuidelineNetwork,
    apply_policy,
    captioning_loss,
    generate,
    make_text_batch,
    volumes_tensor,
)
from .instructions import (
    GuidelineRegistry,
    InstructionRecord,
    Stage,
    Tokenizer,
    default_templates,
    render_stage1,
    render_stage2,
)
from .scoring import N_CLASSES, ScoringModel, focal_loss, stack_samples

log = logging.getLogger(__name__)


@dataclass
class StageSchedule:
    epochs: int
    warmup_epochs: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    seed: int = 0
    decay: str = "cosine"  # or "constant"

    def __post_init__(self):
        if self.epochs < 0 or not 0 <= self.warmup_epochs <= max(self.epochs, 0):
            raise ValueError(f"need 0 <= warmup_epochs <= epochs, got {self.warmup_epochs} / {self.epochs}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError("learning_rate and batch_size must be positive, weight_decay non-negative")
        if self.decay not in ("cosine", "constant"):
            raise ValueError(f"decay must be 'cosine' or 'constant', got {self.decay!r}")


def stage1_schedule(**overrides) -> StageSchedule:
    return StageSchedule(**{"epochs": 20, "warmup_epochs": 2, "learning_rate": 0.02, "weight_decay": 0.02, **overrides})


def stage2_schedule(**overrides) -> StageSchedule:
    return StageSchedule(**{"epochs": 60, "warmup_epochs": 5, "learning_rate": 0.02, "weight_decay": 0.02, **overrides})


def student_schedule(**overrides) -> StageSchedule:
    return StageSchedule(**{"epochs": 200, "learning_rate": 5e-5, "batch_size": 16, "decay": "constant", **overrides})


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float, decay: str = "cosine") -> float:
    """Linear warmup to ``peak`` at step ``warmup_steps - 1``, then cosine decay to 0."""
    if step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    if decay == "constant":
        return peak
    span = max(total_steps - warmup_steps, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss: torch.Tensor, what: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"{what}: non-finite loss {loss.item()} at epoch {epoch}, step {step}")


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


def _run_epochs(
    params: list[torch.nn.Parameter],
    schedule: StageSchedule,
    n_items: int,
    step_loss: Callable[[np.ndarray], torch.Tensor],
    what: str,
    optimizer: str = "adamw",
) -> TrainLog:
    if optimizer == "adamw":
        opt = torch.optim.AdamW(params, lr=schedule.learning_rate, weight_decay=schedule.weight_decay)
    else:
        opt = torch.optim.Adam(params, lr=schedule.learning_rate, weight_decay=schedule.weight_decay)
    steps_per_epoch = math.ceil(n_items / schedule.batch_size) if n_items else 0
    total, warmup = steps_per_epoch * schedule.epochs, steps_per_epoch * schedule.warmup_epochs
    out = TrainLog()
    step = 0
    for epoch in range(schedule.epochs):
        losses = []
        for idx in _batches(n_items, schedule.batch_size, schedule.seed, epoch):
            lr = lr_at(step, total, warmup, schedule.learning_rate, schedule.decay)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = step_loss(idx)
            _check_finite(loss, what, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            out.step_losses.append(losses[-1])
            out.learning_rates.append(lr)
            step += 1
        out.epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
        log.info("%s epoch %d/%d loss %.5f", what, epoch + 1, schedule.epochs, out.epoch_losses[-1])
    return out


# ---------------------------------------------------------------- teacher stages

STAGE0 = "stage0"


def pretraining_corpus(
    registry: GuidelineRegistry, n: int, rng: np.random.Generator, shape=TOY_SHAPE
) -> list[InstructionRecord]:
    """Guideline prompts paired with captions of freshly drawn attributes (no images)."""
    records = []
    for _ in range(n):
        score = int(rng.integers(1, N_CLASSES + 1))
        attrs = sample_attributes(score, rng, shape)
        prompt = default_templates().stage2.replace("{guideline}", registry.text())
        records.append(InstructionRecord(Stage.GUIDELINE_CAPTIONING, prompt, render_caption(score, attrs)))
    return records


def pretrain_decoder(
    model: GuidelineNetwork,
    tokenizer: Tokenizer,
    registry: GuidelineRegistry,
    steps: int,
    batch_size: int = 32,
    learning_rate: float = 3e-3,
    warmup_steps: int = 30,
    seed: int = 0,
    checkpoint: str | Path | None = None,
) -> TrainLog:
    """Text-only language-model pretraining of the whole decoder.

    Gives the decoder the fluency a pretrained language model would bring;
    nothing here sees an image, so captions stay ungrounded until stage 2.
    """
    params = list(model.decoder.parameters())
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    rng = np.random.default_rng([seed, 17])
    empty = torch.zeros(batch_size, 0, model.cfg.decoder_dim)
    opt = torch.optim.AdamW(params, lr=learning_rate, weight_decay=0.01)
    out = TrainLog()
    model.train()
    for step in range(steps):
        lr = lr_at(step, steps, warmup_steps, learning_rate)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = make_text_batch(pretraining_corpus(registry, batch_size, rng, model.cfg.volume_shape), tokenizer)
        logits, _ = model(empty, batch.ids)
        loss = captioning_loss(logits, batch.labels)
        _check_finite(loss, "pretrain", 0, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        out.step_losses.append(loss.item())
        out.learning_rates.append(lr)
    out.epoch_losses.append(float(np.mean(out.step_losses)) if out.step_losses else 0.0)
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    model.stage = STAGE0
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, STAGE0, model.cfg.to_dict(), {"step_losses": out.step_losses})
    return out


def stage1_items(samples: Sequence[Sample], seed: int, epoch: int) -> list[tuple[int, int]]:
    """One (sample index, sequence index) per sample, sequence drawn per epoch."""
    kinds = np.random.default_rng([seed, epoch, 1]).integers(0, len(KIND_ORDER), size=len(samples))
    return [(i, int(k)) for i, k in enumerate(kinds)]


def train_stage1(
    model: GuidelineNetwork,
    samples: Sequence[Sample],
    schedule: StageSchedule,
    tokenizer: Tokenizer,
    checkpoint: str | Path | None = None,
) -> TrainLog:
    """Sequence-discrimination instruction tuning of adapter, projection and decoder biases."""
    params = [p for n, p in model.named_parameters() if n in set(apply_policy(model, STAGE1))]
    volumes = torch.stack([volumes_tensor(s.volumes) for s in samples])  # (N, 3, D, H, W)
    records = [render_stage1(k) for k in KIND_ORDER]
    text = {k: make_text_batch([records[k]], tokenizer) for k in range(len(KIND_ORDER))}
    epoch_items: dict[int, list[tuple[int, int]]] = {}
    counter = {"step": 0}
    steps_per_epoch = math.ceil(len(samples) / schedule.batch_size) if len(samples) else 1

    def step_loss(idx):
        epoch = counter["step"] // steps_per_epoch
        counter["step"] += 1
        items = epoch_items.setdefault(epoch, stage1_items(samples, schedule.seed, epoch))
        picks = [items[i] for i in idx]
        vols = torch.stack([volumes[i, k] for i, k in picks])[:, None]
        prompts = model.visual_prompt(vols)
        ids = torch.cat([text[k].ids for _, k in picks])
        labels = torch.cat([text[k].labels for _, k in picks])
        logits, _ = model(prompts, ids)
        return captioning_loss(logits[:, prompts.shape[1]:], labels)

    model.train()
    out = _run_epochs(params, schedule, len(samples), step_loss, "stage1")
    model.stage = STAGE1
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, STAGE1, model.cfg.to_dict(), {"epoch_losses": out.epoch_losses})
    return out


def stage1_accuracy(model: GuidelineNetwork, samples: Sequence[Sample], tokenizer: Tokenizer, batch_size: int = 64) -> float:
    """Fraction of (sample, sequence) pairs whose greedy answer equals the group label."""
    pairs = [(s, k) for s in samples for k in KIND_ORDER]
    if not pairs:
        raise ValueError("no samples to evaluate")
    correct = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        vols = torch.stack([volumes_tensor(s.volumes[k]) for s, k in chunk])
        with torch.no_grad():
            prompts = model.visual_prompt(vols)
        answers = generate(model, [render_stage1(k) for _, k in chunk], prompts, tokenizer, max_new=4)
        correct += sum(a.strip() == stage1_group(k) for a, (_, k) in zip(answers, chunk))
    return correct / len(pairs)


def train_stage2(
    model: GuidelineNetwork,
    samples: Sequence[Sample],
    schedule: StageSchedule,
    tokenizer: Tokenizer,
    registry: GuidelineRegistry,
    checkpoint: str | Path | None = None,
) -> TrainLog:
    """Guideline-captioning tuning of projection and decoder biases; adapter stays frozen."""
    params = [p for n, p in model.named_parameters() if n in set(apply_policy(model, STAGE2))]
    volumes = torch.stack([volumes_tensor(s.volumes) for s in samples])
    # adapter and encoder are frozen in this stage, so their output is fixed per sample
    with torch.no_grad():
        encoded = torch.cat([model.encode_images(volumes[i:i + 32]) for i in range(0, len(samples), 32)]) if len(samples) else None
    batch = make_text_batch([render_stage2(registry, s) for s in samples], tokenizer) if len(samples) else None

    def step_loss(idx):
        t = torch.as_tensor(idx)
        prompts = model.projection(encoded[t])
        width = int(batch.mask[t].sum(1).max())
        logits, _ = model(prompts, batch.ids[t, :width])
        return captioning_loss(logits[:, prompts.shape[1]:], batch.labels[t, :width])

    model.train()
    out = _run_epochs(params, schedule, len(samples), step_loss, "stage2")
    model.stage = STAGE2
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, STAGE2, model.cfg.to_dict(), {"epoch_losses": out.epoch_losses})
    return out


def caption_accuracy(
    model: GuidelineNetwork,
    samples: Sequence[Sample],
    tokenizer: Tokenizer,
    registry: GuidelineRegistry,
    max_new: int = 48,
    batch_size: int = 32,
) -> float:
    """Fraction of greedy captions containing the criterion phrase of the sample's true score."""
    if not samples:
        raise ValueError("no samples to evaluate")
    hits = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        with torch.no_grad():
            prompts = model.visual_prompt(torch.stack([volumes_tensor(s.volumes) for s in chunk]))
        captions = generate(model, [render_stage2(registry, s) for s in chunk], prompts, tokenizer, max_new)
        hits += sum(criterion_phrase(s.clean_score, s.attrs) in c for s, c in zip(chunk, captions))
    return hits / len(samples)


# ---------------------------------------------------------------- student

@dataclass
class StudentRun:
    log: TrainLog
    head: AlignmentHead | None


def train_student(
    model: ScoringModel,
    samples: Sequence[Sample],
    cache: FeatureCache | None,
    cfg: LossConfig,
    schedule: StageSchedule,
    checkpoint: str | Path | None = None,
    expected_cache_digest: str | None = None,
) -> StudentRun:
    """Focal loss, plus alpha * KL to cached teacher features when a cache is given."""
    head = None
    if cache is not None:
        missing = [s.id for s in samples if s.id not in cache]
        if missing:
            raise KeyError(f"feature cache has no entry for sample {missing[0]}")
        if expected_cache_digest is not None and cache.source_digest != expected_cache_digest:
            raise ConsistencyError(
                f"feature cache was built from teacher {cache.source_digest[:12]}, expected {expected_cache_digest[:12]}"
            )
        gen = torch.Generator().manual_seed(schedule.seed + 7919)
        head = AlignmentHead(model.feature_dim, cache.feature_dim)
        with torch.no_grad():
            bound = 1.0 / math.sqrt(model.feature_dim)
            head.fc.weight.copy_(torch.rand(head.fc.weight.shape, generator=gen) * 2 * bound - bound)
            head.fc.bias.copy_(torch.rand(head.fc.bias.shape, generator=gen) * 2 * bound - bound)
        teacher = normalize_teacher(cache.lookup([s.id for s in samples]), cfg.teacher_norm)
    x = stack_samples(samples) if len(samples) else None
    y = torch.tensor([s.score for s in samples], dtype=torch.long)
    params = list(model.parameters()) + (list(head.parameters()) if head is not None else [])

    def step_loss(idx):
        t = torch.as_tensor(idx)
        feats, logits = model(x[t])
        loss = focal_loss(logits, y[t], cfg.focal)
        if head is not None:
            loss = combined_objective(loss, kl_feature_loss(teacher[t], feats, head, cfg.temperature), cfg)
        return loss

    model.train()
    out = _run_epochs(params, schedule, len(samples), step_loss, "student", optimizer="adam")
    model.eval()
    if checkpoint is not None:
        # the alignment head is training-only and never written with the student
        save_checkpoint(model, checkpoint, "student", {"backbone": type(model).__name__}, {"epoch_losses": out.epoch_losses})
    return StudentRun(out, head)


# ---------------------------------------------------------------- metrics

METRIC_NAMES = ("accuracy", "mse", "mae", "precision_macro", "recall_macro", "f1_macro")


def compute_metrics(preds, labels) -> dict[str, float]:
    """Accuracy, MSE/MAE over integer scores, and macro P/R/F1 over all five classes.

    A class with no predictions (or no support) contributes 0 to the
    corresponding macro average; the denominator is always 5.
    """
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(labels, dtype=np.int64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and labels must be non-empty and equally long")
    diff = (p - t).astype(np.float64)
    prec, rec, f1 = [], [], []
    for c in range(1, N_CLASSES + 1):
        tp = np.sum((p == c) & (t == c))
        n_pred, n_true = np.sum(p == c), np.sum(t == c)
        pc = tp / n_pred if n_pred else 0.0
        rc = tp / n_true if n_true else 0.0
        prec.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc > 0 else 0.0)
    return {
        "accuracy": float(np.mean(p == t)),
        "mse": float(np.mean(diff**2)),
        "mae": float(np.mean(np.abs(diff))),
        "precision_macro": float(np.mean(prec)),
        "recall_macro": float(np.mean(rec)),
        "f1_macro": float(np.mean(f1)),
    }


@dataclass
class MetricsReport:
    mean: dict[str, float]
    std: dict[str, float]
    best: dict[str, float]
    per_run: list[dict[str, float]]

    @classmethod
    def aggregate(cls, runs: Sequence[dict[str, float]]) -> "MetricsReport":
        if not runs:
            raise ValueError("cannot aggregate zero runs")
        mean = {m: float(np.mean([r[m] for r in runs])) for m in METRIC_NAMES}
        std = {m: float(np.std([r[m] for r in runs])) for m in METRIC_NAMES}
        best_run = max(runs, key=lambda r: r["accuracy"])
        return cls(mean, std, dict(best_run), [dict(r) for r in runs])

    def __getattr__(self, name):
        if name in METRIC_NAMES:
            return self.mean[name]
        raise AttributeError(name)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: ScoringModel, samples: Sequence[Sample], batch_size: int = 64) -> dict[str, float]:
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    preds = []
    for start in range(0, len(samples), batch_size):
        preds.append(model.predict(stack_samples(samples[start:start + batch_size])))
    return compute_metrics(torch.cat(preds).numpy(), [s.score for s in samples])


def evaluate_report(model: ScoringModel, samples: Sequence[Sample]) -> MetricsReport:
    return MetricsReport.aggregate([evaluate(model, samples)])


def write_json(path: str | Path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
