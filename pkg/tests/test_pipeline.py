import dataclasses
import json

import pytest

from guideline_distill.config import load_config
from guideline_distill.errors import ConfigError, ConsistencyError
from guideline_distill.pipeline import (
    ARM_BASELINE,
    ARM_PICG,
    ARM_PLAIN,
    _run_arm,
    ablate_alpha,
    arm_cache,
    checkpoint_stage,
    ensure_dataset,
    run_experiment_suite,
    run_teacher_pipeline,
    table1_markdown,
    table3_markdown,
    teacher_key,
)


@pytest.fixture(scope="module")
def smoke_cfg(tmp_path_factory):
    from pathlib import Path

    root = tmp_path_factory.mktemp("smoke")
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg")
    return dataclasses.replace(cfg, dataset=str(root / "data"), out=str(root / "run"), backbones=["vgg3d"])


@pytest.fixture(scope="module")
def teacher(smoke_cfg):
    return run_teacher_pipeline(smoke_cfg)


def test_teacher_pipeline_summary(teacher, smoke_cfg):
    s = teacher.summary
    assert s["stage1_frozen_unchanged"] and s["stage2_adapter_unchanged"]
    assert checkpoint_stage(teacher.checkpoint("stage2")) == "stage2"
    assert checkpoint_stage(teacher.checkpoint("stage0")) == "stage0"
    assert s["digests"]["stage0"] != s["digests"]["stage2"]
    # second call reuses the artifacts
    again = run_teacher_pipeline(smoke_cfg)
    assert again.summary == s
    changed = smoke_cfg.updated({"stage2.epochs": 2})
    assert teacher_key(changed) != teacher_key(smoke_cfg)
    assert teacher_key(smoke_cfg.updated({"student.epochs": 5})) == teacher_key(smoke_cfg)


def test_arm_caches(teacher):
    assert arm_cache(ARM_PLAIN, teacher) is None
    picg, base = arm_cache(ARM_PICG, teacher), arm_cache(ARM_BASELINE, teacher)
    assert picg.source_digest == teacher.summary["digests"]["stage2"]
    assert base.source_digest == teacher.summary["digests"]["stage0"]
    assert picg.checksum != base.checksum
    with pytest.raises(ConsistencyError):
        arm_cache(ARM_PICG, None)


def test_dataset_mismatch(smoke_cfg, teacher):
    with pytest.raises(ConfigError):
        ensure_dataset(smoke_cfg.updated({"data.seed": 99}))


def test_run_arm_failure_is_recorded():
    def runner(seed):
        if seed == 1:
            raise RuntimeError("diverged")
        return {m: 0.5 for m in ("accuracy", "mse", "mae", "precision_macro", "recall_macro", "f1_macro")}

    entry = _run_arm(runner, [0, 1], "probe")
    assert entry["status"] == "failed" and "diverged" in entry["error"]
    ok = _run_arm(runner, [0, 2], "probe")
    assert ok["status"] == "ok" and ok["mean"]["accuracy"] == 0.5


def test_markdown_marks_failures():
    rows = [{"backbone": "vgg3d", "arm": ARM_PLAIN, "status": "failed"}]
    assert "FAILED" in table1_markdown(rows)
    text = table3_markdown([{"backbone": "vgg3d", "best_accuracy": {ARM_PLAIN: 0.5, ARM_PICG: None}}], [ARM_PLAIN, ARM_PICG])
    assert "50.0%" in text and "FAILED" in text


def test_suite_and_ablation(smoke_cfg, teacher, tmp_path):
    files = run_experiment_suite(smoke_cfg)
    t1 = json.loads(files["table1.json"].read_text())
    assert [r["arm"] for r in t1["rows"]] == [ARM_PLAIN, ARM_PICG]
    assert set(t1["rows"][1]["delta"]) == set(t1["metrics"])
    t3 = json.loads(files["table3.json"].read_text())
    assert t3["arms"] == [ARM_PLAIN, ARM_PICG, ARM_BASELINE]
    files2 = ablate_alpha(smoke_cfg, values=[0.0, 0.6])
    t2 = json.loads(files2["table2.json"].read_text())
    assert [r["alpha"] for r in t2["rows"]] == [0.0, 0.6]
    with pytest.raises(ConfigError):
        ablate_alpha(smoke_cfg, values=[-1.0])
    with pytest.raises(ConfigError):
        run_experiment_suite(dataclasses.replace(smoke_cfg, arms=["teacher only"]))
