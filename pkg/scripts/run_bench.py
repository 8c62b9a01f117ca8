#!/usr/bin/env python3
"""Run the desk-scale benchmark: teacher stages, every student arm, alpha ablation.

    python scripts/run_bench.py --out runs/bench [--skip-ablation]

Prints the Table-1/2/3 shaped markdown reports and the teacher summary.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from guideline_distill.config import bench_config
from guideline_distill.pipeline import ablate_alpha, run_experiment_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/bench")
    ap.add_argument("--dataset", default="data/bench")
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = bench_config(out=args.out, dataset=args.dataset)
    start = time.time()
    files = run_experiment_suite(cfg)
    if not args.skip_ablation:
        files.update(ablate_alpha(cfg))
    for name in ("table1.md", "table2.md", "table3.md"):
        if name in files:
            print(f"## {name}\n\n{Path(files[name]).read_text()}")
    print(json.dumps(json.loads(Path(files["teacher.json"]).read_text()), indent=1))
    print(f"total {time.time() - start:.0f} s")


if __name__ == "__main__":
    main()
