"""Desk-scale reference run: data, three stages, transfer-vs-scratch, evaluation.

Heavy outputs (dataset, checkpoints) stay in WORK; the logs, configs and
evaluation reports land in DEST together with summary.json, which the
acceptance tests read.

    python3 scripts/reference_run.py --work /tmp/ref --dest runs/reference
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import shutil
import time
from pathlib import Path

from flexsep.cli import main as cli

# epochs per step; stage 1 and the 3-mix comparison use the full splits
BUDGET = {"stage1": 3, "mix3": 2, "stage2": 3, "stage3": 2}


def step(name: str, argv: list[str], timings: dict) -> None:
    print(f"== {name}: flexsep {' '.join(argv)}", flush=True)
    t0 = time.monotonic()
    code = cli(argv)
    timings[name] = round(time.monotonic() - t0, 1)
    if code != 0:
        raise SystemExit(f"{name} failed with exit code {code}")


def last_valid(run: Path) -> dict:
    recs = [json.loads(x) for x in (run / "train.jsonl").read_text().splitlines()]
    return [r for r in recs if r["split"] == "valid"]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", required=True)
    ap.add_argument("--dest", required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    work, dest = Path(args.work), Path(args.dest)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    t: dict[str, float] = {}
    seed = ["--seed", str(args.seed)]

    if not (data / "manifest.json").exists():
        step("gen-data", ["gen-data", "--preset", "desk", "--out", str(data), *seed], t)
    man = ["--manifest", str(data / "manifest.json")]

    def train(name, stage, epochs, *extra):
        if not (work / name / "last.ckpt").exists():
            step(name, ["train", "--stage", str(stage), *man, "--out", str(work / name), *seed,
                        "--set", f"train.max_epochs={epochs}", *extra], t)

    train("stage1", 1, BUDGET["stage1"])
    train("transfer", 1, BUDGET["mix3"], "--transfer-from", str(work / "stage1" / "best.ckpt"))
    train("scratch", 1, BUDGET["mix3"], "--kind", "3mix")
    train("stage2", 2, BUDGET["stage2"], "--init", str(work / "transfer" / "best.ckpt"))
    train("stage3", 3, BUDGET["stage3"], "--init", str(work / "stage2" / "best.ckpt"),
          "--set", "train.max_valid=100")
    step("eval-23mix", ["evaluate", "--ckpt", str(work / "stage3" / "best.ckpt"), *man, "--mix", "23mix",
                        "--split", "test", "--out", str(work / "eval_23mix")], t)
    step("eval-2mix", ["evaluate", "--ckpt", str(work / "stage1" / "best.ckpt"), *man, "--mix", "2mix",
                       "--split", "test", "--out", str(work / "eval_2mix")], t)

    dest.mkdir(parents=True, exist_ok=True)
    for name in ("stage1", "transfer", "scratch", "stage2", "stage3"):
        (dest / name).mkdir(exist_ok=True)
        for f in ("train.jsonl", "config.yaml", "seed"):
            shutil.copy(work / name / f, dest / name / f)
    for name in ("eval_23mix", "eval_2mix"):
        (dest / name).mkdir(exist_ok=True)
        for f in ("aggregate.json", "per_speaker.csv"):
            shutil.copy(work / name / f, dest / name / f)
    shutil.copy(data / "config.yaml", dest / "data_config.yaml")

    s1, tr, sc, s2 = (last_valid(work / n) for n in ("stage1", "transfer", "scratch", "stage2"))
    summary = {
        "budget_epochs": BUDGET,
        "wallclock_s": t,
        "cpu_count": os.cpu_count(),
        "affinity": len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else None,
        "machine": platform.machine(),
        "stage1_best_si_sdri": max(r["metrics"]["si_sdri"] for r in s1),
        "transfer_best_si_sdri": max(r["metrics"]["si_sdri"] for r in tr),
        "scratch_best_si_sdri": max(r["metrics"]["si_sdri"] for r in sc),
        "stage2_best_pair_accuracy": max(r["metrics"]["pair_accuracy"] for r in s2),
        "eval_23mix": json.loads((work / "eval_23mix" / "aggregate.json").read_text()),
        "eval_2mix": json.loads((work / "eval_2mix" / "aggregate.json").read_text()),
    }
    (dest / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
