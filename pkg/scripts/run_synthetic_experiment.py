#!/usr/bin/env python3
"""End-to-end synthetic experiment: generate clusters, meta-train the head,
evaluate the nested-shot protocol, and run the fused-vs-first-block ablation.

Everything flows through the CLI so the produced artifacts (manifests,
checkpoints, history CSV, report tables) match what a user would get by hand.

    python scripts/run_synthetic_experiment.py --workdir out/ --seed 0
"""

import argparse
import subprocess
import sys
from pathlib import Path


def run(*args):
    cmd = [sys.executable, "-m", "fairproto"] + [str(a) for a in args]
    print("+", " ".join(cmd[2:]), flush=True)
    proc = subprocess.run(cmd)
    if proc.returncode != 0:
        sys.exit(proc.returncode)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="experiment_out")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--classes", type=int, default=7)
    parser.add_argument("--separation", type=float, default=2.0)
    parser.add_argument("--episodes", type=int, default=250)
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    manifest = work / "clusters.fpem"
    vit_manifest = work / "clusters_block1.fpem"

    run("synth", "--classes", args.classes, "--per-class", 60, "--dim", 32,
        "--dim-vit", 24, "--dim-resnet", 8, "--informative", "resnet",
        "--sep", args.separation, "--seed", args.seed,
        "--out", manifest, "--vit-only-out", vit_manifest)

    checkpoints = {}
    for tag, source in (("fused", manifest), ("block1", vit_manifest)):
        checkpoints[tag] = work / f"head_{tag}.fphd"
        run("train", "--manifest", source,
            "--out-checkpoint", checkpoints[tag],
            "--history", work / f"history_{tag}.csv",
            "--episodes", args.episodes, "--k-min", 5, "--k-max", min(7, args.classes),
            "--hidden", 64, "--out-dim", 32, "--seed", args.seed)

    run("eval", "--manifest", manifest, "--checkpoint", checkpoints["fused"],
        "--out-dir", work / "report", "--shots", "1,3,5",
        "--assignments", 5, "--trials", 10, "--queries", 10, "--seed", args.seed)

    run("ablate", "--manifest-full", manifest, "--checkpoint-full", checkpoints["fused"],
        "--manifest-vit", vit_manifest, "--checkpoint-vit", checkpoints["block1"],
        "--out", work / "ablation.csv", "--shots", "1,3,5",
        "--assignments", 5, "--trials", 10, "--queries", 10, "--seed", args.seed)

    print(f"\nartifacts in {work}/: clusters.fpem, head_*.fphd, history_*.csv, "
          f"report/, ablation.csv")


if __name__ == "__main__":
    main()
