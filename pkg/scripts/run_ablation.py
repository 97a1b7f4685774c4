"""Six-row ablation grid on a synthetic corpus.

    python3 scripts/run_ablation.py --config configs/desk.json --out runs/ablation
"""
import argparse
from pathlib import Path

from run_pipeline import run

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    out = Path(args.out)
    seed_flag = ["--seed", args.seed] if args.seed is not None else []
    d = out / "data"
    run("gen-data", "--config", args.config, *seed_flag, "--out", d)
    run("ablate", "--schemas", d / "schemas.json", "--train", d / "train.json", "--dev", d / "dev.json",
        "--docs", d / "pretrain.json", "--config", args.config, *seed_flag, "--out", out)
