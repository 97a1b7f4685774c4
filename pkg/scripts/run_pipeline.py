"""Synthetic corpus -> train -> predict -> evaluate -> PR curve, via the CLI.

    python3 scripts/run_pipeline.py --config configs/desk.json --out runs/desk
"""
import argparse
import sys
from pathlib import Path

from jointspo.cli import main


def run(*argv):
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)


def pipeline(config: str, out: Path, seed: int | None = None) -> Path:
    seed_flag = ["--seed", seed] if seed is not None else []
    d = out / "data"
    run("gen-data", "--config", config, *seed_flag, "--out", d)
    run("train", "--schemas", d / "schemas.json", "--train", d / "train.json", "--dev", d / "dev.json",
        "--config", config, *seed_flag, "--out", out / "model")
    for split in ("dev", "test"):
        run("predict", "--model", out / "model" / "model.pt", "--test", d / f"{split}.json",
            "--out", out / split)
        run("evaluate", "--pred", out / split / "predictions.json", "--gold", d / f"{split}.json",
            "--out", out / split)
        run("pr-curve", "--pred", out / split / "predictions.json", "--gold", d / f"{split}.json",
            "--out", out / split)
    return d


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/pipeline")
    args = ap.parse_args()
    pipeline(args.config, Path(args.out), args.seed)
