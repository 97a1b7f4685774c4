"""Train four variants (BiLSTM / transformer, with / without NER pretraining) and rerank.

    python3 scripts/run_ensemble.py --config configs/desk.json --out runs/ensemble
"""
import argparse
from pathlib import Path

from run_pipeline import run

VARIANTS = ("lstm", "lstm_pre", "transformer", "transformer_pre")

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--transformer-config", default="configs/desk_transformer.json")
    ap.add_argument("--out", default="runs/ensemble")
    ap.add_argument("--backend", choices=("gbdt", "logreg"), default="gbdt")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = out / "data"
    run("gen-data", "--config", args.config, "--out", d)
    configs = {"lstm": Path(args.config), "transformer": Path(args.transformer_config)}
    for enc, path in configs.items():
        run("pretrain-ner", "--docs", d / "pretrain.json", "--config", path, "--out", out / f"pre_{enc}")
    preds = []
    for name in VARIANTS:
        enc = name.split("_")[0]
        init = ["--init", out / f"pre_{enc}" / "model.pt"] if name.endswith("_pre") else []
        run("train", "--schemas", d / "schemas.json", "--train", d / "train.json", "--dev", d / "dev.json",
            "--config", configs[enc], *init, "--out", out / name)
        for split in ("dev", "test"):
            run("predict", "--model", out / name / "model.pt", "--test", d / f"{split}.json",
                "--source", name, "--out", out / name / split)
            run("evaluate", "--pred", out / name / split / "predictions.json", "--gold", d / f"{split}.json",
                "--out", out / name / split)
    common = ["--schemas", d / "schemas.json", "--train", d / "train.json"]
    dev_preds = [a for n in VARIANTS for a in ("--pred", f"{n}={out / n / 'dev' / 'predictions.json'}")]
    test_preds = [a for n in VARIANTS for a in ("--pred", f"{n}={out / n / 'test' / 'predictions.json'}")]
    run("ensemble-train", *common, *dev_preds, "--gold", d / "dev.json", "--backend", args.backend,
        "--out", out / "reranker")
    run("ensemble-apply", *common, *test_preds, "--reranker", out / "reranker" / "reranker.pkl",
        "--gold", d / "test.json", "--out", out / "reranked_test")
