"""Command-line entry point: ``jointspo <command> [flags]``.

Every command writes ``manifest.json`` into its ``--out`` directory next to
its artifacts. Metric files hold metrics only, so reruns with the same seed
produce byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from . import ensemble as ens
from .data import DataError, SchemaError, load_dataset, load_schemas, save_dataset, save_schemas
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .synthetic import ConfigError, SyntheticConfig, generate_pretrain_corpus, generate_synthetic_corpus
from .training import (TrainConfig, ablation_suite, evaluate, format_ablation, load_predictions,
                       pr_curve, predict, pretrain_ner, save_predictions, train)

log = logging.getLogger("jointspo")

CONFIG_VERSION = 1


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)    # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0
    torch_version: str = torch.__version__

    def write(self, out_dir: Path) -> None:
        (out_dir / "manifest.json").write_text(
            json.dumps(asdict(self), indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _need(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def read_config(path: str | None) -> dict:
    """JSON object or ``key=value`` lines; both carry ``version``."""
    if path is None:
        return {}
    p = _need(path, "--config")
    text = p.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        cfg = json.loads(text)
    else:
        cfg = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{p}:{n}: expected key=value")
            k, v = line.split("=", 1)
            cfg[k.strip()] = _parse_value(v.strip())
    version = cfg.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise UsageError(f"{p}: unsupported config version {version}")
    return cfg


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(args) -> TrainConfig:
    cfg = read_config(args.config)
    cfg.pop("version", None)
    cfg.pop("synthetic", None)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "threshold", None) is not None:
        cfg["threshold"] = args.threshold
    return TrainConfig.from_dict(cfg)


# --- commands --------------------------------------------------------------

def cmd_gen_data(args, m: RunManifest, out: Path):
    raw = read_config(args.config)
    raw = raw.get("synthetic", raw)
    known = {f.name for f in fields(SyntheticConfig)}
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items() if k in known}
    if args.seed is not None:
        kw["seed"] = args.seed
    scfg = SyntheticConfig(**kw)
    schemas, tr, dv, te = generate_synthetic_corpus(scfg)
    docs = generate_pretrain_corpus(scfg, args.pretrain_docs)
    save_schemas(schemas, out / "schemas.json")
    for name, split in (("train", tr), ("dev", dv), ("test", te)):
        save_dataset(split, out / f"{name}.json")
    with open(out / "pretrain.json", "w", encoding="utf-8") as f:
        for d in docs:
            f.write(json.dumps(d, ensure_ascii=False) + "\n")
    m.config, m.seed = asdict(scfg), scfg.seed
    print(f"wrote {len(tr)}/{len(dv)}/{len(te)} sentences and {len(docs)} pretraining documents to {out}")


def _load_docs(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def cmd_pretrain_ner(args, m: RunManifest, out: Path):
    cfg = _train_config(args)
    docs_path = _need(args.docs, "--docs")
    m.inputs[str(docs_path)] = file_hash(docs_path)
    res = pretrain_ner(cfg, _load_docs(docs_path))
    save_checkpoint(res.bundle, out / "model.pt")
    _dump_json({"skipped": res.skipped, "steps": len(res.steps),
                "final_loss": round(res.steps[-1]["total"], 6) if res.steps else None}, out / "metrics.json")
    m.config, m.seed = asdict(cfg), cfg.seed
    print(f"pretrained on {len(res.steps)} steps, skipped {res.skipped} documents")


def cmd_train(args, m: RunManifest, out: Path):
    cfg = _train_config(args)
    schemas_path = _need(args.schemas, "--schemas")
    train_path, dev_path = _need(args.train, "--train"), _need(args.dev, "--dev")
    paths = [schemas_path, train_path, dev_path]
    init = None
    if args.init:
        init_path = _need(args.init, "--init")
        paths.append(init_path)
        init = load_checkpoint(init_path)
    for p in paths:
        m.inputs[str(p)] = file_hash(p)
    schemas = load_schemas(schemas_path)
    res = train(cfg, schemas, load_dataset(train_path), load_dataset(dev_path), init=init)
    save_checkpoint(res.bundle, out / "model.pt")
    for n, r in enumerate(res.history):
        print(f"epoch {n} dev {r.line()}")
    _dump_json({"best_epoch": res.best_epoch, "dev": [r.to_dict() for r in res.history]}, out / "metrics.json")
    m.config, m.seed = asdict(cfg), cfg.seed


def cmd_predict(args, m: RunManifest, out: Path):
    model_path, test_path = _need(args.model, "--model"), _need(args.test, "--test")
    for p in (model_path, test_path):
        m.inputs[str(p)] = file_hash(p)
    bundle = load_checkpoint(model_path)
    threshold = args.threshold if args.threshold is not None else bundle.meta["train_config"]["threshold"]
    preds = predict(bundle, load_dataset(test_path), threshold, source=args.source or "")
    save_predictions(preds, out / "predictions.json")
    m.config = {"threshold": threshold, "source": args.source}
    print(f"wrote predictions for {len(preds)} sentences")


def _pred_gold(args, m: RunManifest):
    pred_path, gold_path = _need(args.pred, "--pred"), _need(args.gold, "--gold")
    for p in (pred_path, gold_path):
        m.inputs[str(p)] = file_hash(p)
    return load_predictions(pred_path), load_dataset(gold_path)


def cmd_evaluate(args, m: RunManifest, out: Path):
    preds, gold = _pred_gold(args, m)
    report = evaluate(preds, gold)
    print(report.line())
    _dump_json(report.to_dict(), out / "metrics.json")


def cmd_pr_curve(args, m: RunManifest, out: Path):
    preds, gold = _pred_gold(args, m)
    points = pr_curve(preds, gold)
    with open(out / "pr_curve.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in points:
            w.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}"])
    print(f"wrote {len(points)} points")


def cmd_ablate(args, m: RunManifest, out: Path):
    cfg = _train_config(args)
    schemas_path = _need(args.schemas, "--schemas")
    train_path, dev_path = _need(args.train, "--train"), _need(args.dev, "--dev")
    docs_path = _need(args.docs, "--docs")
    for p in (schemas_path, train_path, dev_path, docs_path):
        m.inputs[str(p)] = file_hash(p)
    rows = ablation_suite(cfg, load_schemas(schemas_path), load_dataset(train_path),
                          load_dataset(dev_path), _load_docs(docs_path))
    table = format_ablation(rows)
    print(table)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    _dump_json([{"name": r.name, **r.report.to_dict(), "delta_f1": r.delta_f1} for r in rows],
               out / "metrics.json")
    m.config, m.seed = asdict(cfg), cfg.seed


def _sources(args, m: RunManifest) -> dict[str, list]:
    per_source = {}
    for item in args.pred:
        name, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--pred expects name=path, got {item!r}")
        p = _need(path, "--pred")
        m.inputs[str(p)] = file_hash(p)
        per_source[name] = load_predictions(p, source=name)
    return per_source


def _ensemble_context(args, m: RunManifest):
    schemas_path, train_path = _need(args.schemas, "--schemas"), _need(args.train, "--train")
    for p in (schemas_path, train_path):
        m.inputs[str(p)] = file_hash(p)
    schemas = load_schemas(schemas_path)
    train_set = load_dataset(train_path)
    index = ens.TrainsetIndex(train_set)
    segmenter = ens.Segmenter(index.entities)
    per_source = _sources(args, m)
    return schemas, index, segmenter, per_source


def cmd_ensemble_train(args, m: RunManifest, out: Path):
    schemas, index, seg, per_source = _ensemble_context(args, m)
    gold_path = _need(args.gold, "--gold")
    m.inputs[str(gold_path)] = file_hash(gold_path)
    gold = load_dataset(gold_path)
    contexts = ens.contexts_from_predictions(per_source)
    sources = sorted(per_source)
    table = ens.build_table(contexts, index, seg, schemas.predicates, sources, gold)
    seed = args.seed if args.seed is not None else 0
    threshold = args.threshold if args.threshold is not None else 0.5
    cv = ens.cross_validate(table, args.backend, args.folds, seed)
    reranker = ens.train_reranker(table, args.backend, threshold, seed)
    ens.save_reranker(reranker, out / "reranker.pkl")
    ens.save_feature_dump(table, out / "features.jsonl")
    kept = ens.rerank(table, cv.oof_scores, threshold, len(contexts))
    report = evaluate(ens.rerank_examples([c.text for c in contexts], kept), gold)
    print(f"cross-validated AUC={cv.auc:.4f}; out-of-fold rerank {report.line()}")
    _dump_json({"auc": cv.auc, "oof": report.to_dict(), "features": len(table.manifest),
                "manifest_hash": ens.manifest_hash(table.manifest), "sources": sources,
                "fold_curves": cv.fold_curves}, out / "metrics.json")
    m.config = {"backend": args.backend, "folds": args.folds, "threshold": threshold, "sources": sources}
    m.seed = seed


def cmd_ensemble_apply(args, m: RunManifest, out: Path):
    schemas, index, seg, per_source = _ensemble_context(args, m)
    rr_path = _need(args.reranker, "--reranker")
    m.inputs[str(rr_path)] = file_hash(rr_path)
    sources = sorted(per_source)
    manifest = ens.build_manifest(schemas.predicates, sources)
    reranker = ens.load_reranker(rr_path, manifest)
    contexts = ens.contexts_from_predictions(per_source)
    table = ens.build_table(contexts, index, seg, schemas.predicates, sources)
    threshold = args.threshold if args.threshold is not None else reranker.threshold
    kept = ens.rerank(table, reranker.score(table.X), threshold, len(contexts))
    with open(out / "predictions.json", "w", encoding="utf-8") as f:
        for ctx, k in zip(contexts, kept):
            rec = {"text": ctx.text,
                   "spo_list": [{**t.to_json(), "pair_prob": round(s, 6)} for t, s in k]}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    if args.gold:
        gold_path = _need(args.gold, "--gold")
        m.inputs[str(gold_path)] = file_hash(gold_path)
        report = evaluate(ens.rerank_examples([c.text for c in contexts], kept), load_dataset(gold_path))
        print(report.line())
        _dump_json(report.to_dict(), out / "metrics.json")
    m.config = {"threshold": threshold, "sources": sources}
    print(f"kept {sum(len(k) for k in kept)} triplets over {len(contexts)} sentences")


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointspo", description="Joint entity and relation extraction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, *flags):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        for f in flags:
            f(p)
        return p

    def seed(p):
        p.add_argument("--seed", type=int, help="seed for every random choice; overrides the config")

    def config(p):
        p.add_argument("--config", help="versioned config file (JSON object or key=value lines)")

    def threshold(p):
        p.add_argument("--threshold", type=float, help="decision threshold in (0, 1)")

    def data(*names):
        def f(p):
            for n in names:
                p.add_argument(f"--{n}", help=f"{n} data file (JSON lines)")
        return f

    def schemas(p):
        p.add_argument("--schemas", help="schema file (JSON lines)")

    def docs(p):
        p.add_argument("--docs", help="pretraining documents (JSON lines with title, content)")

    def pred_gold(p):
        p.add_argument("--pred", help="prediction file")
        p.add_argument("--gold", help="gold data file")

    def ens_inputs(p):
        p.add_argument("--pred", action="append", default=[], metavar="NAME=PATH",
                       help="predictions of one source model; repeat per source")

    g = add("gen-data", cmd_gen_data, "generate a synthetic corpus and pretraining documents", config, seed)
    g.add_argument("--pretrain-docs", type=int, default=2000, help="number of pretraining documents")
    add("pretrain-ner", cmd_pretrain_ner, "weakly supervised NER pretraining on title pseudo labels",
        docs, config, seed)
    t = add("train", cmd_train, "train the joint model", schemas, data("train", "dev"), config, seed, threshold)
    t.add_argument("--init", help="pretrained checkpoint whose encoder initializes the model")
    p = add("predict", cmd_predict, "predict triplets for a data file", data("test"), threshold)
    p.add_argument("--model", help="checkpoint file")
    p.add_argument("--source", help="source name recorded on every candidate")
    add("evaluate", cmd_evaluate, "triplet precision, recall and F1", pred_gold)
    add("pr-curve", cmd_pr_curve, "precision-recall curve over candidate probabilities (CSV)", pred_gold)
    add("ablate", cmd_ablate, "run the six-row ablation grid", schemas, data("train", "dev"), docs, config, seed)
    e = add("ensemble-train", cmd_ensemble_train, "train a reranker on pooled dev predictions",
            schemas, data("train"), ens_inputs, seed, threshold)
    e.add_argument("--gold", help="gold dev data file")
    e.add_argument("--backend", choices=("gbdt", "logreg"), default="gbdt", help="classifier family")
    e.add_argument("--folds", type=int, default=5, help="cross-validation folds (grouped by sentence)")
    a = add("ensemble-apply", cmd_ensemble_apply, "rerank pooled predictions with a trained reranker",
            schemas, data("train"), ens_inputs, threshold)
    a.add_argument("--reranker", help="reranker file from ensemble-train")
    a.add_argument("--gold", help="optional gold file; writes metrics.json when given")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = RunManifest(args.command, argv, {}, getattr(args, "seed", None))
    start = time.perf_counter()
    try:
        args.fn(args, m, out)
    except UsageError as e:
        print(f"jointspo {args.command}: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"jointspo {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (SchemaError, DataError, CheckpointError, ConfigError, ens.RerankerError, ValueError) as e:
        print(f"jointspo {args.command}: error: {e}", file=sys.stderr)
        return 1
    m.wall_clock = round(time.perf_counter() - start, 3)
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            m.outputs[str(p)] = file_hash(p)
    m.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
