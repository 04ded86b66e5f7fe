"""Command-line entry point: one subcommand per pipeline stage plus ``pipeline`` to chain them.

Exit status is 0 on success, 1 for bad input or usage, 2 for internal failures.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import logging
import sys
from collections import Counter, defaultdict
from pathlib import Path
from typing import Sequence

import yaml

from . import jsonio
from .context import candidate_record, example_from_record, example_to_record, load_examples
from .extraction import FileAnnotationBackend, categorize_entities, sentence_candidates
from .ingest import RecordError, Sentence, filter_target_sentences, load_corpus, segment_sentences

logger = logging.getLogger("lifetraj")


class UserError(Exception):
    """Bad input or configuration; reported without a traceback."""


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(f"{self.prog}: {message}")


class JsonLogFormatter(logging.Formatter):
    def format(self, record):
        return jsonio.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def say(message: str):
    print(message, file=sys.stderr)


class Outputs:
    """Tracks files written by a stage so a failure can remove them."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def discard(self):
        for p in self.paths:
            with contextlib.suppress(FileNotFoundError):
                p.unlink()


def _require(path, what: str) -> Path:
    if path is None:
        raise UserError(f"missing {what}")
    path = Path(path)
    if not path.exists():
        raise UserError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------- stages

def run_ingest(corpus, out, annotations=None) -> dict:
    errors: list[RecordError] = []
    pages = list(load_corpus(_require(corpus, "corpus"), errors))
    backend = FileAnnotationBackend.from_path(_require(annotations, "annotations")) if annotations else None
    rows = []
    for page in pages:
        sentences = segment_sentences(page)
        if backend is not None:
            sentences = filter_target_sentences(sentences, _annotations_by_key(backend, sentences))
        for s in sentences:
            row = s.to_json()
            row["paragraph"] = page.paragraphs[s.paragraph_index]
            row["title"] = page.title
            rows.append(row)
    jsonio.write_jsonl(out, rows)
    for err in errors:
        logger.warning("corpus line %d: %s", err.line, err.message)
    return {"pages": len(pages), "sentences": len(rows), "bad_records": len(errors)}


def _annotations_by_key(backend, sentences):
    out = {}
    for s in sentences:
        try:
            out[s.key] = categorize_entities(s, backend.annotate(s))
        except (LookupError, ValueError):
            continue
    return out


def _paragraph_texts(rows: list[dict]) -> dict:
    grouped = defaultdict(list)
    for r in rows:
        grouped[(str(r["page_id"]), int(r["paragraph_index"]))].append(r)
    return {
        key: " ".join(r["text"] for r in sorted(rs, key=lambda r: int(r["sentence_index"])))
        for key, rs in grouped.items()
    }


def run_extract(sentences, annotations, out) -> dict:
    rows = list(jsonio.read_jsonl(_require(sentences, "sentences file")))
    backend = FileAnnotationBackend.from_path(_require(annotations, "annotations file"))
    fallback = _paragraph_texts(rows)
    candidates, skipped = [], 0
    for row in rows:
        sent = Sentence.from_json(row)
        try:
            triplets = sentence_candidates(sent, backend.annotate(sent))
        except (LookupError, ValueError) as exc:
            logger.warning("skipping sentence %s: %s", sent.key, exc)
            skipped += 1
            continue
        paragraph = row.get("paragraph") or fallback[(sent.page_id, sent.paragraph_index)]
        for t in triplets:
            candidates.append(candidate_record(t, paragraph, sent.text))
    jsonio.write_jsonl(out, candidates)
    return {"sentences": len(rows), "skipped": skipped, "candidates": len(candidates)}


def run_annotate(sentences, out, endpoint=None, model="gpt-4", prompts=None, concurrency=4, retries=3) -> dict:
    from .annotation import Annotator, ChatCompletionClient, PromptSet

    rows = list(jsonio.read_jsonl(_require(sentences, "sentences file")))
    prompt_set = PromptSet.load(_require(prompts, "prompt file") if prompts else None)
    try:
        chat = ChatCompletionClient(endpoint, model=model)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    errors: list = []
    examples = Annotator(chat, prompt_set, retries=retries, concurrency=concurrency).annotate(rows, errors)
    jsonio.write_jsonl(out, [example_to_record(e) for e in examples])
    return {"sentences": len(rows), "positives": len(examples), "failed_sentences": len(errors)}


def load_model_config(config_path=None, overrides: dict | None = None):
    from .model import ModelConfig

    data: dict = {}
    if config_path is not None:
        path = _require(config_path, "config file")
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        data = dict(raw.get("model", raw))
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    try:
        return ModelConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid model config: {exc}") from exc


def _load_pool(path, what: str, source=None) -> list:
    errors: list = []
    examples = load_examples(_require(path, what), source, errors)
    if errors:
        logger.warning("%s: %d rows skipped", path, len(errors))
    return examples


def run_train(config, labeled, unlabeled, out, *, log=None, splits_dir=None, overrides=None, grid=None) -> dict:
    from .training import grid_search, save_checkpoint, split_dataset, train

    cfg = load_model_config(config, overrides)
    pool = _load_pool(labeled, "labeled file")
    if not pool:
        raise UserError("labeled file holds no usable examples")
    unlab = _load_pool(unlabeled, "unlabeled file", "unlabeled") if unlabeled else []
    if cfg.use_ssl and not unlab:
        raise UserError("semi-supervised training needs a non-empty --unlabeled pool (or --no-ssl)")
    splits = split_dataset(pool, cfg.seed)

    summary: dict = {}
    if grid:
        gs = grid_search(cfg, grid, splits, unlab)
        cfg = gs.best_config
        summary["grid"] = gs.table

    log_path = Path(log) if log else Path(str(out) + ".log.jsonl")
    with jsonio.atomic_path(log_path) as tmp_log:
        result = train(cfg, splits, unlab, log_path=tmp_log)
    with jsonio.atomic_path(out) as tmp:
        save_checkpoint(tmp, result.model, cfg)
    if splits_dir:
        for name in ("train", "val", "test"):
            jsonio.write_jsonl(Path(splits_dir) / f"{name}.jsonl",
                               [example_to_record(e) for e in getattr(splits, name)])
    summary.update({
        "train": len(splits.train), "val": len(splits.val), "test": len(splits.test),
        "unlabeled": len(unlab), "best_val_f1": result.best_f1, "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
    })
    return summary


def _score(model_path, examples):
    from .model import Featurizer
    from .model.embedding import make_embedder, make_tokenizer
    from .training import load_checkpoint, predict_proba

    model, cfg = load_checkpoint(_require(model_path, "model checkpoint"))
    feat = Featurizer(cfg, make_embedder(cfg), make_tokenizer(cfg))
    return predict_proba(model, feat, examples, cfg.batch_size)


def run_classify(model, candidates, out, threshold: float = 0.5) -> dict:
    rows, examples = [], []
    for lineno, row in enumerate(jsonio.read_jsonl(_require(candidates, "candidates file")), start=1):
        try:
            examples.append(example_from_record(row, "unlabeled"))
            rows.append(row)
        except (KeyError, ValueError) as exc:
            logger.warning("%s:%d: skipped (%s)", candidates, lineno, exc)
    probs = _score(model, examples) if examples else []
    out_rows = []
    for row, p in zip(rows, probs):
        out_rows.append({**row, "score": round(p, 8), "label": int(p > threshold)})
    jsonio.write_jsonl(out, out_rows)
    return {"candidates": len(rows), "accepted": sum(r["label"] for r in out_rows)}


def run_evaluate(model, test, regular, report) -> dict:
    from .evaluation import compute_metrics, per_page_recall, to_predictions

    if test is None and regular is None:
        raise UserError("evaluate needs --test and/or --regular")
    out: dict = {}
    if test is not None:
        examples = _load_pool(test, "test file")
        if any(e.label is None for e in examples):
            raise UserError("test file rows must carry labels")
        if not examples:
            raise UserError("test file holds no usable examples")
        preds = to_predictions(_score(model, examples))
        out = compute_metrics(preds, [e.label for e in examples], [e.source for e in examples]).to_json()
    if regular is not None:
        examples = _load_regular(regular)
        preds = to_predictions(_score(model, examples))
        pages = defaultdict(list)
        for e, p in zip(examples, preds):
            pages[e.page_id].append((p, e.label))
        pr = per_page_recall(pages)
        out["regular"] = {
            "per_page": [{"page_id": pid, "recall": r} for pid, r in pr.per_page],
            "avg_recall": pr.avg_recall,
            "recall_std": pr.recall_std,
            "pooled_recall": pr.pooled_recall,
            "excluded_pages": pr.excluded,
        }
    jsonio.write_json(report, out)
    return {k: out.get(k) for k in ("accuracy", "precision", "recall", "f1")} | (
        {"avg_recall": out["regular"]["avg_recall"]} if "regular" in out else {}
    )


def _load_regular(path):
    """Whole-page trajectory lists; rows without a label are positives."""
    examples = []
    for lineno, row in enumerate(jsonio.read_jsonl(_require(path, "regular file")), start=1):
        row = {**row, "label": row.get("label", 1), "source": row.get("source") or "manual"}
        try:
            examples.append(example_from_record(row))
        except (KeyError, ValueError) as exc:
            logger.warning("%s:%d: skipped (%s)", path, lineno, exc)
    if not examples:
        raise UserError("regular file holds no usable examples")
    return examples


def _titles(corpus) -> dict[str, str]:
    if corpus is None:
        return {}
    return {p.page_id: p.title for p in load_corpus(_require(corpus, "corpus"))}


def run_analyze(trajectories, out_graph, *, snapshots=None, verb_map=None, corpus=None,
                geocode=False, geocoder_url=None, geocode_cache=None, records_out=None, summary_out=None) -> dict:
    from .analysis import (
        Geocoder,
        build_interaction_network,
        build_records,
        load_verb_map,
        pagerank,
        parse_year_range,
        snapshot,
        verb_histogram,
    )

    rows = [r for r in jsonio.read_jsonl(_require(trajectories, "trajectories file")) if r.get("label", 1) == 1]
    titles = _titles(corpus)
    for r in rows:
        if "title" in r:
            titles.setdefault(str(r["page_id"]), r["title"])
    vmap = load_verb_map(verb_map)
    try:
        years = parse_year_range(snapshots) if snapshots else []
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    geocoder = Geocoder(geocoder_url, geocode_cache) if geocode else None

    stats: Counter = Counter()
    records = build_records(rows, titles, vmap, geocoder, stats)
    graph = build_interaction_network(records)
    if graph.nodes:
        for node, score in pagerank(graph).items():
            graph.nodes[node]["pagerank"] = round(score, 10)
    data = graph.to_node_link()
    data["snapshots"] = []
    for y in years:
        snap = snapshot(graph, y)
        data["snapshots"].append({"year": y, "nodes": sorted(snap.nodes), "edge_count": len(snap.edges)})
    jsonio.write_json(out_graph, data)
    histogram = verb_histogram(records)
    if records_out:
        jsonio.write_jsonl(records_out, [r.to_json() for r in records])
    if summary_out:
        jsonio.write_json(summary_out, {
            "records": len(records),
            "dropped_vague_time": stats["vague_time"],
            "not_geocoded": stats["not_geocoded"],
            "verb_histogram": [{"type": t, "count": c} for t, c in histogram],
        })
    return {"records": len(records), "dropped": stats["vague_time"], "nodes": len(graph.nodes), "edges": len(graph.edges)}


# ---------------------------------------------------------------- pipeline

PIPELINE_INPUTS = ("corpus", "annotations", "labeled", "regular", "verb_map", "prompts", "unlabeled")


def load_pipeline_config(path) -> dict:
    path = _require(path, "pipeline config")
    cfg = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(cfg, dict):
        raise UserError("pipeline config must be a mapping")
    base = path.parent
    for key in PIPELINE_INPUTS:
        if cfg.get(key):
            cfg[key] = str((base / cfg[key]).resolve())
    for key in ("corpus", "annotations", "labeled"):
        _require(cfg.get(key), f"pipeline input '{key}'")
    for key in PIPELINE_INPUTS:
        if cfg.get(key):
            _require(cfg[key], f"pipeline input '{key}'")
    return cfg


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def run_pipeline(config, out_dir, outputs: Outputs, overrides=None) -> dict:
    cfg = load_pipeline_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f = {name: out / name for name in (
        "sentences.jsonl", "candidates.jsonl", "llm_labeled.jsonl", "model.pt", "train_log.jsonl",
        "classified.jsonl", "report.json", "graph.json", "records.jsonl", "analysis.json",
    )}
    stages: dict = {}

    stages["ingest"] = run_ingest(cfg["corpus"], outputs.add(f["sentences.jsonl"]))
    stages["extract"] = run_extract(f["sentences.jsonl"], cfg["annotations"], outputs.add(f["candidates.jsonl"]))

    labeled = cfg["labeled"]
    if cfg.get("annotate"):
        a = cfg["annotate"]
        stages["annotate"] = run_annotate(
            f["sentences.jsonl"], outputs.add(f["llm_labeled.jsonl"]), endpoint=a.get("endpoint"),
            model=a.get("model", "gpt-4"), prompts=cfg.get("prompts"), concurrency=int(a.get("concurrency", 4)),
        )
        merged = out / "labeled_merged.jsonl"
        rows = list(jsonio.read_jsonl(labeled)) + list(jsonio.read_jsonl(f["llm_labeled.jsonl"]))
        jsonio.write_jsonl(outputs.add(merged), rows)
        labeled = merged

    model_overrides = dict(cfg.get("model") or {})
    model_overrides.update({k: v for k, v in (overrides or {}).items() if v is not None})
    splits_dir = out / "splits"
    for name in ("train", "val", "test"):
        outputs.add(splits_dir / f"{name}.jsonl")
    stages["train"] = run_train(
        None, labeled, cfg.get("unlabeled") or f["candidates.jsonl"], outputs.add(f["model.pt"]),
        log=outputs.add(f["train_log.jsonl"]), splits_dir=splits_dir, overrides=model_overrides,
        grid=cfg.get("grid"),
    )
    stages["classify"] = run_classify(f["model.pt"], f["candidates.jsonl"], outputs.add(f["classified.jsonl"]))
    stages["evaluate"] = run_evaluate(f["model.pt"], splits_dir / "test.jsonl", cfg.get("regular"),
                                      outputs.add(f["report.json"]))
    geo = cfg.get("geocode") or {}
    stages["analyze"] = run_analyze(
        f["classified.jsonl"], outputs.add(f["graph.json"]), snapshots=cfg.get("snapshots"),
        verb_map=cfg.get("verb_map"), corpus=cfg["corpus"], geocode=bool(geo),
        geocoder_url=geo.get("endpoint"), geocode_cache=geo.get("cache"),
        records_out=outputs.add(f["records.jsonl"]), summary_out=outputs.add(f["analysis.json"]),
    )

    produced = sorted(p for p in outputs.paths if p.exists())
    manifest = {
        "files": {str(p.relative_to(out)): sha256(p) for p in produced},
        "stages": stages,
    }
    jsonio.write_json(outputs.add(out / "manifest.json"), manifest)
    return {"files": len(produced) + 1}


# ---------------------------------------------------------------- argparse

def _model_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, dest="max_epochs")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-scl", dest="use_scl", action="store_const", const=False)
    p.add_argument("--no-ssl", dest="use_ssl", action="store_const", const=False)


def _model_overrides(args) -> dict:
    return {k: getattr(args, k) for k in ("seed", "lr", "max_epochs", "batch_size", "use_scl", "use_ssl")}


def _parse_grid(items: Sequence[str] | None) -> dict | None:
    if not items:
        return None
    grid = {}
    for item in items:
        name, _, values = item.partition("=")
        if not values:
            raise UserError(f"bad --grid entry {item!r}; expected name=v1,v2")
        try:
            grid[name] = [float(v) for v in values.split(",")]
        except ValueError as exc:
            raise UserError(f"bad --grid values in {item!r}") from exc
    return grid


def build_parser() -> ArgParser:
    parser = ArgParser(prog="lifetraj", description="Life-trajectory extraction toolkit.")
    parser.add_argument("--log-file", help="append structured JSONL logs here")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    p = sub.add_parser("ingest", help="segment a corpus into sentences")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--annotations", help="keep only sentences with both a time and a location entity")

    p = sub.add_parser("extract", help="extract candidate triplets")
    p.add_argument("--sentences", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("annotate", help="label positives with a chat-completion LLM")
    p.add_argument("--sentences", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint", help="chat-completion URL (default: $LIFETRAJ_LLM_ENDPOINT)")
    p.add_argument("--model", default="gpt-4")
    p.add_argument("--prompts", help="prompt template YAML")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--retries", type=int, default=3)

    p = sub.add_parser("train", help="train the triplet classifier")
    p.add_argument("--config")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log JSONL (default: <out>.log.jsonl)")
    p.add_argument("--splits-dir", help="write the train/val/test splits here")
    p.add_argument("--grid", nargs="+", metavar="NAME=V1,V2", help="grid search, e.g. lam=0.1,0.2")
    _model_flags(p)

    p = sub.add_parser("classify", help="score candidate triplets")
    p.add_argument("--model", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("evaluate", help="metrics on a labeled test set and per-page recall")
    p.add_argument("--model", required=True)
    p.add_argument("--test")
    p.add_argument("--regular")
    p.add_argument("--report", required=True)

    p = sub.add_parser("analyze", help="trajectory records, interaction network and verb histogram")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--out-graph", required=True)
    p.add_argument("--snapshots", help="START:END[:STEP] years, end inclusive")
    p.add_argument("--verb-map")
    p.add_argument("--corpus", help="corpus JSONL, for page titles")
    p.add_argument("--geocode", action="store_true", help="geocode locations")
    p.add_argument("--geocoder-url", help="search endpoint (default: $LIFETRAJ_GEOCODER_URL or Nominatim)")
    p.add_argument("--geocode-cache")
    p.add_argument("--records-out")
    p.add_argument("--summary-out")

    p = sub.add_parser("pipeline", help="run every stage from a pipeline config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    _model_flags(p)
    return parser


def _dispatch(args, outputs: Outputs) -> dict:
    cmd = args.command
    if cmd == "ingest":
        return run_ingest(args.corpus, outputs.add(args.out), args.annotations)
    if cmd == "extract":
        return run_extract(args.sentences, args.annotations, outputs.add(args.out))
    if cmd == "annotate":
        return run_annotate(args.sentences, outputs.add(args.out), args.endpoint, args.model,
                            args.prompts, args.concurrency, args.retries)
    if cmd == "train":
        log = outputs.add(args.log or str(args.out) + ".log.jsonl")
        if args.splits_dir:
            for name in ("train", "val", "test"):
                outputs.add(Path(args.splits_dir) / f"{name}.jsonl")
        return run_train(args.config, args.labeled, args.unlabeled, outputs.add(args.out), log=log,
                         splits_dir=args.splits_dir, overrides=_model_overrides(args), grid=_parse_grid(args.grid))
    if cmd == "classify":
        return run_classify(args.model, args.candidates, outputs.add(args.out), args.threshold)
    if cmd == "evaluate":
        return run_evaluate(args.model, args.test, args.regular, outputs.add(args.report))
    if cmd == "analyze":
        for extra in (args.records_out, args.summary_out):
            if extra:
                outputs.add(extra)
        return run_analyze(args.trajectories, outputs.add(args.out_graph), snapshots=args.snapshots,
                           verb_map=args.verb_map, corpus=args.corpus, geocode=args.geocode,
                           geocoder_url=args.geocoder_url, geocode_cache=args.geocode_cache,
                           records_out=args.records_out, summary_out=args.summary_out)
    if cmd == "pipeline":
        return run_pipeline(args.config, args.out_dir, outputs, _model_overrides(args))
    raise UserError(f"unknown command {cmd}")


def _setup_logging(args):
    root = logging.getLogger()
    root.setLevel(logging.INFO if args.verbose else logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    handlers = [handler]
    if args.log_file:
        fh = logging.FileHandler(args.log_file, encoding="utf-8")
        fh.setFormatter(JsonLogFormatter())
        fh.setLevel(logging.INFO)
        root.addHandler(fh)
        root.setLevel(logging.INFO)
        handler.setLevel(logging.INFO if args.verbose else logging.WARNING)
        handlers.append(fh)
    return handlers


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as exc:
        say(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    handlers = _setup_logging(args)
    outputs = Outputs()
    try:
        summary = _dispatch(args, outputs)
    except (UserError, FileNotFoundError, ValueError) as exc:
        outputs.discard()
        say(f"error: {exc}")
        return 1
    except Exception as exc:
        outputs.discard()
        logger.exception("internal error")
        say(f"internal error: {type(exc).__name__}: {exc}")
        return 2
    finally:
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()
    say(f"{args.command}: " + ", ".join(f"{k}={_fmt(v)}" for k, v in summary.items() if not isinstance(v, (list, dict))))
    return 0


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


if __name__ == "__main__":
    sys.exit(main())
