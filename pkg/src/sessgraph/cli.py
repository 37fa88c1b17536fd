"""Command-line pipeline driver.

Each command reads the artifacts of earlier stages from the output directory,
writes its own artifact plus a manifest (input hashes, config hash, seed,
versions), and echoes the resolved config. Stages:

    preprocess   raw log -> split corpora + catalog + encoded features
    build-graph  train corpus -> co-occurrence graph (text + binary)
    train-embed  graph -> item embeddings (text + binary) + encoder checkpoint
    eval-knn     recommend over test prefixes, repeated runs, metric report
    train-next   neural next-item training + test metric report
    compare      paired significance test between two configs
    grid         parameter lattice ranked by validation MRR@20

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, bgrl, evalkit, knnrec, nextitem
from .cograph import build_cograph, load_graph_binary, save_graph_binary, save_graph_text
from .config import config_hash, load_config, resolve_config, set_by_path
from .diffcore import save_tensors
from .errors import ConfigError, DataError, NumericError
from .sessiondata import (
    CorpusSplit,
    DelimitedFormat,
    FeatureSchema,
    ItemCatalog,
    Session,
    SessionCorpus,
    collect_feature_rows,
    corpus_prefixes,
    encode_features,
    filter_corpus,
    load_interactions,
    restrict_split_to_train,
    sessionize,
    temporal_split,
)

SESSIONS_FILES = {"train": "train.sessions", "validation": "validation.sessions",
                  "test": "test.sessions"}
CATALOG_IDS = "catalog.ids"
CATALOG_FEATURES = "catalog.features"
GRAPH_TEXT = "graph.txt"
GRAPH_BINARY = "graph.bin"
EMBED_TEXT = "embeddings.txt"
EMBED_BINARY = "embeddings.bin"
ENCODER_CKPT = "encoder.ntc"
RESOLVED_CONFIG = "resolved_config.json"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, stage: str, cfg: dict, seed: int,
                    inputs: list[Path], outputs: list[Path], params: dict):
    manifest = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "inputs": {p.name: _sha256(p) for p in inputs},
        "outputs": {p.name: _sha256(p) for p in outputs},
        "params": params,
        "versions": {"sessgraph": __version__, "numpy": np.__version__,
                     "python": ".".join(map(str, sys.version_info[:3]))},
    }
    path = out / f"manifest_{stage}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _echo_config(out: Path, cfg: dict):
    (out / RESOLVED_CONFIG).write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing upstream artifact: {path}")
    return path


def _schema_from_config(cfg: dict) -> FeatureSchema:
    return FeatureSchema(tuple((f["name"], f["kind"]) for f in cfg["dataset"]["features"]))


# ---------------------------------------------------------------------------
# artifact I/O
# ---------------------------------------------------------------------------

def save_corpus(path: Path, corpus: SessionCorpus):
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus.sessions:
            if any(ch.isspace() for ch in s.session_id):
                raise DataError(f"session id {s.session_id!r} contains whitespace")
            items = " ".join(str(i) for i in s.items)
            fh.write(f"{s.session_id} {items} {s.start_ts}\n")


def load_corpus(path: Path) -> SessionCorpus:
    sessions = []
    for line in _require(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path}: malformed corpus line {line!r}")
        sessions.append(Session(parts[0], tuple(int(x) for x in parts[1:-1]),
                                int(parts[-1])))
    return SessionCorpus(sessions)


def save_catalog(out: Path, catalog: ItemCatalog, X: np.ndarray):
    with open(out / CATALOG_IDS, "w", encoding="utf-8") as fh:
        for i, ext in enumerate(catalog.external_ids):
            fh.write(f"{i} {ext}\n")
    with open(out / CATALOG_FEATURES, "w", encoding="utf-8") as fh:
        for row in X:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_catalog(out: Path) -> tuple[ItemCatalog, np.ndarray]:
    ids = []
    for line in _require(out / CATALOG_IDS).read_text(encoding="utf-8").splitlines():
        idx, ext = line.split(maxsplit=1)
        ids.append(ext)
    rows = [
        [float(v) for v in line.split()]
        for line in _require(out / CATALOG_FEATURES).read_text(encoding="utf-8").splitlines()
    ]
    X = np.array(rows) if rows else np.zeros((len(ids), 0))
    return ItemCatalog(ids, {e: i for i, e in enumerate(ids)}), X


def load_split(out: Path) -> CorpusSplit:
    return CorpusSplit(
        train=load_corpus(out / SESSIONS_FILES["train"]),
        validation=load_corpus(out / SESSIONS_FILES["validation"]),
        test=load_corpus(out / SESSIONS_FILES["test"]),
        fractions=(0.8, 0.1, 0.1),
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_preprocess(cfg: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    ds = cfg["dataset"]
    source = _require(Path(ds["path"]))
    schema = _schema_from_config(cfg)
    with open(source, "rb") as fh:
        interactions = load_interactions(fh, schema, DelimitedFormat(ds["delimiter"]))
    raw = sessionize(interactions, ds["session_gap_seconds"])
    pp = cfg["preprocess"]
    corpus, catalog0 = filter_corpus(raw, pp["min_item_support"], pp["min_session_len"])
    split0 = temporal_split(corpus, tuple(pp["fractions"]))
    split, catalog = restrict_split_to_train(split0, catalog0)
    rows = collect_feature_rows(interactions)
    X, _ = encode_features({e: rows[e] for e in catalog.external_ids}, schema, catalog)

    outputs = []
    for name, corpus_part in (("train", split.train), ("validation", split.validation),
                              ("test", split.test)):
        path = out / SESSIONS_FILES[name]
        save_corpus(path, corpus_part)
        outputs.append(path)
    save_catalog(out, catalog, X)
    outputs += [out / CATALOG_IDS, out / CATALOG_FEATURES]
    _echo_config(out, cfg)
    params = {
        "min_item_support": pp["min_item_support"],
        "min_session_len": pp["min_session_len"],
        "max_prefix_len": pp["max_prefix_len"],
        "fractions": pp["fractions"],
        "assigned_counts": list(split.assigned_counts),
        "retained_counts": [len(split.train), len(split.validation), len(split.test)],
        "catalog_size": len(catalog),
        "feature_width": int(X.shape[1]),
    }
    _write_manifest(out, "preprocess", cfg, cfg["eval"]["master_seed"],
                    [source], outputs, params)
    return params


def run_build_graph(cfg: dict, out: Path) -> dict:
    train = load_corpus(out / SESSIONS_FILES["train"])
    catalog, X = load_catalog(out)
    graph = build_cograph(train, catalog, X)
    save_graph_text(graph, out / GRAPH_TEXT)
    save_graph_binary(graph, out / GRAPH_BINARY)
    _echo_config(out, cfg)
    params = {"nodes": graph.n, "edges": graph.num_edges, "c_max": graph.c_max}
    _write_manifest(out, "build-graph", cfg, cfg["eval"]["master_seed"],
                    [out / SESSIONS_FILES["train"], out / CATALOG_IDS],
                    [out / GRAPH_TEXT, out / GRAPH_BINARY], params)
    return params


def _train_config_from(cfg: dict, seed: int) -> bgrl.TrainConfig:
    em = cfg["embed"]
    return bgrl.TrainConfig(
        epochs=em["epochs"], batch_size=em["batch_size"],
        fanouts=tuple(em["fanouts"]) if em["fanouts"] else None,
        lr=em["lr"], weight_decay=em["weight_decay"], ema_decay=em["ema_decay"],
        d_hidden=em["hidden_dim"], d_out=em["dim"], heads=em["heads"],
        augmentation=bgrl.AugmentationConfig(
            bgrl.ViewConfig(em["view1"]["feature_mask_prob"], em["view1"]["edge_drop_prob"]),
            bgrl.ViewConfig(em["view2"]["feature_mask_prob"], em["view2"]["edge_drop_prob"]),
        ),
        seed=seed,
    )


def run_train_embed(cfg: dict, out: Path, seed: int | None = None) -> dict:
    seed = cfg["eval"]["master_seed"] if seed is None else seed
    graph = load_graph_binary(_require(out / GRAPH_BINARY))
    catalog, X = load_catalog(out)
    graph.X = X
    result = bgrl.train_embeddings(graph, _train_config_from(cfg, seed))
    bgrl.save_embeddings_text(out / EMBED_TEXT, result.embeddings, catalog)
    bgrl.save_embeddings_binary(out / EMBED_BINARY, result.embeddings, catalog)
    save_tensors(out / ENCODER_CKPT, result.encoder.state_dict())
    _echo_config(out, cfg)
    params = {"dim": cfg["embed"]["dim"], "epochs": cfg["embed"]["epochs"],
              "final_loss": result.epoch_losses[-1]}
    _write_manifest(out, "train-embed", cfg, seed,
                    [out / GRAPH_BINARY, out / CATALOG_FEATURES],
                    [out / EMBED_TEXT, out / EMBED_BINARY, out / ENCODER_CKPT], params)
    return params


def _knn_config_from(cfg: dict) -> knnrec.KnnConfig:
    kn = cfg["knn"]
    gc = kn["gcnext"]
    return knnrec.KnnConfig(
        k=kn["k"], m_sample=kn["m_sample"], base_mode=kn["base_mode"],
        k_rec=kn["k_rec"], exclude_input_items=kn["exclude_input_items"],
        gcnext=knnrec.GcnextConfig(gc["enabled"], gc["distance_threshold"],
                                   gc["session_scoring"], gc["expand_pool"]),
    )


def _knn_query_metrics(cfg: dict, split: CorpusSplit, embeddings, corpus_name: str):
    corpus = getattr(split, corpus_name)
    knn_cfg = _knn_config_from(cfg)
    index = knnrec.index_sessions(split.train)
    prefixes = corpus_prefixes(corpus, cfg["preprocess"]["max_prefix_len"])
    if not prefixes:
        raise DataError(f"no {corpus_name} prefixes to evaluate")
    ranked = [knnrec.recommend(p.prefix, index, knn_cfg, embeddings) for p in prefixes]
    targets = [p.target for p in prefixes]
    return evalkit.query_metrics(ranked, targets, tuple(cfg["eval"]["k_values"]))


def _load_embeddings_if_needed(cfg: dict, out: Path):
    if not cfg["knn"]["gcnext"]["enabled"]:
        return None
    emb, _ = bgrl.load_embeddings_binary(_require(out / EMBED_BINARY))
    return emb


def run_eval_knn(cfg: dict, out: Path) -> evalkit.MetricReport:
    split = load_split(out)
    embeddings = _load_embeddings_if_needed(cfg, out)

    def pipeline(seed):
        return _knn_query_metrics(cfg, split, embeddings, "test")

    report = evalkit.run_experiment(pipeline, cfg["eval"]["repeats"],
                                    cfg["eval"]["master_seed"])
    _write_report(out, "eval-knn", cfg, report)
    return report


def _nextitem_query_metrics(cfg: dict, split: CorpusSplit, embeddings, seed: int,
                            m: int, eval_corpus: str = "test"):
    cap = cfg["preprocess"]["max_prefix_len"]
    train_prefixes = corpus_prefixes(split.train, cap)
    val_prefixes = corpus_prefixes(split.validation, cap)
    eval_prefixes = corpus_prefixes(getattr(split, eval_corpus), cap)
    if not train_prefixes or not eval_prefixes:
        raise DataError("not enough prefixes to train and evaluate")
    ni = cfg["nextitem"]
    d = cfg["embed"]["dim"]
    if ni["init_mode"] == "pretrained":
        if embeddings is None:
            raise DataError("pretrained init requires a trained embedding artifact")
        table = nextitem.init_table(nextitem.PRETRAINED, m, embeddings.shape[1],
                                    source=embeddings)
    else:
        table = nextitem.init_table(nextitem.SCALED_UNIFORM, m, d,
                                    rng=np.random.default_rng(seed))
    model = nextitem.NextItemModel(table)
    result = nextitem.train_next(
        model, train_prefixes, val_prefixes,
        nextitem.NextTrainConfig(epochs=ni["epochs"], lr=ni["lr"],
                                 batch_size=ni["batch_size"], seed=seed))
    ks = tuple(cfg["eval"]["k_values"])
    names = evalkit.standard_metric_names(ks)
    out = {name: np.zeros(len(eval_prefixes)) for name in names}
    for i, p in enumerate(eval_prefixes):
        rank = model.target_rank(p.prefix, p.target)
        for k in ks:
            out[f"HR@{k}"][i] = 1.0 if rank <= k else 0.0
            out[f"MRR@{k}"][i] = 1.0 / rank if rank <= k else 0.0
    return out, result


def run_train_next(cfg: dict, out: Path) -> evalkit.MetricReport:
    split = load_split(out)
    catalog, _ = load_catalog(out)
    embeddings = None
    if cfg["nextitem"]["init_mode"] == "pretrained":
        embeddings, _ = bgrl.load_embeddings_binary(_require(out / EMBED_BINARY))
    logs: list[str] = []

    def pipeline(seed):
        metrics, result = _nextitem_query_metrics(cfg, split, embeddings, seed,
                                                  m=len(catalog))
        logs.extend(f"seed={seed}\t{rec.as_line()}" for rec in result.records)
        return metrics

    report = evalkit.run_experiment(pipeline, cfg["eval"]["repeats"],
                                    cfg["eval"]["master_seed"])
    (out / "training_log.tsv").write_text(
        "seed\tepoch\ttrain_loss\tval_hr10\tval_mrr10\twall_s\n"
        + "".join(line + "\n" for line in logs), encoding="utf-8")
    _write_report(out, "train-next", cfg, report)
    return report


def _write_report(out: Path, stage: str, cfg: dict, report: evalkit.MetricReport,
                  tests: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    text_lines = [f"{stage} results ({len(next(iter(report.runs.values())))} runs)"]
    text_lines += report.table_lines()
    structured = ["metric\trun\tvalue"]
    for name in report.metric_names():
        for i, v in enumerate(report.runs[name]):
            structured.append(f"{name}\t{i}\t{v:.10f}")
        structured.append(f"{name}\tmean\t{report.mean(name):.10f}")
    if tests:
        text_lines.append("")
        text_lines.append("paired t-test")
        structured.append("metric\tt\tp\tsignificant\tdegenerate")
        for name, r in tests.items():
            if r.degenerate:
                text_lines.append(f"  {name}: degenerate (zero-variance differences)")
                structured.append(f"{name}\tNA\tNA\tFalse\tTrue")
            else:
                text_lines.append(f"  {name}: t={r.t:.4f} df={r.df} p={r.p:.6f}"
                                  f" significant={r.significant}")
                structured.append(f"{name}\t{r.t:.10f}\t{r.p:.10f}\t{r.significant}\tFalse")
    report_txt = out / f"report_{stage}.txt"
    report_tsv = out / f"report_{stage}.tsv"
    report_txt.write_text("\n".join(text_lines) + "\n", encoding="utf-8")
    report_tsv.write_text("\n".join(structured) + "\n", encoding="utf-8")
    _echo_config(out, cfg)
    _write_manifest(out, stage, cfg, cfg["eval"]["master_seed"], [],
                    [report_txt, report_tsv],
                    {"repeats": cfg["eval"]["repeats"], "k_values": cfg["eval"]["k_values"]})


def run_compare(cfg_a: dict, cfg_b: dict, out_a: Path, out_b: Path, out: Path,
                pair_by: str = "queries") -> dict:
    def run_one(cfg, art_out):
        split = load_split(art_out)
        if cfg["task"] == "knn":
            embeddings = _load_embeddings_if_needed(cfg, art_out)

            def pipeline(seed):
                return _knn_query_metrics(cfg, split, embeddings, "test")
        else:
            catalog, _ = load_catalog(art_out)
            embeddings = None
            if cfg["nextitem"]["init_mode"] == "pretrained":
                embeddings, _ = bgrl.load_embeddings_binary(_require(art_out / EMBED_BINARY))

            def pipeline(seed):
                metrics, _ = _nextitem_query_metrics(cfg, split, embeddings, seed,
                                                     m=len(catalog))
                return metrics

        return evalkit.run_experiment(pipeline, cfg["eval"]["repeats"],
                                      cfg["eval"]["master_seed"])

    report_a = run_one(cfg_a, out_a)
    report_b = run_one(cfg_b, out_b)
    tests = evalkit.compare_reports(report_a, report_b, pair_by=pair_by)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, "compare", cfg_a, report_a, tests=tests)
    return tests


def _grid_points(cfg: dict) -> list[dict]:
    params = cfg["grid"]["parameters"]
    if not params:
        raise ConfigError("grid.parameters is empty")
    names = sorted(params)
    points: list[dict] = [{}]
    for name in names:
        values = params[name]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.parameters.{name}: need a non-empty value list")
        points = [dict(p, **{name: v}) for p in points for v in values]
    if len(points) > cfg["grid"]["max_points"]:
        raise ConfigError(f"grid has {len(points)} points, above max_points "
                          f"{cfg['grid']['max_points']}")
    return points


def _eval_grid_point(args):
    cfg, out_str, assignment = args
    out = Path(out_str)
    cfg = json.loads(json.dumps(cfg))
    for dotted, value in assignment.items():
        set_by_path(cfg, dotted, value)
    cfg = resolve_config(cfg)
    split = load_split(out)
    if cfg["task"] == "knn":
        embeddings = _load_embeddings_if_needed(cfg, out)
        metrics = _knn_query_metrics(cfg, split, embeddings, "validation")
    else:
        catalog, _ = load_catalog(out)
        embeddings = None
        if cfg["nextitem"]["init_mode"] == "pretrained":
            embeddings, _ = bgrl.load_embeddings_binary(_require(out / EMBED_BINARY))
        metrics, _ = _nextitem_query_metrics(cfg, split, embeddings,
                                             cfg["eval"]["master_seed"],
                                             m=len(catalog), eval_corpus="validation")
    objective = cfg["grid"]["objective"]
    if objective not in metrics:
        raise ConfigError(f"grid objective {objective!r} is not a computed metric")
    return assignment, float(np.mean(metrics[objective]))


def run_grid(cfg: dict, out: Path, workers: int = 1) -> list[tuple[dict, float]]:
    points = _grid_points(cfg)
    tasks = [(cfg, str(out), assignment) for assignment in points]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_grid_point, tasks))
    else:
        results = [_eval_grid_point(t) for t in tasks]
    results.sort(key=lambda r: (-r[1], json.dumps(r[0], sort_keys=True)))
    lines = ["rank\tobjective\tassignment"]
    for rank, (assignment, value) in enumerate(results, start=1):
        lines.append(f"{rank}\t{value:.10f}\t{json.dumps(assignment, sort_keys=True)}")
    (out / "grid_summary.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _echo_config(out, cfg)
    _write_manifest(out, "grid", cfg, cfg["eval"]["master_seed"], [],
                    [out / "grid_summary.tsv"],
                    {"points": len(points), "objective": cfg["grid"]["objective"]})
    return results


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sessgraph",
                                     description="session co-occurrence graph toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("preprocess", "build-graph", "train-embed", "eval-knn",
                 "train-next", "compare", "grid"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--format", choices=("text", "structured"), default="text")
        if name == "compare":
            p.add_argument("--config-b", required=True, help="second config to compare against")
            p.add_argument("--out-b", default=None,
                           help="artifact directory of the second config (defaults to --out)")
            p.add_argument("--pair-by", choices=("queries", "runs"), default="queries")
    return parser


def _print_report(report: evalkit.MetricReport, fmt: str):
    if fmt == "structured":
        for name in report.metric_names():
            for i, v in enumerate(report.runs[name]):
                print(f"{name}\t{i}\t{v:.10f}")
            print(f"{name}\tmean\t{report.mean(name):.10f}")
    else:
        for line in report.table_lines():
            print(line)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["eval"]["master_seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "preprocess":
            params = run_preprocess(cfg, out)
            print(json.dumps(params, sort_keys=True))
        elif args.command == "build-graph":
            params = run_build_graph(cfg, out)
            print(json.dumps(params, sort_keys=True))
        elif args.command == "train-embed":
            params = run_train_embed(cfg, out, seed=args.seed)
            print(json.dumps(params, sort_keys=True))
        elif args.command == "eval-knn":
            report = run_eval_knn(cfg, out)
            _print_report(report, args.format)
        elif args.command == "train-next":
            report = run_train_next(cfg, out)
            _print_report(report, args.format)
        elif args.command == "compare":
            cfg_b = load_config(args.config_b)
            out_b = Path(args.out_b) if args.out_b else out
            tests = run_compare(cfg, cfg_b, out, out_b, out, pair_by=args.pair_by)
            for name, r in sorted(tests.items()):
                if r.degenerate:
                    print(f"{name}\tdegenerate")
                else:
                    print(f"{name}\tt={r.t:.4f}\tp={r.p:.6f}\tsignificant={r.significant}")
        elif args.command == "grid":
            results = run_grid(cfg, out, workers=args.workers)
            for rank, (assignment, value) in enumerate(results, start=1):
                print(f"{rank}\t{value:.6f}\t{json.dumps(assignment, sort_keys=True)}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
