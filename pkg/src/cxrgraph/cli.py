"""Command-line entry point: ``cxrgraph <command> ...``.

Every command writes into ``--out`` (a directory) through a staging
directory that is removed if the command fails, and finishes by writing
``manifest.json``.

Exit codes: 0 success, 1 unreadable or malformed input, 2 invalid rule,
knowledge-graph or config file, 3 failure while running (e.g. divergence).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager, nullcontext
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import yaml

from .corpus import build_cooccurrence, build_distribution
from .estimator import DivergenceError, MultiRelationGraphClassifier
from .explainer import THETA_EDGE, THETA_NODE, attribute, render_overlay, top_diseases_per_node
from .graph_builder import (
    DEFAULT_TAU,
    RELATIONS,
    KnowledgeGraphError,
    build_graph,
    build_semantic_phase1,
    load_knowledge_graph,
)
from .io import load_dataset, load_labels, read_jsonl, write_jsonl
from .label_extractor import extract_labels
from .pipeline import (
    SPLITS,
    fusion_cells,
    prepare_splits,
    sweep_fusion,
    sweep_tau,
    train_two_phase,
    write_csv,
)
from .rules import DISEASES, RuleFileError, load_rules
from .synth import SynthConfig, write_synthetic_dataset

log = logging.getLogger("cxrgraph")

EXIT_INPUT = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
DEFAULT_TAUS = (0.2, 0.3, 0.4, 0.5, 0.6)
MODEL_FILE = "model.mrgc"
SEMANTIC_FILE = "semantic.json"


class InputError(Exception):
    pass


class ConfigError(Exception):
    pass


def _tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@contextmanager
def staged_output(out: Path):
    """Yield a staging directory inside ``out``; move its files into ``out`` on
    success, delete it on failure."""
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        yield stage
        for item in sorted(stage.iterdir()):
            os.replace(item, out / item.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _write_manifest(stage: Path, args, inputs: dict, outputs: list[str], rules_checksum: str | None, extra=None):
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "seed": getattr(args, "seed", None),
        "threads": args.threads,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "config": {k: str(getattr(args, k)) for k in ("rules", "kg", "config") if getattr(args, k, None)},
        "outputs": sorted(outputs),
        "tool_version": _tool_version(),
        "rules_checksum": rules_checksum,
    }
    if extra:
        manifest.update(extra)
    (stage / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _load_rules(args):
    try:
        return load_rules(args.rules)
    except RuleFileError as exc:
        raise ConfigError(f"invalid rule file: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read rule file: {exc}") from None


def _load_kg(args):
    try:
        return load_knowledge_graph(args.kg)
    except (KnowledgeGraphError, yaml.YAMLError) as exc:
        raise ConfigError(f"invalid knowledge graph: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read knowledge graph: {exc}") from None


def _dataset_checksum(path) -> str | None:
    """Rule checksum recorded by the command that labelled the dataset."""
    try:
        return json.loads((Path(path) / "manifest.json").read_text()).get("rules_checksum")
    except (OSError, ValueError):
        return None


def _load_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load dataset {path}: {exc}") from None


def _model_params(args) -> dict:
    params = {}
    if getattr(args, "config", None):
        try:
            params = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(params, dict):
            raise ConfigError("config must be a mapping of estimator parameters")
    params.update(alpha=args.alpha, beta=args.beta, loss=args.loss, random_state=args.seed)
    if getattr(args, "epochs", None) is not None:
        params["epochs"] = args.epochs
    valid = MultiRelationGraphClassifier().get_params()
    unknown = sorted(set(params) - set(valid))
    if unknown:
        raise ConfigError(f"unknown estimator parameters: {unknown}")
    try:
        model = MultiRelationGraphClassifier(**params)
        model._validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return params


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> None:
    cfg = SynthConfig(n_studies=args.n_studies, d_in=args.d_in, seed=args.seed)
    rules = _load_rules(args)
    with staged_output(args.out) as stage:
        write_synthetic_dataset(stage, cfg, rules)
        outputs = [p.name for p in stage.iterdir()]
        _write_manifest(stage, args, {}, outputs, rules.checksum, {"synth": asdict(cfg)})
    print(f"wrote {cfg.n_studies} studies to {args.out}")


def cmd_label(args) -> None:
    rules = _load_rules(args)
    try:
        if args.reports.is_dir():
            # one report per .txt file, named by study id
            files = sorted(args.reports.glob("*.txt"))
            reports = [(f.stem, f.read_text(encoding="utf-8")) for f in files]
        else:
            reports = [(str(r["study_id"]), r["text"]) for r in read_jsonl(args.reports)]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read reports {args.reports}: {exc}") from None
    with staged_output(args.out) as stage:
        vecs = [extract_labels(text, sid, rules) for sid, text in reports]
        n = write_jsonl(stage / "labels.jsonl", (v.to_record() for v in vecs))
        _write_manifest(stage, args, {"reports": args.reports}, ["labels.jsonl"], rules.checksum)
    print(f"labelled {n} reports")


def cmd_stats(args) -> None:
    try:
        vecs = load_labels(args.labels)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read labels {args.labels}: {exc}") from None
    if not 0.0 < args.t_pos <= 1.0:
        raise ConfigError("--t-pos must lie in (0, 1]")
    with staged_output(args.out) as stage:
        build_distribution(vecs).to_csv(stage / "distribution.csv")
        build_cooccurrence(vecs, args.t_pos).to_csv(stage / "cooccurrence.csv")
        _write_manifest(
            stage, args, {"labels": args.labels}, ["distribution.csv", "cooccurrence.csv"], None, {"t_pos": args.t_pos}
        )
    print(f"summarised {len(vecs)} studies")


def cmd_graph(args) -> None:
    kg = _load_kg(args)
    ds = _load_dataset(args.dataset)
    semantic = build_semantic_phase1(kg)

    def records():
        for sid in ds.study_ids:
            g = build_graph(ds.regions[sid], args.tau, semantic, study_id=sid)
            rec = {"study_id": sid, "nodes": g.names}
            for r in RELATIONS:
                a = g.adjacency(r)
                rec[r] = [[int(i), int(j), float(a[i, j])] for i, j in zip(*np.nonzero(a))]
            yield rec

    with staged_output(args.out) as stage:
        n = write_jsonl(stage / "graphs.jsonl", records())
        checksum = _dataset_checksum(args.dataset)
        _write_manifest(stage, args, {"dataset": args.dataset}, ["graphs.jsonl"], checksum, {"tau": args.tau})
    print(f"built {n} graphs")


def cmd_train(args) -> None:
    params = _model_params(args)
    kg = _load_kg(args)
    ds = _load_dataset(args.dataset)
    model = MultiRelationGraphClassifier(**params)
    with staged_output(args.out) as stage:
        result = train_two_phase(ds, kg, model, args.tau, bootstrap=not args.no_bootstrap)
        result.model.save(stage / MODEL_FILE)
        write_csv(stage / "metrics.csv", result.model.history_)
        if result.phase1 is not None:
            write_csv(stage / "metrics_phase1.csv", result.phase1.history_)
        (stage / SEMANTIC_FILE).write_text(json.dumps({"tau": args.tau, "semantic": result.semantic.tolist()}) + "\n")
        test = result.metrics("test")
        summary = {
            "mean_auc": test["mean_auc"],
            "top5": test["top5"],
            "top10": test["top10"],
            "per_class_auc": dict(zip(DISEASES, map(float, test["per_class_auc"]))),
            "best_epoch": result.model.best_epoch_,
        }
        (stage / "test_metrics.json").write_text(json.dumps(summary, indent=1) + "\n")
        outputs = [p.name for p in stage.iterdir()]
        extra = {"params": params, "tau": args.tau}
        _write_manifest(stage, args, {"dataset": args.dataset}, outputs, _dataset_checksum(args.dataset), extra)
    print(f"test mean AUC {summary['mean_auc']:.4f}  top5 {summary['top5']:.4f}  top10 {summary['top10']:.4f}")


def _load_model(model_dir: Path):
    try:
        model = MultiRelationGraphClassifier.load(model_dir / MODEL_FILE)
        meta = json.loads((model_dir / SEMANTIC_FILE).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot load model from {model_dir}: {exc}") from None
    return model, np.asarray(meta["semantic"], dtype=float), float(meta["tau"])


def cmd_eval(args) -> None:
    model, semantic, tau = _load_model(args.model)
    ds = _load_dataset(args.dataset)
    ids = ds.part(args.split)
    X = ds.graphs(ids, tau, semantic)
    res = model.evaluate(X, ds.label_rows(ids))
    summary = {
        "split": args.split,
        "n_studies": len(ids),
        "mean_auc": res["mean_auc"],
        "top5": res["top5"],
        "top10": res["top10"],
        "per_class_auc": dict(zip(DISEASES, map(float, res["per_class_auc"]))),
    }
    with staged_output(args.out) as stage:
        (stage / "eval.json").write_text(json.dumps(summary, indent=1) + "\n")
        inputs = {"dataset": args.dataset, "model": args.model}
        _write_manifest(stage, args, inputs, ["eval.json"], _dataset_checksum(args.dataset))
    print(f"{args.split} mean AUC {res['mean_auc']:.4f}  top5 {res['top5']:.4f}  top10 {res['top10']:.4f}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> None:
    params = _model_params(args)
    kg = _load_kg(args)
    ds = _load_dataset(args.dataset)
    base = MultiRelationGraphClassifier(**params)
    semantic = build_semantic_phase1(kg)
    if args.mode == "fusion":
        cells = fusion_cells(args.alphas, args.betas)
        if not cells:
            raise ConfigError("no (alpha, beta) cell satisfies alpha + beta <= 1")
        run = lambda: sweep_fusion(prepare_splits(ds, args.tau, semantic, base.n_slots), cells, base)  # noqa: E731
    else:
        run = lambda: sweep_tau(ds, args.taus, semantic, base)  # noqa: E731
    with staged_output(args.out) as stage:
        rows = run()
        write_csv(stage / "sweep.csv", rows)
        extra = {"params": params, "mode": args.mode}
        _write_manifest(stage, args, {"dataset": args.dataset}, ["sweep.csv"], _dataset_checksum(args.dataset), extra)
    print(f"wrote {len(rows)} sweep rows")


def cmd_explain(args) -> None:
    model, semantic, tau = _load_model(args.model)
    ds = _load_dataset(args.dataset)
    if args.study not in ds.regions:
        raise InputError(f"unknown study {args.study!r}")
    if args.disease not in DISEASES:
        raise ConfigError(f"unknown class {args.disease!r}; expected one of {list(DISEASES)}")
    graph = build_graph(ds.regions[args.study], tau, semantic, study_id=args.study)
    ex = attribute(graph, model, DISEASES.index(args.disease), theta_edge=args.theta_edge)
    if args.top_diseases:
        ex.top_diseases = top_diseases_per_node(graph, model)
    with staged_output(args.out) as stage:
        (stage / "explanation.json").write_text(ex.dumps() + "\n")
        (stage / "explanation.svg").write_text(render_overlay(graph, ex, args.theta_edge, args.theta_node))
        inputs = {"dataset": args.dataset, "model": args.model}
        outputs = ["explanation.json", "explanation.svg"]
        _write_manifest(stage, args, inputs, outputs, _dataset_checksum(args.dataset))
    print(f"top node for {args.disease}: {graph.names[ex.top1_node]}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cxrgraph", description=__doc__.split("\n")[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads (default: all)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        c = sub.add_parser(name, help=help_)
        c.set_defaults(func=func)
        c.add_argument("--out", type=Path, required=True, help="output directory")
        return c

    def with_rules(c):
        c.add_argument("--rules", type=Path, default=None, help="rule tables (YAML); shipped tables by default")

    def with_model(c, training: bool):
        c.add_argument("--kg", type=Path, default=None, help="knowledge graph (YAML)")
        c.add_argument("--tau", type=float, default=DEFAULT_TAU, help="IoU threshold for spatial edges")
        if training:
            c.add_argument("--alpha", type=float, default=0.3)
            c.add_argument("--beta", type=float, default=0.4)
            c.add_argument("--loss", choices=("hard", "expert"), default="expert")
            c.add_argument("--seed", type=int, default=0)
            c.add_argument("--epochs", type=int, default=None)
            c.add_argument("--config", type=Path, default=None, help="YAML mapping of estimator parameters")

    c = command("synth", cmd_synth, "generate the synthetic dataset")
    with_rules(c)
    c.add_argument("--n-studies", type=int, default=2000)
    c.add_argument("--d-in", type=int, default=16)
    c.add_argument("--seed", type=int, default=0)

    c = command("label", cmd_label, "extract soft labels from reports.jsonl or a directory of .txt reports")
    c.add_argument("reports", type=Path)
    with_rules(c)

    c = command("stats", cmd_stats, "uncertainty distribution and co-occurrence tables")
    c.add_argument("labels", type=Path)
    c.add_argument("--t-pos", type=float, default=1.0, help="positive threshold for co-occurrence")

    c = command("graph", cmd_graph, "build per-study anatomy graphs")
    c.add_argument("dataset", type=Path)
    with_model(c, training=False)

    c = command("train", cmd_train, "train the graph classifier")
    c.add_argument("dataset", type=Path)
    with_model(c, training=True)
    c.add_argument("--no-bootstrap", action="store_true", help="skip the semantic-graph rebuild and retrain")

    c = command("eval", cmd_eval, "evaluate a trained model")
    c.add_argument("dataset", type=Path)
    c.add_argument("--model", type=Path, required=True, help="directory written by 'train'")
    c.add_argument("--split", choices=SPLITS, default="test")

    c = command("sweep", cmd_sweep, "fusion-weight or IoU-threshold sweep")
    c.add_argument("dataset", type=Path)
    c.add_argument("--mode", choices=("fusion", "tau"), required=True)
    with_model(c, training=True)
    c.add_argument("--alphas", type=_floats, default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    c.add_argument("--betas", type=_floats, default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    c.add_argument("--taus", type=_floats, default=list(DEFAULT_TAUS))

    c = command("explain", cmd_explain, "attribution JSON and SVG overlay for one study")
    c.add_argument("dataset", type=Path)
    c.add_argument("--model", type=Path, required=True)
    c.add_argument("--study", required=True)
    c.add_argument("--disease", required=True, help="class name, e.g. Cardiomegaly")
    c.add_argument("--theta-edge", type=float, default=THETA_EDGE)
    c.add_argument("--theta-node", type=float, default=THETA_NODE)
    c.add_argument("--top-diseases", action="store_true", help="also rank top-2 diseases per node")
    return p


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with _thread_limit(args.threads):
            args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
