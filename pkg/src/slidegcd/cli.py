"""Command-line interface: ``slidegcd {train,eval,infer,sweep,export-graph,make-synthetic}``.

Exit codes: 0 success, 1 runtime or training failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig, load_run_config
from .data import (Dataset, PatchBag, export_dataset, generate_synthetic, load_bag_file, load_dataset,
                   load_manifest_bags)
from .errors import ConfigError, SlideGCDError
from .pipeline import SlideGCDModel, evaluate, infer, train
from .slidegraph import build_graph

log = logging.getLogger("slidegcd")

CHECKPOINT_NAME = "checkpoint.sgck"
GRID_ALIASES = {"L": "buffer_size", "t": "kd_temperature", "B": "batch_size"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slidegcd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and evaluate it on the held-out split")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest", help="bags to evaluate (default: the config's test split)")
    p.add_argument("--out")

    p = sub.add_parser("infer", help="predict individual bags")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("bags", nargs="*", help="bag files (.sgcd)")

    p = sub.add_parser("sweep", help="grid over hyper-parameters, one metrics row per cell")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1, help="parallel cells (default 1: sequential)")

    p = sub.add_parser("export-graph", help="write nodes.tsv / edges.tsv for the frozen buffer graph")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="query bags inserted as batch nodes")

    p = sub.add_parser("make-synthetic", help="write the config's synthetic dataset as bag files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    return parser


# ----------------------------------------------------------------------------
# helpers


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg.validate()


def _dataset(cfg: RunConfig) -> Dataset:
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    manifests = {"train": cfg.train_manifest}
    if cfg.val_manifest:
        manifests["val"] = cfg.val_manifest
    if cfg.test_manifest:
        manifests["test"] = cfg.test_manifest
    return load_dataset(manifests, cfg.train.num_classes)


def _held_out(dataset: Dataset) -> tuple[str, list[PatchBag]]:
    for name in ("test", "val", "train"):
        bags = dataset.split(name)
        if bags:
            return name, bags
    raise ConfigError("dataset has no bags")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_log(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _metrics_doc(report, train_cfg: TrainConfig, config_hash: str, split: str) -> dict:
    doc = report.to_json()
    doc["config_hash"] = config_hash
    doc["split"] = split
    doc["strategy"] = train_cfg.strategy
    doc["conv"] = train_cfg.conv
    return doc


def run_training(cfg: RunConfig) -> dict:
    """Train, evaluate and write checkpoint, metrics.json and train_log.jsonl into ``cfg.out_dir``."""
    dataset = _dataset(cfg)
    result = train(cfg.train, dataset)
    split, bags = _held_out(dataset)
    report = evaluate(result.model, bags)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint(), out / CHECKPOINT_NAME)
    _write_log(out / "train_log.jsonl", result.log)
    doc = _metrics_doc(report, cfg.train, cfg.config_hash(), split)
    _write_json(out / "metrics.json", doc)
    return doc


def _model(path) -> SlideGCDModel:
    return SlideGCDModel.from_checkpoint(load_checkpoint(path))


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    doc = run_training(cfg)
    print(f"accuracy={doc['accuracy']:.4f} macro_f1={doc['macro_f1']:.4f} "
          f"macro_auc={doc['macro_auc']} -> {cfg.out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args) if args.config else None
    model = _model(args.checkpoint)
    if args.manifest:
        split, bags = "manifest", load_manifest_bags(args.manifest)
    elif cfg is not None:
        split, bags = _held_out(_dataset(cfg))
    else:
        raise UsageError("eval needs --manifest or --config")
    report = evaluate(model, bags)
    if cfg is not None:
        config_hash = cfg.config_hash()
    else:
        blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
        config_hash = hashlib.sha256(blob).hexdigest()[:16]
    doc = _metrics_doc(report, model.config, config_hash, split)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", doc)
    print(json.dumps({k: doc[k] for k in ("accuracy", "macro_f1", "macro_auc")}, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    model = _model(args.checkpoint)
    bags = load_manifest_bags(args.manifest) if args.manifest else []
    bags += [load_bag_file(p) for p in args.bags]
    if not bags:
        raise UsageError("infer needs --manifest or bag files")
    for bag in bags:
        pred = infer(model, bag)
        probs = ",".join(f"{p:.6f}" for p in pred.probs)
        print(f"{bag.slide_id}\tpredicted={pred.predicted}\tprobs={probs}")
        for nb in pred.neighbors:
            print(f"  neighbor node={nb.node}\tsource={nb.source}\tlabel={nb.label}\tdistance={nb.distance:.6f}")
    return 0


def parse_grid(specs: list[str]) -> dict[str, list]:
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    grid: dict[str, list] = {}
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = GRID_ALIASES.get(key.strip(), key.strip())
        if not sep or not values:
            raise ConfigError(f"grid entry {spec!r} must look like key=v1,v2")
        if key not in types:
            raise ConfigError(f"unknown grid key {key!r}")
        kind = str(types[key])
        parsed = []
        for v in values.split(","):
            v = v.strip()
            try:
                if "int" in kind:
                    parsed.append(int(v))
                elif "float" in kind:
                    parsed.append(float(v))
                elif "bool" in kind:
                    parsed.append(v.lower() in ("1", "true", "yes"))
                else:
                    parsed.append(v)
            except ValueError:
                raise ConfigError(f"grid value {v!r} is not valid for {key}") from None
        if key in grid:
            raise ConfigError(f"grid key {key!r} given twice")
        grid[key] = parsed
    return grid


def cell_seed(base_seed: int, cell: int) -> int:
    return int(np.random.SeedSequence([base_seed, cell]).generate_state(1)[0])


def _run_cell(cfg_dict: dict, out_dir: str) -> dict:
    cfg = RunConfig.from_dict(cfg_dict)
    cfg.out_dir = out_dir
    return run_training(cfg.validate())


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = parse_grid(args.grid)
    keys = list(grid)
    cells = []
    for i, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        d = cfg.to_dict()
        d.update(zip(keys, values))
        d["seed"] = cell_seed(cfg.train.seed, i)
        try:
            RunConfig.from_dict(d).validate()
        except ConfigError as exc:
            raise ConfigError(f"grid cell {dict(zip(keys, values))}: {exc}") from None
        cells.append((i, dict(zip(keys, values)), d))

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(d, str(out / f"cell_{i:03d}")) for i, _, d in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            docs = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        docs = [_run_cell(*job) for job in jobs]

    header = ["cell", "seed", *keys, "accuracy", "macro_f1", "macro_auc", "graph_accuracy", "mil_accuracy"]
    lines = ["\t".join(header)]
    for (i, values, d), doc in zip(cells, docs):
        row = [i, d["seed"], *(values[k] for k in keys), doc["accuracy"], doc["macro_f1"], doc["macro_auc"],
               doc["branches"]["graph"]["accuracy"], doc["branches"]["mil"]["accuracy"]]
        lines.append("\t".join(str(v) for v in row))
        log.info("cell %d %s auc=%s", i, values, doc["macro_auc"])
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def export_graph(model: SlideGCDModel, out_dir, queries: list[PatchBag] | None = None) -> tuple[Path, Path]:
    """Write ``nodes.tsv`` and ``edges.tsv`` for the buffer graph plus optional query nodes."""
    queries = queries or []
    out_dir = Path(out_dir)
    X0 = model.buffer.embeddings()
    labels = list(model.buffer.labels())
    sources = ["buffer"] * len(labels)
    if queries:
        X0 = np.vstack([X0, model.embed(queries).data])
        labels += [q.label for q in queries]
        sources += ["batch"] * len(queries)
    graph = build_graph(X0, model.gnn.proj, model.config.k)
    coords = _plane(graph.P)
    out_dir.mkdir(parents=True, exist_ok=True)
    nodes = out_dir / "nodes.tsv"
    edges = out_dir / "edges.tsv"
    with open(nodes, "w", encoding="utf-8") as fh:
        fh.write("node_id\tsource\tlabel\tx\ty\n")
        for i, (src, y) in enumerate(zip(sources, labels)):
            fh.write(f"{i}\t{src}\t{int(y)}\t{coords[i, 0]:.6f}\t{coords[i, 1]:.6f}\n")
    with open(edges, "w", encoding="utf-8") as fh:
        fh.write("edge_id\tanchor_id\tmembers\n")
        for e, row in enumerate(graph.edges):
            fh.write(f"{e}\t{int(row[0])}\t{','.join(str(int(v)) for v in row)}\n")
    return nodes, edges


def _plane(P: np.ndarray) -> np.ndarray:
    """First two principal coordinates, sign-fixed so the largest loading is positive."""
    centered = P - P.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    vt = vt[:2]
    signs = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    coords = centered @ (vt * signs[:, None]).T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((len(P), 2 - coords.shape[1]))])
    return coords


def cmd_export_graph(args) -> int:
    model = _model(args.checkpoint)
    queries = load_manifest_bags(args.manifest) if args.manifest else []
    nodes, edges = export_graph(model, args.out, queries)
    print(f"wrote {nodes} and {edges}")
    return 0


def cmd_make_synthetic(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.synthetic is None:
        raise ConfigError("config has no 'synthetic' block")
    cfg.synthetic.validate()
    manifests = export_dataset(generate_synthetic(cfg.synthetic), args.out)
    for name, path in manifests.items():
        print(f"{name}\t{path}")
    return 0


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "sweep": cmd_sweep,
    "export-graph": cmd_export_graph, "make-synthetic": cmd_make_synthetic,
}


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"slidegcd: error: {exc}", file=sys.stderr)
        return 2
    except (SlideGCDError, OSError) as exc:
        print(f"slidegcd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
