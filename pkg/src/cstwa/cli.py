"""Command-line entry point: gen-synth, pretrain, mine, train, eval.

Exit codes: 0 success, 1 config error, 2 data or metric error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import build_vocab_columns, encode_raw, gen_synthetic, read_raw, write_synthetic
from .errors import ConfigError, CstwaError, DataError, MetricError
from .features import EmbeddingTable, Vocabulary, read_field_specs, write_field_specs
from .metrics import EvalReport, aggregate_seeds, auc, report_csv, report_table, write_metrics_csv
from .model import ABLATIONS, METRIC_FIELDS, CstwaModel, pretrain_ctr, train
from .nn import make_rng
from .pipeline import Prepared, mine_graphs
from .storage import load_arrays, load_graph, save_arrays, save_graph
from .structure import graph_stats

log = logging.getLogger("cstwa")

OUTPUT_ROOT_ENV = "CSTWA_OUTPUT_ROOT"


def _out_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
    if out.exists() and any(out.iterdir()):
        if not args.overwrite:
            raise ConfigError(f"{out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return RunConfig.load(args.config, overrides)


def _vocab_json(vocab: Vocabulary) -> str:
    return json.dumps(vocab.to_dict(), sort_keys=True, indent=0)


def load_data_dir(data_dir: Path, cfg: RunConfig, need_test: bool = False) -> Prepared:
    """Read ``fields.txt`` and split CSVs; without ``val.csv`` a seeded share of train becomes validation."""
    data_dir = Path(data_dir)
    if not (data_dir / "fields.txt").exists() or not (data_dir / "train.csv").exists():
        raise DataError(f"{data_dir} must contain fields.txt and train.csv")
    schema = read_field_specs(data_dir / "fields.txt")
    raw_train, _ = read_raw(data_dir / "train.csv", schema, cfg["max_errors"])
    if (data_dir / "val.csv").exists():
        raw_val, _ = read_raw(data_dir / "val.csv", schema, cfg["max_errors"])
    else:
        n = len(raw_train)
        perm = make_rng(cfg["seed"], "split").permutation(n)
        n_val = int(round(cfg["val_fraction"] * n))
        pick = lambda idx: type(raw_train)({k: v[idx] for k, v in raw_train.columns.items()},
                                           raw_train.click[idx], raw_train.conversion[idx])
        raw_val, raw_train = pick(np.sort(perm[:n_val])), pick(np.sort(perm[n_val:]))
    vocab = build_vocab_columns(raw_train, schema, cfg["min_freq"])
    test = None
    if (data_dir / "test.csv").exists():
        raw_test, _ = read_raw(data_dir / "test.csv", schema, cfg["max_errors"])
        test = encode_raw(raw_test, vocab, schema)
    elif need_test:
        raise DataError(f"{data_dir} has no test.csv")
    return Prepared(schema, vocab, encode_raw(raw_train, vocab, schema), encode_raw(raw_val, vocab, schema), test)


def cmd_gen_synth(args) -> Path:
    cfg = _config(args)
    synth = cfg.synth_config()
    out = _out_dir(args, "synth")
    write_synthetic(gen_synthetic(synth), out)
    (out / "config.txt").write_text(cfg.dump())
    log.info("wrote synthetic dataset to %s", out)
    return out


def cmd_pretrain(args) -> Path:
    cfg = _config(args)
    prep = load_data_dir(Path(args.data), cfg)
    out = _out_dir(args, "pretrain")
    res = pretrain_ctr(cfg.model_config("full"), prep.train, prep.val, prep.cardinalities)
    save_arrays(out / "t_pre.bin", "table", {"values": res.table.values},
                {"cardinalities": list(res.table.cardinalities), "best_epoch": res.best_epoch})
    maps = prep.entity_maps()
    save_arrays(out / "entities.bin", "entities", {"user": maps["user"], "item": maps["item"]})
    (out / "vocab.json").write_text(_vocab_json(prep.vocab))
    write_field_specs(prep.schema, out / "fields.txt")
    (out / "config.txt").write_text(cfg.dump())
    write_metrics_csv(res.history, ("epoch", "train_loss", "val_click_auc"), out / "pretrain_metrics.csv")
    return out


def cmd_mine(args) -> Path:
    cfg = _config(args)
    pre = Path(args.pretrain)
    if not (pre / "t_pre.bin").exists():
        raise DataError(f"{pre} has no t_pre.bin; run pretrain first")
    arrays, meta = load_arrays(pre / "t_pre.bin", "table")
    table = EmbeddingTable("T_pre", meta["cardinalities"], arrays["values"])
    maps, _ = load_arrays(pre / "entities.bin", "entities")
    schema = read_field_specs(pre / "fields.txt")
    out = _out_dir(args, "graphs")
    graphs = mine_graphs(table, schema, maps, cfg["K"], cfg["block_size"])
    rows = []
    for side, g in graphs.items():
        save_graph(g, out / f"{side}_graph.bin")
        rows.append({"graph": side, **graph_stats(g)})
        log.info("%s graph: %d nodes, %d edges", side, g.n, g.nnz)
    write_metrics_csv(rows, ("graph", "nodes", "nnz", "mean_degree", "max_degree", "normalized", "K"),
                      out / "graph_stats.csv")
    shutil.copy(pre / "vocab.json", out / "vocab.json")
    shutil.copy(pre / "entities.bin", out / "entities.bin")
    shutil.copy(pre / "fields.txt", out / "fields.txt")
    (out / "config.txt").write_text(cfg.dump())
    return out


def cmd_train(args) -> Path:
    cfg = _config(args)
    if args.ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {args.ablation!r}")
    sm = ABLATIONS[args.ablation][0]
    if sm and not args.graphs:
        raise ConfigError(f"ablation {args.ablation!r} needs --graphs")
    prep = load_data_dir(Path(args.data), cfg)
    graphs = None
    if sm:
        gdir = Path(args.graphs)
        stored = json.loads((gdir / "vocab.json").read_text())
        if stored != prep.vocab.to_dict():
            raise ConfigError(f"{gdir} was mined with a different vocabulary than {args.data}")
        graphs = {side: load_graph(gdir / f"{side}_graph.bin") for side in ("user", "item")}
    seeds = _seeds(args.seeds, cfg["seed"])
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    out = _out_dir(args, "train")
    (out / "config.txt").write_text(cfg.dump())
    jobs = [(cfg, seed, args.ablation, prep, graphs, out) for seed in seeds]
    if args.jobs == 1 or len(seeds) == 1:
        for job in jobs:
            _train_seed(*job)
    else:
        # seeds share nothing, so each worker writes its own seed directory
        with ProcessPoolExecutor(min(args.jobs, len(seeds))) as pool:
            for f in [pool.submit(_train_seed, *job) for job in jobs]:
                f.result()
    return out


def _train_seed(cfg: RunConfig, seed: int, ablation: str, prep: Prepared, graphs, out: Path) -> None:
    run_cfg = cfg.with_seed(seed)
    mcfg = run_cfg.model_config(ablation)
    sm = mcfg.enable_sm
    res = train(mcfg, prep.train, prep.val, prep.cardinalities, graphs, prep.entity_maps() if sm else None)
    sd = out / f"seed_{seed}"
    sd.mkdir()
    write_metrics_csv(res.metrics, METRIC_FIELDS, sd / "metrics.csv")
    meta = {"ablation": ablation, "seed": seed, "config_hash": run_cfg.config_hash(),
            "config": run_cfg.dump(), "cardinalities": prep.cardinalities,
            "fields": prep.schema.names, "best_epoch": res.best_epoch, "dtype": mcfg.dtype}
    save_arrays(sd / "checkpoint.bin", "checkpoint", res.model.state_dict(), meta)
    log.info("seed %d: best epoch %d, val purchase auc %.4f", seed, res.best_epoch, res.best_val_purchase_auc)


def _seeds(text: str | None, default: int) -> list[int]:
    if not text:
        return [default]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None


def _checkpoint_paths(spec: str, seeds: list[int] | None) -> list[Path]:
    p = Path(spec)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise DataError(f"no checkpoint at {p}")
    if seeds:
        paths = [p / f"seed_{s}" / "checkpoint.bin" for s in seeds]
    else:
        paths = sorted(p.glob("seed_*/checkpoint.bin"), key=lambda q: int(q.parent.name.split("_")[1]))
    missing = [q for q in paths if not q.exists()]
    if missing or not paths:
        raise DataError(f"missing checkpoints: {[str(q) for q in missing] or str(p)}")
    return paths


def load_checkpoint(path: Path, schema) -> tuple[CstwaModel, dict]:
    state, meta = load_arrays(path, "checkpoint")
    cfg = RunConfig.parse(meta["config"])
    mcfg = cfg.model_config(meta["ablation"])
    if list(meta["fields"]) != schema.names:
        raise DataError(f"{path}: checkpoint fields {meta['fields']} differ from data {schema.names}")
    model = CstwaModel(mcfg, schema, meta["cardinalities"], inference_only=True)
    model.load_state_dict(state)
    return model, meta


def cmd_eval(args) -> Path:
    seeds = _seeds(args.seeds, 0) if args.seeds else None
    paths = [q for spec in args.checkpoint for q in _checkpoint_paths(spec, seeds)]
    first_meta = load_arrays(paths[0], "checkpoint")[1]
    cfg = RunConfig.parse(first_meta["config"])
    prep = load_data_dir(Path(args.data), cfg, need_test=True)
    groups: dict[str, list[EvalReport]] = {}
    rows, errors = [], []
    for path in paths:
        model, meta = load_checkpoint(path, prep.schema)
        if meta["cardinalities"] != prep.cardinalities:
            raise DataError(f"{path}: vocabulary size differs from {args.data}")
        y_hat, z_hat = model.predict(prep.test)
        scores = {}
        for task, s, lab in (("click", y_hat, prep.test.y), ("purchase", z_hat, prep.test.z)):
            try:
                scores[task] = auc(s, lab)
            except MetricError as e:
                errors.append(f"{path} [{task}]: {e}")
                scores[task] = float("nan")
        rows.append({"model": meta["ablation"], "seed": meta["seed"], "checkpoint": str(path), **scores})
        groups.setdefault(meta["ablation"], []).append(
            EvalReport(meta["ablation"], meta["config_hash"], {k: [v] for k, v in scores.items()}, [meta["seed"]]))
    out = _out_dir(args, "eval")
    write_metrics_csv(rows, ("model", "seed", "checkpoint", "click", "purchase"), out / "per_seed.csv")
    if errors:
        raise MetricError("; ".join(errors))
    reports = [aggregate_seeds(g) for g in groups.values()]
    baseline = next((r for r in reports if r.model == args.baseline), None)
    (out / "report.csv").write_text(report_csv(reports, baseline))
    table = report_table(reports, baseline)
    (out / "report.txt").write_text(table)
    print(table, end="")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cstwa", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")

    p = sub.add_parser("gen-synth", help="write a synthetic funnel dataset")
    common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", help="pretrain the click model and save its embedding table")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("mine", help="build normalized top-K similarity graphs from a pretrained table")
    common(p)
    p.add_argument("--pretrain", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train one ablation variant for one or more seeds")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--graphs")
    p.add_argument("--ablation", default="full", choices=sorted(ABLATIONS))
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.add_argument("--jobs", type=int, default=1, help="train this many seeds in parallel processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints on the test split and write the AUC report")
    common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint file or train output directory; repeatable")
    p.add_argument("--seeds", help="restrict train directories to these seeds")
    p.add_argument("--baseline", default="mlp", help="model name gains are measured against")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CstwaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
