"""Command-line front end.

Subcommands: ``synth``, ``train``, ``stats``, ``prune``, ``pipeline``,
``eval``.  All of them read one JSON run configuration (``--config``);
command-line flags override its scalar fields.

Exit codes: 0 success, 2 configuration error, 3 data/model-file error,
4 numeric failure (training diverged).
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
from filelock import FileLock, Timeout

from .data import Dataset, SynthSpec, load_idx, synth_generate, write_idx
from .errors import ConfigError, DataError, LnPruneError, ModelFormatError, PlanError, TrainingDiverged
from .graph import forward, replace_head_with_gap, vgg_style
from .norms import correlation_csv, correlation_report
from .pipeline import PipelineConfig, geometric_rounds, results_csv, run_pipeline
from .pruner import Criterion, apply_plan, build_plan, masked_graph, plan_report
from .serialize import atomic_write, dumps, load_model, save_model
from .train import TrainConfig, evaluate, train_from_scratch

log = logging.getLogger("lnprune")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SCHEMA_VERSION = 1

_train_cfg = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr_stage1": {"type": "number", "minimum": 0},
        "lr_stage2": {"type": "number", "minimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "max_epochs": {"type": "integer", "minimum": 0},
        "patience": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "crop": {"type": ["integer", "null"], "minimum": 1},
        "mirror": {"type": "boolean"},
    },
}
_split = {
    "type": "object", "additionalProperties": False, "required": ["images", "labels"],
    "properties": {"images": {"type": "string"}, "labels": {"type": "string"}},
}
_criterion = {"type": "string", "pattern": r"^(kernel-l1|fm-layerwise|fm-l(inf|[0-9]*\.?[0-9]+))$"}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "data"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "synth": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "class_count": {"type": "integer", "minimum": 2},
                        "size": {"type": "integer", "minimum": 8},
                        "per_class": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                      "minItems": 3, "maxItems": 3},
                        "sigma": {"type": "number", "minimum": 0},
                        "shift": {"type": "integer", "minimum": 0},
                        "seed": {"type": "integer"},
                    },
                },
                "idx": {
                    "type": "object", "additionalProperties": False, "required": ["train", "val", "test"],
                    "properties": {"train": _split, "val": _split, "test": _split,
                                   "class_count": {"type": "integer", "minimum": 2}},
                },
            },
            "oneOf": [{"required": ["synth"]}, {"required": ["idx"]}],
        },
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "arch": {"enum": ["vgg"]},
                "blocks": {"type": "array", "minItems": 1,
                           "items": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}}},
                "head": {"enum": ["gap", "fc"]},
                "fc_width": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "pretrain": {
            "type": "object", "additionalProperties": False,
            "properties": {"lr": {"type": "number", "minimum": 0}, "max_epochs": {"type": "integer", "minimum": 0},
                           "patience": {"type": "integer", "minimum": 1},
                           "batch_size": {"type": "integer", "minimum": 1}},
        },
        "pipeline": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "criterion": _criterion,
                "compare": {"type": "array", "items": _criterion, "minItems": 1},
                "stats_samples": {"type": "integer", "minimum": 1},
                "rounds": {"type": "array",
                           "items": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 1}}},
                "schedule": {
                    "type": "object", "additionalProperties": False, "required": ["final_fraction", "rounds"],
                    "properties": {"final_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                                   "rounds": {"type": "integer", "minimum": 0}},
                },
                "finetune": _train_cfg,
            },
            "not": {"required": ["rounds", "schedule"]},
        },
    },
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def load_config(path, overrides=None):
    """Read and schema-validate a run configuration; flags in ``overrides`` win."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {path}: {where}: {exc.message}") from None
    cfg = copy.deepcopy(cfg)
    cfg.setdefault("seed", 0)
    cfg.setdefault("output_dir", "lnprune-run")
    cfg.setdefault("pipeline", {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.rpartition(".")
        target = cfg if not section else cfg.setdefault(section, {})
        target[name] = value
    return cfg


def load_datasets(cfg):
    data = cfg["data"]
    if "synth" in data:
        spec = dict(data["synth"])
        if "per_class" in spec:
            spec["per_class"] = tuple(spec["per_class"])
        return synth_generate(SynthSpec(**spec))
    idx = data["idx"]
    base = Path(cfg.get("_config_dir", "."))
    out = []
    for split in ("train", "val", "test"):
        paths = idx[split]
        out.append(load_idx(base / paths["images"], base / paths["labels"], idx.get("class_count"), split))
    counts = {d.class_count for d in out}
    if len(counts) != 1:
        cc = max(counts)
        out = [Dataset(d.images, d.labels, cc, d.split) for d in out]
    return tuple(out)


def pipeline_config(cfg, graph, criterion=None):
    p = cfg.get("pipeline", {})
    if "rounds" in p:
        rounds = [dict(r) for r in p["rounds"]]
    elif "schedule" in p:
        rounds = geometric_rounds(graph, p["schedule"]["final_fraction"], p["schedule"]["rounds"])
    else:
        rounds = []
    finetune = TrainConfig(**p.get("finetune", {}))
    return PipelineConfig(rounds=rounds, criterion=criterion or p.get("criterion", "fm-layerwise"),
                          stats_samples=p.get("stats_samples", 100), finetune=finetune, seed=cfg["seed"])


class _OutputLock:
    """Exclusive ownership of an output directory for one invocation."""

    def __init__(self, directory):
        os.makedirs(directory, exist_ok=True)
        self.lock = FileLock(os.path.join(directory, ".lnprune.lock"))

    def __enter__(self):
        try:
            self.lock.acquire(timeout=0)
        except Timeout:
            raise CliError("output directory is in use by another lnprune process", EXIT_CONFIG) from None
        return self

    def __exit__(self, *exc):
        self.lock.release()


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args, cfg):
    if "synth" not in cfg["data"]:
        raise ConfigError("synth needs a data.synth section")
    out = Path(args.out or Path(cfg["output_dir"]) / "data")
    out.mkdir(parents=True, exist_ok=True)
    for ds in load_datasets(cfg):
        write_idx(ds, out / f"{ds.split}-images.idx", out / f"{ds.split}-labels.idx")
    print(f"wrote train/val/test IDX files to {out}")


def cmd_train(args, cfg):
    train, val, test = load_datasets(cfg)
    m = cfg.get("model", {})
    blocks = tuple(tuple(b) for b in m.get("blocks", [[8, 8], [16, 16], [32, 32]]))
    graph = vgg_style(train.image_shape, blocks, train.class_count, head=m.get("head", "gap"),
                      fc_width=m.get("fc_width", 64), seed=m.get("seed", cfg["seed"]))
    pre = cfg.get("pretrain", {})
    tc = TrainConfig(max_epochs=pre.get("max_epochs", 30), patience=pre.get("patience", 5),
                     batch_size=pre.get("batch_size", 32), seed=cfg["seed"])
    graph, _ = train_from_scratch(graph, train, val, lr=pre.get("lr", 0.02), cfg=tc)
    if args.gap:
        graph = replace_head_with_gap(graph, seed=cfg["seed"])
        graph, _ = train_from_scratch(graph, train, val, lr=pre.get("lr", 0.02), cfg=tc)
    save_model(graph, args.out)
    print(f"accuracy={evaluate(graph, test)!r}")


def cmd_stats(args, cfg):
    graph = load_model(args.model)
    train, _, _ = load_datasets(cfg)
    crit = Criterion.parse(args.criterion or cfg["pipeline"].get("criterion", "fm-layerwise"))
    if crit.kind != "feature-map":
        raise ConfigError("stats needs a feature-map criterion (fm-*)")
    n = cfg["pipeline"].get("stats_samples", 100)
    _, stats = crit.scores(graph, train, n, seed=cfg["seed"])
    out = Path(args.out or cfg["output_dir"])
    with _OutputLock(out):
        atomic_write(out / "stats.csv", stats.to_csv().encode())
        atomic_write(out / "correlation.csv", correlation_csv(correlation_report(stats, graph)).encode())
    print(f"wrote {out / 'stats.csv'} and {out / 'correlation.csv'}")


def cmd_prune(args, cfg):
    graph = load_model(args.model)
    train, _, _ = load_datasets(cfg)
    pcfg = pipeline_config(cfg, graph, args.criterion)
    if not 1 <= args.round <= len(pcfg.rounds):
        raise ConfigError(f"round {args.round} not configured (have {len(pcfg.rounds)} rounds)")
    crit = Criterion.parse(pcfg.criterion)
    scores, _ = crit.scores(graph, train, pcfg.stats_samples, seed=[cfg["seed"], args.round])
    try:
        plan = build_plan(graph, scores, pcfg.rounds[args.round - 1])
        pruned = apply_plan(graph, plan)
    except PlanError as exc:
        raise ConfigError(str(exc)) from None
    if args.verify:
        probe = train.images[:min(16, train.size)]
        a, _ = forward(pruned, probe)
        b, _ = forward(masked_graph(graph, plan), probe)
        err = float(np.max(np.abs(a.astype(np.float64) - b)))
        if err > 1e-5:
            raise CliError(f"verify failed: surgery differs from mask oracle by {err:.3g}", EXIT_NUMERIC)
        print(f"verify ok: max |logit diff| = {err:.3g}")
    out = Path(args.out)
    atomic_write(out, dumps(pruned))
    plan_path = Path(args.plan) if args.plan else out.with_suffix(".plan.json")
    atomic_write(plan_path, plan.to_json().encode())
    report = plan_report(plan, graph, pruned)
    print(f"params {report['params_before']} -> {report['params_after']} "
          f"(ratio {report['compression_ratio']:.4f}); plan written to {plan_path}")


def _plot_data(records) -> str:
    return "".join(f"{r.round} {r.test_acc!r}\n" for r in records)


def cmd_pipeline(args, cfg):
    graph = load_model(args.model)
    train, val, test = load_datasets(cfg)
    out = Path(cfg["output_dir"])
    p = cfg["pipeline"]
    criteria = p.get("compare") if args.compare else [args.criterion or p.get("criterion", "fm-layerwise")]
    if args.compare and not criteria:
        criteria = ["kernel-l1", "fm-l1", "fm-layerwise"]
    with _OutputLock(out):
        merged = []
        for crit in criteria:
            pcfg = pipeline_config(cfg, graph, crit)
            if args.rounds is not None:
                pcfg.rounds = pcfg.rounds[:args.rounds]
            pcfg.validate(graph)
            run_dir = out / Criterion.parse(crit).name if args.compare else out
            _, records = run_pipeline(graph, pcfg, train, val, test, out_dir=run_dir, resume=args.resume)
            atomic_write(run_dir / "plot.dat", _plot_data(records).encode())
            merged.extend(records)
        if args.compare:
            atomic_write(out / "comparison.csv", results_csv(merged).encode())
            for crit in criteria:
                name = Criterion.parse(crit).name
                recs = [r for r in merged if r.criterion == name]
                atomic_write(out / f"plot_{name}.dat", _plot_data(recs).encode())
    final = merged[-1]
    print(f"rounds={final.round} test_acc={final.test_acc!r} params={final.params}")


def cmd_eval(args, cfg):
    graph = load_model(args.model)
    if args.images:
        if not args.labels:
            raise ConfigError("--images needs --labels")
        ds = load_idx(args.images, args.labels)
    elif cfg is not None:
        ds = dict(zip(("train", "val", "test"), load_datasets(cfg)))[args.split]
    else:
        raise ConfigError("eval needs --config or --images/--labels")
    print(f"accuracy={evaluate(graph, ds)!r}")


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="lnprune", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--output-dir", help="override config output_dir")

    p = sub.add_parser("synth", help="generate the synthetic dataset as IDX files")
    common(p)
    p.add_argument("--out", help="directory for the IDX files")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a VGG-style baseline model")
    common(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--gap", action="store_true", help="replace an fc head with GAP and retrain")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stats", help="per-kernel feature-map statistics")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--criterion")
    p.add_argument("--stats-samples", type=int)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("prune", help="one pruning round without training")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--round", type=int, required=True, help="1-based index into the configured rounds")
    p.add_argument("--criterion")
    p.add_argument("--stats-samples", type=int)
    p.add_argument("--out", required=True, help="pruned model file")
    p.add_argument("--plan", help="plan JSON path (default: <out>.plan.json)")
    p.add_argument("--verify", action="store_true", help="check surgery against the mask oracle")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("pipeline", help="recursive prune/fine-tune run")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--criterion")
    p.add_argument("--stats-samples", type=int)
    p.add_argument("--rounds", type=int, help="run only the first N configured rounds")
    p.add_argument("--resume", action="store_true", help="continue from the last completed round")
    p.add_argument("--compare", action="store_true", help="run every criterion in pipeline.compare")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="top-1 accuracy of a model")
    common(p, config_required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.set_defaults(func=cmd_eval)
    return parser


def _limit_threads():
    n = os.environ.get("LNPRUNE_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        cfg = None
        if args.config:
            overrides = {"seed": args.seed, "output_dir": args.output_dir,
                         "pipeline.stats_samples": getattr(args, "stats_samples", None)}
            cfg = load_config(args.config, overrides)
            cfg["_config_dir"] = str(Path(args.config).resolve().parent)
        args.func(args, cfg)
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, PlanError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ModelFormatError, OSError, LnPruneError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
