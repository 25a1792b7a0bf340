"""Recursive prune -> fine-tune driver.

Every round collects scores on the current model, removes the lowest-ranked
kernels down to the round's keep counts, fine-tunes in two stages and
records accuracy and size.  The weights left by one round initialise the
next.  With an output directory each round is persisted as::

    round_<i>/model.lnpm   round_<i>/stats.csv   round_<i>/plan.json   round_<i>/record.json

plus a run-level ``results.csv`` rewritten after every round.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import Dataset
from .errors import ConfigError
from .graph import ModelGraph
from .pruner import Criterion, apply_plan, build_plan, plan_report
from .serialize import atomic_write, dumps, load_model
from .train import TrainConfig, evaluate, finetune_two_stage

log = logging.getLogger(__name__)

RESULTS_COLUMNS = ("round", "criterion", "val_acc", "test_acc", "params", "bytes")


@dataclass
class PipelineConfig:
    rounds: list  # keep counts per round: [{conv_id: keep, ...}, ...]
    criterion: str = "fm-layerwise"
    stats_samples: int = 100
    finetune: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def validate(self, graph: ModelGraph):
        Criterion.parse(self.criterion)
        if self.stats_samples < 1:
            raise ConfigError("stats_samples must be >= 1")
        current = graph.kernel_counts()
        for i, targets in enumerate(self.rounds, start=1):
            unknown = set(targets) - set(current)
            if unknown:
                raise ConfigError(f"round {i} names unknown conv layers {sorted(unknown)}")
            for lid, keep in targets.items():
                if keep < 1:
                    raise ConfigError(f"round {i}: layer {lid} keep count must be >= 1")
                if keep > current[lid]:
                    raise ConfigError(f"round {i}: layer {lid} keep count {keep} exceeds previous {current[lid]}")
            current = {**current, **targets}


@dataclass
class RoundRecord:
    round: int
    criterion: str
    val_acc: float
    test_acc: float
    params: int
    bytes: int
    stats_ref: str | None = None
    kernel_counts: dict = field(default_factory=dict)
    conv_frozen_stage1: bool | None = None

    def to_dict(self):
        return asdict(self)


def geometric_rounds(graph: ModelGraph, final_fraction, n_rounds, layers=None):
    """Keep counts shrinking geometrically to ``final_fraction`` of the start.

    Coupled layers get identical counts; every layer keeps at least one kernel.
    """
    counts = graph.kernel_counts()
    layers = list(counts) if layers is None else list(layers)
    rounds = []
    for r in range(1, n_rounds + 1):
        frac = final_fraction ** (r / n_rounds)
        rounds.append({lid: max(1, int(math.ceil(counts[lid] * frac - 1e-9))) for lid in layers})
    return rounds


def results_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_COLUMNS)
    for r in records:
        w.writerow([r.round, r.criterion, repr(r.val_acc), repr(r.test_acc), r.params, r.bytes])
    return buf.getvalue()


def _persist_round(out_dir, record, model_data, stats=None, plan=None, history=None, report=None):
    rdir = Path(out_dir) / f"round_{record.round}"
    rdir.mkdir(parents=True, exist_ok=True)
    atomic_write(rdir / "model.lnpm", model_data)
    if stats is not None:
        atomic_write(rdir / "stats.csv", stats.to_csv().encode())
    if plan is not None:
        atomic_write(rdir / "plan.json", plan.to_json().encode())
    extra = {"history": history, "plan_report": report}
    # record.json last: its presence marks the round complete
    atomic_write(rdir / "record.json",
                 (json.dumps({**record.to_dict(), **extra}, indent=2, sort_keys=True) + "\n").encode())


def load_records(out_dir):
    """Completed rounds in ``out_dir`` (contiguous from round 0)."""
    records = []
    i = 0
    while (Path(out_dir) / f"round_{i}" / "record.json").exists():
        d = json.loads((Path(out_dir) / f"round_{i}" / "record.json").read_text())
        fields = RoundRecord.__dataclass_fields__
        records.append(RoundRecord(**{k: v for k, v in d.items() if k in fields}))
        i += 1
    return records


def run_pipeline(graph: ModelGraph, cfg: PipelineConfig, train: Dataset, val: Dataset, test: Dataset,
                 out_dir=None, resume=False, on_round=None):
    """Run every configured round; returns ``(final graph, records)``.

    ``resume`` continues from the last completed round found in ``out_dir``.
    ``on_round(record)`` is called after each round (round 0 included).
    """
    cfg.validate(graph)
    criterion = Criterion.parse(cfg.criterion)
    records = []
    start = 1
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if resume and out_dir is not None:
        records = load_records(out_dir)
        if records:
            graph = load_model(Path(out_dir) / f"round_{records[-1].round}" / "model.lnpm")
            start = records[-1].round + 1
            log.info("resuming after round %d", records[-1].round)
    if not records:
        data = dumps(graph)
        rec = RoundRecord(0, criterion.name, evaluate(graph, val), evaluate(graph, test),
                          graph.num_params(), len(data), kernel_counts=graph.kernel_counts())
        records.append(rec)
        if out_dir is not None:
            _persist_round(out_dir, rec, data)
            atomic_write(Path(out_dir) / "results.csv", results_csv(records).encode())
        if on_round:
            on_round(rec)

    for r in range(start, len(cfg.rounds) + 1):
        targets = cfg.rounds[r - 1]
        scores, stats = criterion.scores(graph, train, cfg.stats_samples, seed=[cfg.seed, r])
        plan = build_plan(graph, scores, targets)
        pruned = apply_plan(graph, plan)
        report = plan_report(plan, graph, pruned)
        ft = TrainConfig(**{**cfg.finetune.to_dict(), "seed": cfg.finetune.seed + 1000 * cfg.seed})
        graph, history = finetune_two_stage(pruned, train, val, ft, round_index=r)
        data = dumps(graph)
        rec = RoundRecord(
            r, criterion.name, evaluate(graph, val), evaluate(graph, test), graph.num_params(), len(data),
            stats_ref=f"round_{r}/stats.csv" if stats is not None and out_dir is not None else None,
            kernel_counts=graph.kernel_counts(),
            conv_frozen_stage1=history["conv_digest_before_stage1"] == history["conv_digest_after_stage1"],
        )
        records.append(rec)
        log.info("round %d %s val %.4f test %.4f params %d", r, criterion.name, rec.val_acc, rec.test_acc,
                 rec.params)
        if out_dir is not None:
            _persist_round(out_dir, rec, data, stats, plan, history, report)
            atomic_write(Path(out_dir) / "results.csv", results_csv(records).encode())
        if on_round:
            on_round(rec)
    return graph, records
