"""Structured kernel removal.

A round of pruning is planned from one set of scores (every layer's removals
decided together) and then applied in a single surgery that shrinks

* the pruned layer's kernels and biases,
* the matching input-channel slices of every consumer (conv, projection
  shortcut, or dense after GAP/flatten),
* all members of a residual coupling group in lockstep.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import LnPruneError, PlanError
from .graph import CONV_KINDS, DENSE, ModelGraph
from .norms import (NormOrder, NormSchedule, collect_stats, kernel_l1_scores, layerwise_schedule,
                    uniform_schedule)

__all__ = ["Criterion", "PrunePlan", "rank_kernels", "build_plan", "apply_plan", "masked_graph",
           "plan_report"]


@dataclass(frozen=True)
class Criterion:
    """Either the kernel-L1 baseline or feature-map norms under a schedule.

    ``schedule`` is ``"layerwise"`` or a norm order such as ``"L2"``.
    """

    kind: str
    schedule: str = "layerwise"

    NAMES = ("kernel-l1", "fm-l1", "fm-l2", "fm-linf", "fm-layerwise")

    @classmethod
    def parse(cls, name) -> "Criterion":
        if isinstance(name, Criterion):
            return name
        name = name.lower()
        if name == "kernel-l1":
            return cls("kernel-l1", "")
        if name == "fm-layerwise":
            return cls("feature-map", "layerwise")
        if name.startswith("fm-"):
            return cls("feature-map", str(NormOrder.parse(name[3:])))
        raise ValueError(f"unknown criterion {name!r}; expected one of {cls.NAMES}")

    @property
    def name(self):
        if self.kind == "kernel-l1":
            return "kernel-l1"
        return "fm-layerwise" if self.schedule == "layerwise" else f"fm-{self.schedule.lower()}"

    def make_schedule(self, graph) -> NormSchedule:
        if self.schedule == "layerwise":
            return layerwise_schedule(graph)
        return uniform_schedule(graph, self.schedule)

    def scores(self, graph, dataset=None, n_samples=100, seed=0):
        """``(scores per conv layer, NormStats or None)``."""
        if self.kind == "kernel-l1":
            return kernel_l1_scores(graph), None
        if dataset is None:
            raise PlanError("feature-map criteria need a dataset to collect statistics")
        stats = collect_stats(graph, dataset, min(n_samples, dataset.size), self.make_schedule(graph), seed)
        return stats.values, stats


@dataclass
class PrunePlan:
    """Kernel indices removed per conv layer plus the derived input slices."""

    removals: dict
    input_slices: dict = field(default_factory=dict)
    groups: list = field(default_factory=list)

    def is_empty(self):
        return not any(self.removals.values())

    def to_json(self) -> str:
        return json.dumps({
            "removals": {k: list(v) for k, v in self.removals.items()},
            "input_slices": {k: list(v) for k, v in self.input_slices.items()},
            "groups": [list(g) for g in self.groups],
        }, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "PrunePlan":
        d = json.loads(text)
        return cls({k: tuple(v) for k, v in d["removals"].items()},
                   {k: tuple(v) for k, v in d.get("input_slices", {}).items()},
                   [tuple(g) for g in d.get("groups", [])])


def rank_kernels(scores):
    """Ascending order of ``scores``; equal scores keep index order."""
    return np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")


def build_plan(graph: ModelGraph, scores, targets) -> PrunePlan:
    """Drop the lowest-scoring kernels so each layer keeps ``targets[layer]``.

    ``scores`` maps conv layer ids to per-kernel scores (a ``NormStats`` is
    accepted too).  Coupled layers must share one target; layers without a
    target are left alone.
    """
    if hasattr(scores, "values") and not callable(scores.values):
        scores = scores.values
    unknown = set(targets) - set(graph.conv_ids())
    if unknown:
        raise PlanError(f"targets name unknown conv layers: {sorted(unknown)}")
    removals, slices, groups = {}, {}, []
    for unit in graph.channel_units:
        wanted = {targets[m] for m in unit.members if m in targets}
        if not wanted:
            continue
        if len(wanted) > 1:
            raise PlanError(f"coupled layers {unit.members} were given different targets {sorted(wanted)}")
        keep = int(wanted.pop())
        current = graph.layer(unit.key).weights.shape[0]
        if keep < 1:
            raise PlanError(f"layer {unit.key!r}: target {keep} would remove every kernel")
        if keep > current:
            raise PlanError(f"layer {unit.key!r}: target {keep} exceeds current count {current}")
        vec = None
        for m in unit.members:
            if m in scores:
                vec = np.asarray(scores[m], dtype=np.float64)
                break
        if vec is None:
            raise PlanError(f"no scores for layer {unit.key!r}")
        if vec.shape != (current,):
            raise PlanError(f"stale scores for {unit.key!r}: {vec.shape[0]} values for {current} kernels")
        removed = tuple(sorted(int(i) for i in rank_kernels(vec)[:current - keep]))
        for m in unit.members:
            removals[m] = removed
        for c in unit.consumers:
            slices[c] = removed
        if len(unit.members) > 1:
            groups.append(unit.members)
    return PrunePlan(removals, slices, groups)


def _keep(n, removed):
    mask = np.ones(n, dtype=bool)
    mask[list(removed)] = False
    return mask


def _unit_removals(graph, plan):
    """Validate ``plan`` against ``graph``; yields ``(unit, removed)``."""
    unknown = set(plan.removals) - set(graph.conv_ids())
    if unknown:
        raise PlanError(f"plan names unknown conv layers: {sorted(unknown)}")
    out = []
    for unit in graph.channel_units:
        present = [tuple(plan.removals[m]) for m in unit.members if m in plan.removals]
        if not present:
            continue
        if len(present) != len(unit.members) or len(set(present)) != 1:
            raise PlanError(f"coupled layers {unit.members} must be pruned identically")
        removed = present[0]
        if not removed:
            continue
        n = graph.layer(unit.key).weights.shape[0]
        if min(removed) < 0 or max(removed) >= n or len(set(removed)) != len(removed):
            raise PlanError(f"layer {unit.key!r}: removal indices {removed} invalid for {n} kernels")
        if len(removed) >= n:
            raise PlanError(f"layer {unit.key!r}: plan removes every kernel")
        out.append((unit, removed))
    return out


def _input_slice(graph, consumer, unit, mask, zero=False):
    """Weights of ``consumer`` with input channels outside ``mask`` dropped (or zeroed)."""
    w = consumer.weights
    if consumer.kind in CONV_KINDS:
        if zero:
            w = w.copy()
            w[:, ~mask] = 0
            return w
        return np.ascontiguousarray(w[:, mask])
    if consumer.kind == DENSE:
        C = mask.size
        F = graph.shapes[consumer.inputs[0]][1]
        if F % C:
            raise PlanError(f"dense layer {consumer.id!r}: {F} inputs do not split into {C} channels")
        w3 = w.reshape(w.shape[0], C, F // C)
        if zero:
            w3 = w3.copy()
            w3[:, ~mask] = 0
            return w3.reshape(w.shape)
        return np.ascontiguousarray(w3[:, mask].reshape(w.shape[0], -1))
    raise PlanError(f"layer {consumer.id!r} of kind {consumer.kind} cannot consume pruned channels")


def apply_plan(graph: ModelGraph, plan: PrunePlan) -> ModelGraph:
    """Shrink the graph according to ``plan``; the input graph is never modified."""
    layers = {l.id: l for l in graph.layers}
    try:
        for unit, removed in _unit_removals(graph, plan):
            mask = _keep(graph.layer(unit.key).weights.shape[0], removed)
            for m in unit.members:
                l = layers[m]
                params = dict(l.params)
                params["out_channels"] = int(mask.sum())
                layers[m] = l.replace(weights=np.ascontiguousarray(l.weights[mask]),
                                      bias=np.ascontiguousarray(l.bias[mask]), params=params)
            for c in unit.consumers:
                l = layers[c]
                layers[c] = l.replace(weights=_input_slice(graph, l, unit, mask))
        return ModelGraph(graph.input_shape, [layers[l.id] for l in graph.layers])
    except PlanError:
        raise
    except LnPruneError as exc:
        raise PlanError(f"surgery produced an invalid graph: {exc}") from exc


def masked_graph(graph: ModelGraph, plan: PrunePlan) -> ModelGraph:
    """Unpruned copy whose consumers ignore the removed channels.

    Zeroing the consumer input slices removes every contribution of a pruned
    kernel, so this graph must produce the same logits as
    ``apply_plan(graph, plan)``; it is the reference used to verify surgery.
    """
    layers = {l.id: l for l in graph.layers}
    for unit, removed in _unit_removals(graph, plan):
        mask = _keep(graph.layer(unit.key).weights.shape[0], removed)
        for c in unit.consumers:
            layers[c] = layers[c].replace(weights=_input_slice(graph, layers[c], unit, mask, zero=True))
    return ModelGraph(graph.input_shape, [layers[l.id] for l in graph.layers])


def _layer_params(graph):
    return {l.id: int(l.weights.size + l.bias.size) for l in graph.layers if l.weights is not None}


def plan_report(plan: PrunePlan, before: ModelGraph, after: ModelGraph):
    """Kept/removed kernel counts and parameter totals for one surgery."""
    kb, ka = before.kernel_counts(), after.kernel_counts()
    pb, pa = _layer_params(before), _layer_params(after)
    layers = {}
    for lid in pb:
        entry = {"params_before": pb[lid], "params_after": pa[lid],
                 "param_ratio": pa[lid] / pb[lid] if pb[lid] else 1.0}
        if lid in kb:
            entry.update(kernels_before=kb[lid], kernels_after=ka[lid], removed=kb[lid] - ka[lid])
        layers[lid] = entry
    total_b, total_a = before.num_params(), after.num_params()
    return {
        "layers": layers,
        "params_before": total_b,
        "params_after": total_a,
        "blob_bytes_before": 4 * total_b,
        "blob_bytes_after": 4 * total_a,
        "compression_ratio": total_a / total_b if total_b else 1.0,
        "empty": plan.is_empty(),
    }
