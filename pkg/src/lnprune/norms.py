"""Kernel importance scores.

The proposed score of a kernel is the Ln-norm of its post-activation
feature map averaged over ``N`` randomly drawn training images::

    score[k] = (1/N) * sum_i || F_k(x_i) ||_n

with ``n`` chosen per layer (L1 early, L2 in the middle, L-inf on the last
conv layer by default).  The baseline score is the L1 norm of the kernel
weights themselves.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _scistats

from .data import Dataset, center_crop, sample_subset
from .errors import DataError, GraphError
from .graph import MAXPOOL, ModelGraph, _run

__all__ = [
    "NormOrder", "L1", "L2", "LINF", "NormSchedule", "NormStats",
    "feature_norm", "feature_norms", "collect_stats", "kernel_l1", "kernel_l1_scores",
    "layerwise_schedule", "uniform_schedule", "spearman", "correlation_report",
]


@dataclass(frozen=True)
class NormOrder:
    """Order ``p`` of an entry-wise p-norm; ``math.inf`` is the max norm."""

    p: float

    def __post_init__(self):
        if not (self.p >= 1):
            raise ValueError(f"norm order must be >= 1, got {self.p}")

    @classmethod
    def parse(cls, text) -> "NormOrder":
        if isinstance(text, NormOrder):
            return text
        if isinstance(text, (int, float)):
            return cls(float(text))
        m = re.fullmatch(r"\s*[Ll]\s*(inf|∞|[0-9]*\.?[0-9]+)\s*", str(text))
        if not m:
            raise ValueError(f"cannot parse norm order {text!r}")
        v = m.group(1)
        return cls(math.inf if v in ("inf", "∞") else float(v))

    def __str__(self):
        if self.p == math.inf:
            return "Linf"
        return f"L{int(self.p)}" if float(self.p).is_integer() else f"L{self.p:g}"


L1 = NormOrder(1.0)
L2 = NormOrder(2.0)
LINF = NormOrder(math.inf)


def feature_norm(fmap, order) -> float:
    """Entry-wise norm of one feature map (any shape, flattened)."""
    a = np.asarray(fmap, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(feature_norms(a.reshape(1, 1, -1), order)[0, 0])


def feature_norms(maps, order):
    """Norms of every ``[H, W]`` plane of an ``[N, C, H, W]`` array -> ``[N, C]`` float64."""
    order = NormOrder.parse(order)
    a = np.abs(np.asarray(maps, dtype=np.float64)).reshape(maps.shape[0], maps.shape[1], -1)
    if order.p == 1:
        return a.sum(axis=2)
    peak = a.max(axis=2)
    if order.p == math.inf:
        return peak
    # divide by the peak first so tiny or huge maps neither underflow nor overflow
    scale = np.where(peak > 0, peak, 1.0)
    r = a / scale[..., None]
    if order.p == 2:
        return scale * np.sqrt(np.einsum("ncs,ncs->nc", r, r))
    return scale * np.sum(r ** order.p, axis=2) ** (1.0 / order.p)


@dataclass
class NormSchedule:
    """Norm order per prunable conv layer id."""

    orders: dict
    policy: str = "custom"

    def order_for(self, layer_id) -> NormOrder:
        try:
            return self.orders[layer_id]
        except KeyError:
            raise GraphError(f"norm schedule has no order for layer {layer_id!r}") from None

    def to_dict(self):
        return {"policy": self.policy, "orders": {k: str(v) for k, v in self.orders.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls({k: NormOrder.parse(v) for k, v in d["orders"].items()}, d.get("policy", "custom"))


def uniform_schedule(graph: ModelGraph, order) -> NormSchedule:
    order = NormOrder.parse(order)
    return NormSchedule({cid: order for cid in graph.conv_ids()}, policy=f"uniform-{order}")


def layerwise_schedule(graph: ModelGraph) -> NormSchedule:
    """L1 on the first conv block, L-inf on the last prunable unit, L2 elsewhere.

    The first block is every unit scored before the first max-pool layer
    (or the first unit when the network has no pooling); the last unit is
    the one whose scored activation sits deepest in the graph.
    """
    units = graph.channel_units
    pools = [graph.position(l.id) for l in graph.layers if l.kind == MAXPOOL]
    first_pool = pools[0] if pools else None
    last = max(range(len(units)), key=lambda i: graph.position(units[i].stat_source)) if units else None
    orders = {}
    for i, unit in enumerate(units):
        if i == last:
            order = LINF
        elif (first_pool is not None and graph.position(unit.stat_source) < first_pool) or \
                (first_pool is None and i == 0):
            order = L1
        else:
            order = L2
        for member in unit.members:
            orders[member] = order
    return NormSchedule(orders, policy="layerwise-L1-L2-Linf")


def _unit_order(schedule, unit):
    orders = {schedule.order_for(m) for m in unit.members}
    if len(orders) != 1:
        raise GraphError(f"coupled layers {unit.members} were given different norm orders")
    return orders.pop()


@dataclass
class NormStats:
    """Averaged feature-map norms, one vector per prunable conv layer.

    Members of a coupling group share the vector of their group.
    """

    values: dict
    sample_count: int
    schedule: NormSchedule
    seed: int | None = None
    sources: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "kernel_index", "norm_order", "value", "sample_count"])
        for layer_id, vec in self.values.items():
            order = str(self.schedule.order_for(layer_id))
            for k, v in enumerate(vec):
                w.writerow([layer_id, k, order, repr(float(v)), self.sample_count])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, seed=None) -> "NormStats":
        rows = list(csv.DictReader(io.StringIO(text)))
        values, orders, count = {}, {}, 0
        for r in rows:
            values.setdefault(r["layer_id"], []).append(float(r["value"]))
            orders[r["layer_id"]] = NormOrder.parse(r["norm_order"])
            count = int(r["sample_count"])
        return cls({k: np.asarray(v) for k, v in values.items()}, count, NormSchedule(orders), seed)


def collect_stats(graph: ModelGraph, dataset: Dataset, n_samples=100, schedule=None, seed=0,
                  batch_size=50) -> NormStats:
    """Average per-kernel feature-map norms over ``n_samples`` random training images.

    Each image contributes its own norm (norm first, mean second).  Images are
    processed in fixed-size chunks in the sampler's order and accumulated in
    float64, so the result depends only on the seed.
    """
    if dataset.size == 0:
        raise DataError("cannot collect statistics on an empty dataset")
    schedule = layerwise_schedule(graph) if schedule is None else schedule
    units = graph.channel_units
    unit_orders = [(_unit_order(schedule, u), u) for u in units]
    subset = sample_subset(dataset, n_samples, seed)
    images = subset.images
    if images.shape[2] != graph.input_shape[1]:
        images = center_crop(images, graph.input_shape[1])  # trained on random crops
    sums = {u.key: np.zeros(graph.shapes[u.stat_source][1], dtype=np.float64) for u in units}
    for start in range(0, subset.size, batch_size):
        batch = images[start:start + batch_size]
        outs, _ = _run(graph, batch)
        for order, u in unit_orders:
            per_sample = feature_norms(outs[u.stat_source], order)
            for row in per_sample:  # fixed sample order
                sums[u.key] += row
    values, sources = {}, {}
    for _, u in unit_orders:
        mean = sums[u.key] / subset.size
        for m in u.members:
            values[m] = mean
            sources[m] = u.stat_source
    ordered = {cid: values[cid] for cid in graph.conv_ids() if cid in values}
    return NormStats(ordered, subset.size, schedule, seed, sources)


def kernel_l1(weights):
    """Sum of absolute weights per kernel (bias excluded)."""
    w = np.asarray(weights, dtype=np.float64)
    return np.abs(w).reshape(w.shape[0], -1).sum(axis=1)


def kernel_l1_scores(graph: ModelGraph):
    """Kernel-L1 scores per conv layer; coupled layers get the sum over their group."""
    scores = {}
    for u in graph.channel_units:
        total = sum(kernel_l1(graph.layer(m).weights) for m in u.members)
        for m in u.members:
            scores[m] = total
    return {cid: scores[cid] for cid in graph.conv_ids() if cid in scores}


def spearman(a, b):
    """Spearman rank correlation, ``None`` when undefined (n < 2 or constant input)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return None
    rho = _scistats.spearmanr(a, b).statistic
    return None if not np.isfinite(rho) else float(rho)


def correlation_report(stats: NormStats, graph: ModelGraph):
    """Per-layer Spearman correlation between feature-map scores and kernel L1 norms."""
    report = {}
    for layer_id, vec in stats.values.items():
        layer = graph.layer(layer_id)
        if len(vec) != layer.weights.shape[0]:
            raise GraphError(f"stats for {layer_id!r} have {len(vec)} kernels, layer has {layer.weights.shape[0]}")
        report[layer_id] = spearman(vec, kernel_l1(layer.weights))
    return report


def correlation_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_id", "spearman_rho"])
    for layer_id, rho in report.items():
        w.writerow([layer_id, "" if rho is None else repr(rho)])
    return buf.getvalue()
