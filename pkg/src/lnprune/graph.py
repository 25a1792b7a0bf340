"""Typed layer graph for small CNNs.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` where every
layer names its inputs (the previous layer by default).  Plain chains and
residual stages (identity skips and 1x1 projection shortcuts) are supported.

Graphs are treated as immutable: transformations build new graphs and share
untouched weight arrays with the original.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .errors import GraphError, ShapeError

CONV = "Conv"
RELU = "ReLU"
MAXPOOL = "MaxPool"
GAP = "GAP"
FLATTEN = "Flatten"
DENSE = "Dense"
SOFTMAX = "Softmax"
ADD = "ResidualAdd"
SHORTCUT = "ProjectionShortcut"

KINDS = (CONV, RELU, MAXPOOL, GAP, FLATTEN, DENSE, SOFTMAX, ADD, SHORTCUT)
PARAM_KINDS = (CONV, SHORTCUT, DENSE)
CONV_KINDS = (CONV, SHORTCUT)
# layers whose output keeps the channel identity of their input
PASS_THROUGH = (RELU, MAXPOOL, GAP, FLATTEN)

INPUT = "input"


@dataclass(frozen=True, eq=False)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple = ()
    params: dict = field(default_factory=dict)
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def replace(self, **changes) -> "LayerSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class CouplingGroup:
    """Producers whose output channels are tied together by residual additions."""

    members: tuple
    stat_source: str


@dataclass(frozen=True)
class ChannelUnit:
    """One independently prunable channel space.

    ``members`` are the Conv/ProjectionShortcut layers producing the channels,
    ``layers`` every layer whose output carries them, ``consumers`` the
    parameterised layers reading them and ``stat_source`` the layer whose
    (post-activation) output is used to score the channels.
    """

    members: tuple
    layers: tuple
    consumers: tuple
    stat_source: str

    @property
    def key(self):
        return self.members[0]


class ModelGraph:
    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(s) for s in input_shape)
        if len(self.input_shape) != 3:
            raise GraphError(f"input_shape must be (C, H, W), got {self.input_shape}")
        fixed = []
        seen = {INPUT}
        prev = INPUT
        for layer in layers:
            if layer.kind not in KINDS:
                raise GraphError(f"unknown layer kind {layer.kind!r} for layer {layer.id!r}")
            if layer.id in seen:
                raise GraphError(f"duplicate layer id {layer.id!r}")
            inputs = tuple(layer.inputs) or (prev,)
            for src in inputs:
                if src not in seen:
                    raise GraphError(f"layer {layer.id!r} reads {src!r} which is not an earlier layer")
            want = 2 if layer.kind == ADD else 1
            if len(inputs) != want:
                raise GraphError(f"layer {layer.id!r} ({layer.kind}) needs {want} input(s), got {len(inputs)}")
            if layer.kind in PARAM_KINDS and (layer.weights is None or layer.bias is None):
                raise GraphError(f"layer {layer.id!r} ({layer.kind}) needs weights and bias")
            if inputs != layer.inputs:
                layer = layer.replace(inputs=inputs)
            for arr in (layer.weights, layer.bias):
                if arr is not None:
                    arr.flags.writeable = False
            fixed.append(layer)
            seen.add(layer.id)
            prev = layer.id
        if not fixed:
            raise GraphError("graph has no layers")
        self.layers = tuple(fixed)
        self._index = {layer.id: layer for layer in self.layers}
        self.shapes  # validate eagerly

    def __repr__(self):
        return f"ModelGraph(input_shape={self.input_shape}, layers={[l.id for l in self.layers]})"

    def __contains__(self, layer_id):
        return layer_id in self._index

    def layer(self, layer_id) -> LayerSpec:
        try:
            return self._index[layer_id]
        except KeyError:
            raise GraphError(f"no layer named {layer_id!r}") from None

    def position(self, layer_id):
        return self.layers.index(self.layer(layer_id))

    def consumers(self, layer_id):
        return [l for l in self.layers if layer_id in l.inputs]

    @property
    def output_id(self):
        return self.layers[-1].id

    def conv_ids(self):
        return [l.id for l in self.layers if l.kind in CONV_KINDS]

    def param_ids(self):
        return [l.id for l in self.layers if l.kind in PARAM_KINDS]

    def kernel_counts(self):
        return {l.id: int(l.weights.shape[0]) for l in self.layers if l.kind in CONV_KINDS}

    def num_params(self):
        return int(sum(l.weights.size + l.bias.size for l in self.layers if l.kind in PARAM_KINDS))

    def params(self):
        return {l.id: (l.weights, l.bias) for l in self.layers if l.kind in PARAM_KINDS}

    def with_params(self, params) -> "ModelGraph":
        """New graph with the given ``{layer_id: (weights, bias)}`` swapped in."""
        layers = []
        for l in self.layers:
            if l.id in params:
                w, b = params[l.id]
                if w.shape != l.weights.shape or b.shape != l.bias.shape:
                    raise ShapeError("replacement parameters change shape", layer=l.id,
                                     expected=l.weights.shape, actual=w.shape)
                l = l.replace(weights=w, bias=b)
            layers.append(l)
        return ModelGraph(self.input_shape, layers)

    def astype(self, dtype) -> "ModelGraph":
        return self.with_params({k: (w.astype(dtype), b.astype(dtype)) for k, (w, b) in self.params().items()})

    def conv_digest(self):
        """SHA-256 over every conv/shortcut weight and bias (freeze checks)."""
        h = hashlib.sha256()
        for l in self.layers:
            if l.kind in CONV_KINDS:
                h.update(l.id.encode())
                h.update(np.ascontiguousarray(l.weights).tobytes())
                h.update(np.ascontiguousarray(l.bias).tobytes())
        return h.hexdigest()

    @cached_property
    def shapes(self):
        return infer_shapes(self, (1,) + self.input_shape)

    @cached_property
    def channel_units(self):
        return _channel_units(self)

    @property
    def coupling_groups(self):
        return [CouplingGroup(u.members, u.stat_source) for u in self.channel_units if len(u.members) > 1]

    def unit_of(self, layer_id) -> ChannelUnit:
        for unit in self.channel_units:
            if layer_id in unit.members:
                return unit
        raise GraphError(f"layer {layer_id!r} is not a prunable conv layer")


# ---------------------------------------------------------------------------
# shape inference

def _layer_out_shape(layer, in_shapes):
    s = in_shapes[0]
    p = layer.params
    if layer.kind in CONV_KINDS:
        if len(s) != 4:
            raise ShapeError("conv expects a rank-4 input", layer=layer.id, dim="rank", expected=4, actual=len(s))
        D, C, k, k2 = layer.weights.shape
        if C != s[1]:
            raise ShapeError("conv input channels mismatch", layer=layer.id, dim="C", expected=C, actual=s[1])
        if k != k2 or k != p.get("k", k):
            raise ShapeError("kernel size disagrees with params", layer=layer.id, dim="k",
                             expected=p.get("k"), actual=(k, k2))
        if layer.bias.shape != (D,):
            raise ShapeError("bias length mismatch", layer=layer.id, dim="D", expected=D, actual=layer.bias.shape)
        stride, pad = p.get("stride", 1), p.get("pad", 0)
        Ho = T.conv_output_size(s[2], k, stride, pad)
        Wo = T.conv_output_size(s[3], k, stride, pad)
        if Ho < 1 or Wo < 1:
            raise ShapeError("conv output would be empty", layer=layer.id, dim="H", expected=">=1", actual=Ho)
        return (s[0], D, Ho, Wo)
    if layer.kind == RELU:
        return s
    if layer.kind == MAXPOOL:
        if len(s) != 4:
            raise ShapeError("maxpool expects a rank-4 input", layer=layer.id, dim="rank", expected=4, actual=len(s))
        w = p["window"]
        st = p.get("stride", w)
        if w > s[2] or w > s[3]:
            raise ShapeError("pool window larger than input", layer=layer.id, dim="H",
                             expected=f"<={min(s[2], s[3])}", actual=w)
        return (s[0], s[1], (s[2] - w) // st + 1, (s[3] - w) // st + 1)
    if layer.kind == GAP:
        if len(s) != 4:
            raise ShapeError("GAP expects a rank-4 input", layer=layer.id, dim="rank", expected=4, actual=len(s))
        return (s[0], s[1])
    if layer.kind == FLATTEN:
        return (s[0], int(np.prod(s[1:])))
    if layer.kind == DENSE:
        if len(s) != 2:
            raise ShapeError("dense expects a rank-2 input", layer=layer.id, dim="rank", expected=2, actual=len(s))
        O, F = layer.weights.shape
        if F != s[1]:
            raise ShapeError("dense input features mismatch", layer=layer.id, dim="F", expected=F, actual=s[1])
        if layer.bias.shape != (O,):
            raise ShapeError("bias length mismatch", layer=layer.id, dim="O", expected=O, actual=layer.bias.shape)
        return (s[0], O)
    if layer.kind == SOFTMAX:
        if len(s) != 2:
            raise ShapeError("softmax expects a rank-2 input", layer=layer.id, dim="rank", expected=2, actual=len(s))
        return s
    if layer.kind == ADD:
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError("residual operands differ in shape", layer=layer.id, dim="shape",
                             expected=in_shapes[0], actual=in_shapes[1])
        return s
    raise GraphError(f"unknown kind {layer.kind}")


def infer_shapes(graph: ModelGraph, input_shape):
    """Per-layer output shapes (batch dimension included) for ``input_shape``."""
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) != 4:
        raise ShapeError("input shape must be rank 4 (N, C, H, W)", dim="rank", expected=4, actual=len(input_shape))
    if input_shape[1:] != graph.input_shape:
        raise ShapeError("input shape disagrees with the graph", layer=INPUT, dim="CHW",
                         expected=graph.input_shape, actual=input_shape[1:])
    shapes = {INPUT: input_shape}
    for layer in graph.layers:
        shapes[layer.id] = _layer_out_shape(layer, [shapes[i] for i in layer.inputs])
    return shapes


# ---------------------------------------------------------------------------
# channel spaces

def _channel_units(graph):
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb, key=order.get)] = min(ra, rb, key=order.get)

    order = {INPUT: -1}
    parent[INPUT] = INPUT
    for i, layer in enumerate(graph.layers):
        order[layer.id] = i
        if layer.kind in CONV_KINDS:
            parent[layer.id] = layer.id
        elif layer.kind in PASS_THROUGH and layer.inputs[0] in parent:
            parent[layer.id] = find(layer.inputs[0])
        elif layer.kind == ADD and all(src in parent for src in layer.inputs):
            parent[layer.id] = find(layer.inputs[0])
            union(layer.inputs[0], layer.inputs[1])

    spaces = {}
    for layer in graph.layers:
        if layer.id in parent:
            spaces.setdefault(find(layer.id), []).append(layer)
    units = []
    input_root = find(INPUT)
    for root, members in spaces.items():
        if root == input_root:
            continue  # channels tied to the image input are not prunable
        ids = {l.id for l in members}
        producers = tuple(l.id for l in members if l.kind in CONV_KINDS)
        relus = [l.id for l in members if l.kind == RELU]
        spatial = [l.id for l in members if l.kind not in (GAP, FLATTEN)]
        stat = relus[-1] if relus else spatial[-1]
        consumers = tuple(l.id for l in graph.layers
                          if l.kind in PARAM_KINDS and l.inputs[0] in ids)
        units.append(ChannelUnit(producers, tuple(l.id for l in members), consumers, stat))
    units.sort(key=lambda u: order[u.members[0]])
    return units


# ---------------------------------------------------------------------------
# execution

def _run(graph, x, *, cache=False, retain=False, start=None):
    """Execute the graph.

    ``start=(layer_id, value)`` resumes from a precomputed activation and
    skips every layer at or before that position.
    """
    if x is not None and tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError("batch shape does not match the graph input", layer=INPUT, dim="CHW",
                         expected=graph.input_shape, actual=tuple(x.shape[1:]))
    outs = {INPUT: x}
    first = 0
    if start is not None:
        outs[start[0]] = start[1]
        first = graph.position(start[0]) + 1
    caches = {}
    for layer in graph.layers[first:]:
        ins = [outs[i] for i in layer.inputs]
        a = ins[0]
        p = layer.params
        try:
            if layer.kind in CONV_KINDS:
                y, cols = T.conv2d_forward(a, layer.weights, layer.bias, p.get("stride", 1), p.get("pad", 0),
                                           return_cols=True)
                if cache:
                    caches[layer.id] = (a, cols)
            elif layer.kind == RELU:
                y = T.relu_forward(a)
                if cache:
                    caches[layer.id] = a
            elif layer.kind == MAXPOOL:
                y, arg = T.maxpool2d_forward(a, p["window"], p.get("stride", p["window"]))
                if cache:
                    caches[layer.id] = (arg, a.shape[2], a.shape[3])
            elif layer.kind == GAP:
                y = T.gap_forward(a)
                if cache:
                    caches[layer.id] = a.shape[2:]
            elif layer.kind == FLATTEN:
                y = a.reshape(a.shape[0], -1)
                if cache:
                    caches[layer.id] = a.shape
            elif layer.kind == DENSE:
                y = T.dense_forward(a, layer.weights, layer.bias)
                if cache:
                    caches[layer.id] = a
            elif layer.kind == SOFTMAX:
                y = a  # predictions and the loss work on logits
            elif layer.kind == ADD:
                if ins[0].shape != ins[1].shape:
                    raise ShapeError("residual operands differ in shape", dim="shape",
                                     expected=ins[0].shape, actual=ins[1].shape)
                y = (ins[0] + ins[1]).astype(ins[0].dtype, copy=False)
        except ShapeError as exc:
            if exc.layer is None:
                exc.layer = layer.id
                exc.args = (f"{exc.args[0]} (layer={layer.id})",)
            raise
        outs[layer.id] = y
    return outs, caches


def forward(graph: ModelGraph, batch, retain=False):
    """Run ``batch`` through the graph.

    Returns ``(logits, record)``.  ``record`` maps layer ids to outputs:
    every layer when ``retain`` is True, the listed ids when it is a
    collection, nothing when False.
    """
    outs, _ = _run(graph, batch)
    logits = outs[graph.output_id]
    if retain is True:
        record = {k: v for k, v in outs.items() if k != INPUT}
    elif retain:
        record = {k: outs[k] for k in retain}
    else:
        record = {}
    return logits, record


def _needs_grad(graph, trainable):
    needs = set()
    for layer in graph.layers:
        if layer.id in trainable or any(i in needs for i in layer.inputs):
            needs.add(layer.id)
    return needs


def loss_and_grads(graph: ModelGraph, batch, labels, trainable=None, start=None):
    """Mean cross-entropy, parameter gradients and logits for one batch.

    ``trainable`` limits which layers receive gradients (all parameterised
    layers by default); backpropagation stops where nothing upstream is
    trainable.
    """
    trainable = set(graph.param_ids() if trainable is None else trainable)
    outs, caches = _run(graph, batch, cache=True, start=start)
    logits = outs[graph.output_id]
    loss, g = T.softmax_xent(logits, labels)
    needs = _needs_grad(graph, trainable)
    grads_out = {graph.output_id: g}
    param_grads = {}
    first = graph.position(start[0]) + 1 if start is not None else 0
    for layer in reversed(graph.layers[first:]):
        g = grads_out.pop(layer.id, None)
        if g is None or layer.id not in needs:
            continue
        p = layer.params
        want_in = any(i in needs for i in layer.inputs)
        gin = None
        if layer.kind in CONV_KINDS:
            a, cols = caches[layer.id]
            gin, gw, gb = T.conv2d_backward(g, a, layer.weights, p.get("stride", 1), p.get("pad", 0),
                                            cols=cols, need_input_grad=want_in)
            if layer.id in trainable:
                param_grads[layer.id] = (gw, gb)
        elif layer.kind == DENSE:
            gin, gw, gb = T.dense_backward(g, caches[layer.id], layer.weights, need_input_grad=want_in)
            if layer.id in trainable:
                param_grads[layer.id] = (gw, gb)
        elif layer.kind == RELU:
            gin = T.relu_backward(g, caches[layer.id]) if want_in else None
        elif layer.kind == MAXPOOL:
            arg, H, W = caches[layer.id]
            gin = T.maxpool2d_backward(g, arg, H, W) if want_in else None
        elif layer.kind == GAP:
            H, W = caches[layer.id]
            gin = T.gap_backward(g, H, W) if want_in else None
        elif layer.kind == FLATTEN:
            gin = g.reshape(caches[layer.id])
        elif layer.kind == SOFTMAX:
            gin = g
        elif layer.kind == ADD:
            for src in layer.inputs:
                if src in needs:
                    _accumulate(grads_out, src, g)
            continue
        if gin is not None and layer.inputs[0] in needs:
            _accumulate(grads_out, layer.inputs[0], gin)
    return loss, param_grads, logits


def _accumulate(store, key, g):
    if key in store:
        store[key] = store[key] + g
    else:
        store[key] = g


# ---------------------------------------------------------------------------
# construction helpers

def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def conv_layer(rng, layer_id, in_ch, out_ch, k=3, stride=1, pad=None, inputs=(), kind=CONV):
    pad = k // 2 if pad is None else pad
    w = kaiming_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k)
    return LayerSpec(layer_id, kind, tuple(inputs), {"k": k, "stride": stride, "pad": pad, "out_channels": out_ch},
                     w, np.zeros(out_ch, np.float32))


def dense_layer(rng, layer_id, in_f, out_f, inputs=()):
    w = kaiming_uniform(rng, (out_f, in_f), in_f)
    return LayerSpec(layer_id, DENSE, tuple(inputs), {"out_features": out_f}, w, np.zeros(out_f, np.float32))


def vgg_style(input_shape=(1, 32, 32), blocks=((8, 8), (16, 16), (32, 32)), num_classes=8,
              head="gap", fc_width=64, seed=0) -> ModelGraph:
    """VGG-like chain: conv blocks separated by 2x2 max pooling.

    Layer ids follow the ``conv<block>_<index>`` convention.  ``head="fc"``
    ends in flatten -> fc6 -> fc7 -> fc8 -> softmax, ``head="gap"`` in
    GAP -> fc8 -> softmax.
    """
    rng = np.random.default_rng(seed)
    C, H, W = input_shape
    layers = []
    ch = C
    for b, widths in enumerate(blocks, start=1):
        for i, width in enumerate(widths, start=1):
            layers.append(conv_layer(rng, f"conv{b}_{i}", ch, width))
            layers.append(LayerSpec(f"relu{b}_{i}", RELU))
            ch = width
        layers.append(LayerSpec(f"pool{b}", MAXPOOL, params={"window": 2, "stride": 2}))
        H, W = H // 2, W // 2
    if head == "gap":
        layers += [LayerSpec("gap", GAP), dense_layer(rng, "fc8", ch, num_classes)]
    elif head == "fc":
        layers += [
            LayerSpec("flatten", FLATTEN),
            dense_layer(rng, "fc6", ch * H * W, fc_width), LayerSpec("relu6", RELU),
            dense_layer(rng, "fc7", fc_width, fc_width), LayerSpec("relu7", RELU),
            dense_layer(rng, "fc8", fc_width, num_classes),
        ]
    else:
        raise GraphError(f"unknown head {head!r}")
    layers.append(LayerSpec("softmax", SOFTMAX))
    return ModelGraph(input_shape, layers)


def resnet_style(input_shape=(1, 16, 16), stem=8, stages=((2, 4, 16, 1), (2, 8, 32, 2)),
                 num_classes=8, seed=0) -> ModelGraph:
    """Bottleneck residual network.

    ``stages`` holds ``(blocks, mid_channels, out_channels, stride)``.  The
    first block of every stage uses a 1x1 projection shortcut, later blocks
    an identity skip, so each stage forms one coupling group.
    """
    rng = np.random.default_rng(seed)
    C = input_shape[0]
    layers = [conv_layer(rng, "conv1", C, stem), LayerSpec("relu1", RELU)]
    prev, ch = "relu1", stem
    for s, (blocks, mid, out, stride) in enumerate(stages, start=2):
        for b in range(blocks):
            tag = f"res{s}{chr(ord('a') + b)}"
            st = stride if b == 0 else 1
            layers += [
                conv_layer(rng, f"{tag}_conv1", ch, mid, k=1, inputs=(prev,)),
                LayerSpec(f"{tag}_relu1", RELU),
                conv_layer(rng, f"{tag}_conv2", mid, mid, k=3, stride=st),
                LayerSpec(f"{tag}_relu2", RELU),
                conv_layer(rng, f"{tag}_conv3", mid, out, k=1),
            ]
            if b == 0:
                layers.append(conv_layer(rng, f"{tag}_proj", ch, out, k=1, stride=st, inputs=(prev,),
                                         kind=SHORTCUT))
                skip = f"{tag}_proj"
            else:
                skip = prev
            layers += [LayerSpec(f"{tag}_add", ADD, (f"{tag}_conv3", skip)),
                       LayerSpec(f"{tag}_relu", RELU)]
            prev, ch = f"{tag}_relu", out
    layers += [LayerSpec("gap", GAP, (prev,)), dense_layer(rng, "fc", ch, num_classes),
               LayerSpec("softmax", SOFTMAX)]
    return ModelGraph(input_shape, layers)


def replace_head_with_gap(graph: ModelGraph, seed=0) -> ModelGraph:
    """Swap a flatten -> dense... -> softmax head for GAP -> dense -> softmax.

    The classifier is re-initialised (its input width changes); every conv
    layer is carried over untouched.  A graph that already ends in
    GAP -> dense -> softmax is returned as is.
    """
    layers = list(graph.layers)
    kinds = [l.kind for l in layers]
    if len(layers) >= 3 and kinds[-3:] == [GAP, DENSE, SOFTMAX]:
        return graph
    if kinds[-1] != SOFTMAX or kinds[-2] != DENSE or FLATTEN not in kinds:
        raise GraphError("head must be flatten -> dense ... -> dense -> softmax")
    f = len(kinds) - 1 - kinds[::-1].index(FLATTEN)
    for layer in layers[f + 1:-1]:
        if layer.kind not in (DENSE, RELU):
            raise GraphError(f"unexpected {layer.kind} layer {layer.id!r} in the dense head")
    for layer in layers[f + 1:]:
        if len(graph.consumers(layer.id)) > 1:
            raise GraphError(f"head layer {layer.id!r} has more than one consumer")
    trunk_out = layers[f].inputs[0]
    channels = graph.shapes[trunk_out][1]
    classifier, softmax = layers[-2], layers[-1]
    classes = classifier.weights.shape[0]
    rng = np.random.default_rng(seed)
    gap_id = "gap" if "gap" not in graph else f"{layers[f].id}_gap"
    new_tail = [
        LayerSpec(gap_id, GAP, (trunk_out,)),
        dense_layer(rng, classifier.id, channels, classes, inputs=(gap_id,)),
        softmax.replace(inputs=(classifier.id,)),
    ]
    return ModelGraph(graph.input_shape, layers[:f] + new_tail)
