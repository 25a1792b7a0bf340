import numpy as np
import pytest

from lnprune import backend
from lnprune.data import SynthSpec, synth_generate
from lnprune.graph import (ADD, DENSE, FLATTEN, GAP, MAXPOOL, RELU, SHORTCUT, SOFTMAX, LayerSpec, ModelGraph,
                           conv_layer, dense_layer)

# Kernel count per VGG16 conv layer after each pruning round (rounds 0..9).
VGG16_SCHEDULE = {
    "conv1_1": [64, 61, 58, 55, 52, 49, 46, 43, 40, 40],
    "conv1_2": [64, 61, 58, 55, 52, 49, 46, 43, 40, 40],
    "conv2_1": [128, 119, 110, 101, 92, 83, 74, 65, 56, 46],
    "conv2_2": [128, 119, 110, 101, 92, 83, 74, 65, 56, 46],
    "conv3_1": [256, 231, 206, 181, 156, 131, 106, 81, 56, 42],
    "conv3_2": [256, 231, 206, 181, 156, 131, 106, 81, 56, 42],
    "conv3_3": [256, 231, 206, 181, 156, 131, 106, 81, 56, 42],
    "conv4_1": [512, 384, 288, 216, 162, 122, 91, 68, 51, 42],
    "conv4_2": [512, 384, 288, 216, 162, 122, 91, 68, 51, 42],
    "conv4_3": [512, 384, 288, 216, 162, 122, 91, 68, 51, 42],
    "conv5_1": [512, 384, 288, 216, 162, 122, 91, 68, 51, 42],
    "conv5_2": [512, 384, 288, 216, 162, 122, 91, 68, 51, 42],
    "conv5_3": [512, 384, 288, 216, 162, 122, 91, 68, 51, 42],
}
VGG16_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


def scaled_vgg16_schedule(divisor=8):
    return {k: [-(-v // divisor) for v in col] for k, col in VGG16_SCHEDULE.items()}


def scaled_vgg16_blocks(divisor=8):
    return tuple(tuple(-(-c // divisor) for c in block) for block in VGG16_BLOCKS)


@pytest.fixture(params=backend.available())
def kernel_backend(request):
    with backend.use_backend(request.param):
        yield request.param


def numerical_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` w.r.t. every element of float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a, n, floor=1e-7):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# ---------------------------------------------------------------------------
# random graphs

def random_chain(rng, input_shape=None):
    C = int(rng.integers(1, 4))
    size = int(rng.choice([6, 8, 10]))
    input_shape = input_shape or (C, size, size)
    layers, ch, H = [], input_shape[0], input_shape[1]
    n_blocks = int(rng.integers(1, 4))
    for b in range(n_blocks):
        for i in range(int(rng.integers(1, 3))):
            k = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 1, 2])) if H >= 4 else 1
            out = int(rng.integers(2, 7))
            layers.append(conv_layer(rng, f"c{b}_{i}", ch, out, k=k, stride=stride, pad=k // 2))
            layers.append(LayerSpec(f"r{b}_{i}", RELU))
            H = (H + 2 * (k // 2) - k) // stride + 1
            ch = out
        if H >= 2 and rng.random() < 0.6:
            layers.append(LayerSpec(f"p{b}", MAXPOOL, params={"window": 2, "stride": 2}))
            H //= 2
    classes = int(rng.integers(2, 5))
    if rng.random() < 0.5:
        layers += [LayerSpec("gap", GAP), dense_layer(rng, "fc", ch, classes)]
    else:
        hidden = int(rng.integers(3, 8))
        layers += [LayerSpec("flat", FLATTEN), dense_layer(rng, "fc1", ch * H * H, hidden),
                   LayerSpec("fr", RELU), dense_layer(rng, "fc", hidden, classes)]
    layers.append(LayerSpec("sm", SOFTMAX))
    return _randomize_bias(rng, ModelGraph(input_shape, layers))


def random_residual(rng):
    C = int(rng.integers(1, 3))
    size = int(rng.choice([6, 8]))
    stem = int(rng.integers(2, 6))
    layers = [conv_layer(rng, "stem", C, stem), LayerSpec("stem_relu", RELU)]
    prev, ch = "stem_relu", stem
    for s in range(int(rng.integers(1, 3))):
        out = int(rng.integers(2, 7))
        for b in range(int(rng.integers(1, 3))):
            tag = f"s{s}b{b}"
            mid = int(rng.integers(2, 5))
            stride = 2 if (b == 0 and s > 0) else 1
            layers += [
                conv_layer(rng, f"{tag}_c1", ch, mid, k=1, inputs=(prev,)), LayerSpec(f"{tag}_r1", RELU),
                conv_layer(rng, f"{tag}_c2", mid, mid, k=3, stride=stride), LayerSpec(f"{tag}_r2", RELU),
                conv_layer(rng, f"{tag}_c3", mid, out, k=1),
            ]
            if b == 0:
                layers.append(conv_layer(rng, f"{tag}_proj", ch, out, k=1, stride=stride, inputs=(prev,),
                                         kind=SHORTCUT))
                skip = f"{tag}_proj"
            else:
                skip = prev
            layers += [LayerSpec(f"{tag}_add", ADD, (f"{tag}_c3", skip)), LayerSpec(f"{tag}_relu", RELU)]
            prev, ch = f"{tag}_relu", out
    classes = int(rng.integers(2, 5))
    layers += [LayerSpec("gap", GAP, (prev,)), dense_layer(rng, "fc", ch, classes), LayerSpec("sm", SOFTMAX)]
    return _randomize_bias(rng, ModelGraph((C, size, size), layers))


def _randomize_bias(rng, graph):
    return graph.with_params({k: (w, rng.uniform(-0.2, 0.2, b.shape).astype(np.float32))
                              for k, (w, b) in graph.params().items()})


def random_targets(rng, graph, allow_noop=True):
    targets = {}
    for unit in graph.channel_units:
        n = graph.layer(unit.key).weights.shape[0]
        lo = 1
        hi = n if allow_noop else max(1, n - 1)
        keep = int(rng.integers(lo, hi + 1))
        for m in unit.members:
            targets[m] = keep
    return targets


def random_scores(rng, graph):
    scores = {}
    for unit in graph.channel_units:
        vec = rng.random(graph.layer(unit.key).weights.shape[0])
        for m in unit.members:
            scores[m] = vec
    return scores


@pytest.fixture(scope="session")
def tiny_synth():
    return synth_generate(SynthSpec(class_count=4, size=12, per_class=(12, 6, 6), sigma=0.1, seed=3))


# ---------------------------------------------------------------------------
# acceptance summary

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
