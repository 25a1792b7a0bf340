"""SGD with momentum, patience-based early stopping and two-stage fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, augment, center_crop
from .errors import DataError, TrainingDiverged
from .graph import DENSE, ModelGraph, _run, loss_and_grads

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_stage1: float = 0.05
    lr_stage2: float = 0.005
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 10  # per stage
    patience: int = 5
    seed: int = 0
    crop: int | None = None  # random-crop size; None disables augmentation
    mirror: bool = False

    def __post_init__(self):
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ValueError("learning rates must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class StageHistory:
    name: str
    val_acc: list = field(default_factory=list)  # entry 0 is before training
    loss: list = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self):
        return asdict(self)


def sgd_step(params, grads, lr, momentum, velocity):
    """One momentum step: ``v = momentum*v - lr*g``, ``w = w + v``.

    ``params``/``grads``/``velocity`` are ``{layer_id: (weights, bias)}``; new
    dicts are returned and the inputs are left untouched.  Layers missing
    from ``grads`` are not updated.
    """
    new_params, new_vel = dict(params), dict(velocity)
    for key, g_pair in grads.items():
        v_pair = velocity.get(key) or tuple(np.zeros_like(g) for g in g_pair)
        updated, vel = [], []
        for w, g, v in zip(params[key], g_pair, v_pair):
            v = (momentum * v - lr * g).astype(w.dtype, copy=False)
            updated.append((w + v).astype(w.dtype, copy=False))
            vel.append(v)
        new_params[key] = tuple(updated)
        new_vel[key] = tuple(vel)
    return new_params, new_vel


def predict(graph: ModelGraph, images, batch_size=256):
    preds = []
    for s in range(0, images.shape[0], batch_size):
        outs, _ = _run(graph, images[s:s + batch_size])
        preds.append(np.argmax(outs[graph.output_id], axis=1))
    return np.concatenate(preds)


def _eval_images(graph, images):
    size = graph.input_shape[1]
    return images if images.shape[2] == size else center_crop(images, size)


def evaluate(graph: ModelGraph, dataset: Dataset, batch_size=256) -> float:
    """Top-1 accuracy in [0, 1]."""
    if dataset.size == 0:
        raise DataError("cannot evaluate on an empty dataset")
    preds = predict(graph, _eval_images(graph, dataset.images), batch_size)
    return float(np.mean(preds == dataset.labels))


def _cut_point(graph, trainable):
    """Last layer before every trainable layer that alone feeds the rest of the graph.

    Returns ``None`` when the frozen prefix cannot be cached as one tensor.
    """
    positions = [graph.position(t) for t in trainable]
    if not positions:
        return None
    first = min(positions)
    for cut in range(first - 1, -1, -1):
        cut_id = graph.layers[cut].id
        later = graph.layers[cut + 1:]
        allowed = {cut_id} | {l.id for l in later}
        if all(src in allowed for l in later for src in l.inputs):
            return cut_id
    return None


def train_stage(graph: ModelGraph, train: Dataset, val: Dataset, trainable, lr, cfg: TrainConfig,
                name="train", rng_key=0):
    """Train ``trainable`` layers until validation accuracy stops improving.

    Returns the best-validation snapshot (the input graph if nothing beat
    the starting accuracy) and the stage history.
    """
    trainable = [t for t in graph.param_ids() if t in set(trainable)]
    history = StageHistory(name)
    best_acc = evaluate(graph, val)
    history.val_acc.append(best_acc)
    best_graph = graph
    if not trainable or cfg.max_epochs == 0:
        return graph, history
    rng = np.random.default_rng([cfg.seed, rng_key])
    params = graph.params()
    velocity = {}
    cut = _cut_point(graph, trainable) if cfg.crop is None else None
    cached = None
    if cut is not None:
        # frozen prefix: compute its output once for the whole training set
        cached = np.concatenate([_run(graph, train.images[s:s + 256])[0][cut]
                                 for s in range(0, train.size, 256)])
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train.size)
        losses = []
        for s in range(0, train.size, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if cached is not None:
                x, start = None, (cut, cached[idx])
            else:
                x, start = train.images[idx], None
                if cfg.crop is not None:
                    x = augment(x, cfg.crop, cfg.mirror, seed=rng.integers(2**63))
            loss, grads, _ = loss_and_grads(graph, x, train.labels[idx], trainable, start=start)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{name}: loss became {loss} in epoch {epoch}")
            params, velocity = sgd_step(params, grads, lr, cfg.momentum, velocity)
            graph = graph.with_params({k: params[k] for k in trainable})
            losses.append(loss)
        acc = evaluate(graph, val)
        history.val_acc.append(acc)
        history.loss.append(float(np.mean(losses)))
        log.debug("%s epoch %d loss %.4f val %.4f", name, epoch, history.loss[-1], acc)
        if acc > best_acc:
            best_acc, best_graph, stale = acc, graph, 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best_graph, history


def head_layers(graph: ModelGraph):
    """Parameterised layers after the last convolution."""
    last_conv = max(graph.position(c) for c in graph.conv_ids())
    return [l.id for l in graph.layers[last_conv + 1:] if l.kind == DENSE]


def finetune_two_stage(graph: ModelGraph, train: Dataset, val: Dataset, cfg: TrainConfig, round_index=0):
    """Stage 1 trains only the head with convolutions frozen, stage 2 trains everything.

    History records the conv digest before and after stage 1 so callers can
    check the freeze.
    """
    if train.size == 0 or val.size == 0:
        raise DataError("fine-tuning needs non-empty train and val sets")
    digest_before = graph.conv_digest()
    try:
        g1, h1 = train_stage(graph, train, val, head_layers(graph), cfg.lr_stage1, cfg,
                             name=f"round {round_index} stage 1", rng_key=2 * round_index)
        digest_after = g1.conv_digest()
        g2, h2 = train_stage(g1, train, val, g1.param_ids(), cfg.lr_stage2, cfg,
                             name=f"round {round_index} stage 2", rng_key=2 * round_index + 1)
    except TrainingDiverged as exc:
        raise TrainingDiverged(f"round {round_index}: {exc}") from exc
    return g2, {
        "stage1": h1.to_dict(),
        "stage2": h2.to_dict(),
        "conv_digest_before_stage1": digest_before,
        "conv_digest_after_stage1": digest_after,
    }


def train_from_scratch(graph: ModelGraph, train: Dataset, val: Dataset, lr=0.01, cfg: TrainConfig | None = None):
    """Single-stage training of every parameter (used for baseline models)."""
    cfg = cfg or TrainConfig()
    return train_stage(graph, train, val, graph.param_ids(), lr, cfg, name="pretrain", rng_key=10**6)


def conv_frozen(history) -> bool:
    return history["conv_digest_before_stage1"] == history["conv_digest_after_stage1"]


__all__ = ["TrainConfig", "StageHistory", "sgd_step", "evaluate", "predict", "train_stage",
           "finetune_two_stage", "train_from_scratch", "head_layers", "conv_frozen"]
