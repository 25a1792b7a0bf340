import numpy as np
import pytest

from lnprune.data import Dataset, SynthSpec, synth_generate
from lnprune.errors import DataError, TrainingDiverged
from lnprune.graph import forward, vgg_style
from lnprune.serialize import dumps, loads
from lnprune.train import (TrainConfig, conv_frozen, evaluate, finetune_two_stage, head_layers, sgd_step,
                           train_from_scratch, train_stage)


def small_net(ds, seed=0, **kw):
    return vgg_style(ds.image_shape, ((4,), (6,)), num_classes=ds.class_count, seed=seed, **kw)


def test_sgd_plain_step():
    w = np.array([1.0])
    params, _ = sgd_step({"l": (w, w)}, {"l": (np.array([0.5]), np.array([0.0]))}, 0.1, 0.0, {})
    assert params["l"][0][0] == pytest.approx(0.95)
    assert params["l"][1][0] == 1.0


def test_sgd_momentum_unrolled():
    w0, g1, g2, lr, m = 2.0, 0.3, -0.7, 0.1, 0.9
    p = {"l": (np.array([w0]), np.array([0.0]))}
    p, v = sgd_step(p, {"l": (np.array([g1]), np.array([0.0]))}, lr, m, {})
    p, v = sgd_step(p, {"l": (np.array([g2]), np.array([0.0]))}, lr, m, v)
    v1 = -lr * g1
    v2 = m * v1 - lr * g2
    assert p["l"][0][0] == pytest.approx(w0 + v1 + v2, abs=1e-15)
    assert v["l"][0][0] == pytest.approx(v2, abs=1e-15)


def test_sgd_leaves_inputs_untouched():
    w = np.ones(3)
    params = {"l": (w, w)}
    sgd_step(params, {"l": (np.ones(3), np.ones(3))}, 0.5, 0.9, {})
    assert np.all(w == 1)


def test_evaluate_examples(tiny_synth):
    train, _, _ = tiny_synth
    g = small_net(train)
    one = train.subset([0])
    pred = np.argmax(forward(g, one.images)[0], axis=1)[0]
    assert evaluate(g, Dataset(one.images, np.array([pred]), train.class_count)) == 1.0
    assert evaluate(loads(dumps(g)), train) == evaluate(g, train)
    with pytest.raises(DataError):
        evaluate(g, train.subset([]))


def test_untrained_accuracy_near_chance():
    C = 8
    _, _, test = synth_generate(SynthSpec(class_count=C, size=16, per_class=(1, 1, 100), sigma=0.3, seed=1))
    rng = np.random.default_rng(2)
    g = vgg_style(test.image_shape, ((4,),), num_classes=C, seed=3)
    # random-logit net: classifier weights drawn independently of the data
    g = g.with_params({"fc8": (rng.standard_normal((C, 4)).astype(np.float32),
                               rng.standard_normal(C).astype(np.float32))})
    acc = evaluate(g, Dataset(test.images, rng.integers(0, C, test.size), C))
    sd = np.sqrt((1 / C) * (1 - 1 / C) / test.size)
    assert abs(acc - 1 / C) <= 3 * sd


def test_stage_one_freezes_convs(tiny_synth):
    train, val, _ = tiny_synth
    g = small_net(train, head="fc", fc_width=8)
    assert head_layers(g) == ["fc6", "fc7", "fc8"]
    cfg = TrainConfig(max_epochs=2, patience=2, batch_size=8)
    out, hist = finetune_two_stage(g, train, val, cfg)
    assert conv_frozen(hist)
    assert hist["conv_digest_before_stage1"] == g.conv_digest()
    assert len(hist["stage1"]["val_acc"]) >= 2


def test_zero_lr_is_noop(tiny_synth):
    train, val, _ = tiny_synth
    g = small_net(train)
    out, hist = finetune_two_stage(g, train, val, TrainConfig(lr_stage1=0, lr_stage2=0, max_epochs=2, patience=5))
    assert dumps(out) == dumps(g)
    accs = hist["stage1"]["val_acc"] + hist["stage2"]["val_acc"]
    assert len(set(accs)) == 1


def test_patience_stops_and_keeps_best(tiny_synth):
    train, val, _ = tiny_synth
    g = small_net(train)
    out, hist = train_stage(g, train, val, g.param_ids(), 0.05, TrainConfig(max_epochs=30, patience=1, seed=1))
    accs = hist.val_acc
    assert len(accs) < 31
    assert evaluate(out, val) == max(accs)
    assert hist.val_acc[hist.best_epoch] == max(accs)


def test_training_is_deterministic(tiny_synth):
    train, val, _ = tiny_synth
    g = small_net(train)
    cfg = TrainConfig(max_epochs=2, patience=2, seed=4)
    a, _ = finetune_two_stage(g, train, val, cfg)
    b, _ = finetune_two_stage(g, train, val, cfg)
    assert dumps(a) == dumps(b)


def test_augmented_training_runs(tiny_synth):
    train, val, _ = tiny_synth
    g = vgg_style((1, 10, 10), ((4,), (6,)), num_classes=train.class_count)
    out, _ = train_stage(g, train, val, g.param_ids(), 0.02, TrainConfig(max_epochs=1, crop=10, mirror=True))
    assert 0 <= evaluate(out, val) <= 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_round(tiny_synth):
    train, val, _ = tiny_synth
    g = small_net(train)
    with pytest.raises(TrainingDiverged, match="round 3"):
        finetune_two_stage(g, train, val, TrainConfig(lr_stage1=1e30, max_epochs=3), round_index=3)


def test_finetune_helps_on_toy_task():
    gains = []
    for seed in range(5):
        train, val, _ = synth_generate(SynthSpec(class_count=4, size=16, per_class=(30, 15, 1), sigma=0.1,
                                                 seed=seed))
        g = small_net(train, seed=seed)
        before = evaluate(g, val)
        out, _ = finetune_two_stage(g, train, val, TrainConfig(max_epochs=3, patience=2, seed=seed))
        gains.append(evaluate(out, val) - before)
    assert np.mean(gains) >= 0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_stage1=-1)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)


def test_train_from_scratch_improves(tiny_synth):
    train, val, _ = tiny_synth
    g = small_net(train)
    out, hist = train_from_scratch(g, train, val, lr=0.05, cfg=TrainConfig(max_epochs=5, patience=5))
    assert max(hist.val_acc) >= hist.val_acc[0]
