"""End-to-end acceptance suite.

Each test checks one acceptance criterion at its stated tolerance and
records a single PASS/FAIL line, printed together at the end of the run.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import json

import numpy as np
import pytest

from lnprune import tensor as T
from lnprune.cli import main as cli_main
from lnprune.data import Dataset, SynthSpec, synth_generate
from lnprune.graph import FLATTEN, forward, loss_and_grads, vgg_style
from lnprune.norms import (L1, L2, LINF, NormOrder, collect_stats, correlation_report, feature_norm,
                           feature_norms, layerwise_schedule, uniform_schedule)
from lnprune.pipeline import PipelineConfig, geometric_rounds, run_pipeline
from lnprune.pruner import PrunePlan, apply_plan, build_plan, masked_graph, rank_kernels
from lnprune.serialize import dumps, loads, save_model
from lnprune.train import TrainConfig, evaluate, train_from_scratch

from conftest import (ACCEPTANCE_LINES, max_rel_error, numerical_grad, random_chain, random_residual,
                      random_scores, random_targets, scaled_vgg16_schedule, scaled_vgg16_blocks)

pytestmark = pytest.mark.acceptance

# criterion-ordering benchmark
BENCH_SEEDS = range(5)
BENCH_SYNTH = dict(class_count=8, size=32, per_class=(60, 20, 40), sigma=0.2, shift=2)
BENCH_PRETRAIN = TrainConfig(max_epochs=80, patience=12)
BENCH_PRETRAIN_LR = 0.005
BENCH_FINETUNE = TrainConfig()  # same default budget for both criteria
BENCH_KEEP_FRACTION = 0.4
BENCH_ROUNDS = 4


def report(number, title, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------

def test_criterion_01_surgery_matches_mask_oracle():
    worst, n = 0.0, 0
    rng = np.random.default_rng(20240101)
    for i in range(120):
        g = random_chain(rng) if i % 2 == 0 else random_residual(rng)
        plan = build_plan(g, random_scores(rng, g), random_targets(rng, g, allow_noop=False))
        x = rng.random((3,) + g.input_shape, dtype=np.float32)
        a, _ = forward(apply_plan(g, plan), x)
        b, _ = forward(masked_graph(g, plan), x)
        worst = max(worst, float(np.max(np.abs(a.astype(np.float64) - b))))
        n += 1
    report(1, "surgery vs mask oracle", worst <= 1e-5, f"{n} chain/residual triples, max |dlogit| = {worst:.2e}")


def _fd_cases(rng):
    """(op name, analytic gradient, numeric gradient) for one random instance of every op."""
    cases = []
    N, C, H = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(4, 7))
    k, stride = int(rng.choice([1, 3])), int(rng.integers(1, 3))
    pad = k // 2
    D = int(rng.integers(1, 4))
    x = rng.standard_normal((N, C, H, H))
    w = rng.standard_normal((D, C, k, k))
    b = rng.standard_normal(D)
    out = T.conv2d_forward(x, w, b, stride, pad)
    R = rng.standard_normal(out.shape)
    gx, gw, gb = T.conv2d_backward(R, x, w, stride, pad)
    cases.append(("conv/x", gx, numerical_grad(lambda v: np.sum(T.conv2d_forward(v, w, b, stride, pad) * R), x)))
    cases.append(("conv/w", gw, numerical_grad(lambda v: np.sum(T.conv2d_forward(x, v, b, stride, pad) * R), w)))
    cases.append(("conv/b", gb, numerical_grad(lambda v: np.sum(T.conv2d_forward(x, w, v, stride, pad) * R), b)))

    # keep ReLU inputs away from the kink at 0
    z = rng.standard_normal((N, C, H, H))
    z = np.where(np.abs(z) < 1e-2, 0.5, z)
    R = rng.standard_normal(z.shape)
    cases.append(("relu", T.relu_backward(R, z), numerical_grad(lambda v: np.sum(T.relu_forward(v) * R), z)))

    # distinct, well separated values keep every window's argmax unique
    win = int(rng.integers(2, 4))
    m = rng.permutation(N * C * H * H).reshape(N, C, H, H) * 0.01
    pout, arg = T.maxpool2d_forward(m, win, 2)
    R = rng.standard_normal(pout.shape)
    cases.append(("maxpool", T.maxpool2d_backward(R, arg, H, H),
                  numerical_grad(lambda v: np.sum(T.maxpool2d_forward(v, win, 2)[0] * R), m)))

    R = rng.standard_normal((N, C))
    cases.append(("gap", T.gap_backward(R, H, H), numerical_grad(lambda v: np.sum(T.gap_forward(v) * R), x)))

    F, O = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    a, dw, db = rng.standard_normal((N, F)), rng.standard_normal((O, F)), rng.standard_normal(O)
    R = rng.standard_normal((N, O))
    ga, gdw, gdb = T.dense_backward(R, a, dw)
    cases.append(("dense/x", ga, numerical_grad(lambda v: np.sum(T.dense_forward(v, dw, db) * R), a)))
    cases.append(("dense/w", gdw, numerical_grad(lambda v: np.sum(T.dense_forward(a, v, db) * R), dw)))
    cases.append(("dense/b", gdb, numerical_grad(lambda v: np.sum(T.dense_forward(a, dw, v) * R), db)))

    logits = rng.standard_normal((N, O)) * 3
    y = rng.integers(0, O, size=N)
    cases.append(("softmax_xent", T.softmax_xent(logits, y)[1],
                  numerical_grad(lambda v: T.softmax_xent(v, y)[0], logits)))

    # residual add and flatten, checked end to end through the first conv's weights
    for name, make in (("graph/add", random_residual), ("graph/flatten", _flatten_chain)):
        g = make(rng).astype(np.float64)
        xb = rng.random((2,) + g.input_shape)
        yb = rng.integers(0, g.shapes[g.output_id][1], size=2)
        first = g.conv_ids()[0]
        w0, b0 = g.params()[first]
        _, grads, _ = loss_and_grads(g, xb, yb)
        cases.append((name, grads[first][0], numerical_grad(
            lambda v: loss_and_grads(g.with_params({first: (v, b0)}), xb, yb, trainable=())[0], w0, h=1e-5)))
    return cases


def _flatten_chain(rng):
    while True:
        g = random_chain(rng)
        if any(l.kind == FLATTEN for l in g.layers):
            return g


def test_criterion_02_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    worst, counts = {}, {}
    for _ in range(25):
        for name, analytic, numeric in _fd_cases(rng):
            err = max_rel_error(analytic, numeric, floor=1e-6)
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    ok = all(e < 1e-3 for e in worst.values()) and min(counts.values()) >= 20
    top = max(worst, key=worst.get)
    report(2, "finite-difference gradients", ok,
           f"{len(worst)} ops x {min(counts.values())} instances, worst {top} rel err {worst[top]:.2e}")


def test_criterion_03_stats_match_store_then_average():
    rng = np.random.default_rng(3)
    worst, single_exact, nets = 0.0, True, 0
    for i in range(12):
        g = random_chain(rng) if i % 2 == 0 else random_residual(rng)
        ds = Dataset(rng.random((20,) + g.input_shape, dtype=np.float32), np.zeros(20, dtype=np.int64), 1)
        schedule = layerwise_schedule(g)
        n = 8
        stats = collect_stats(g, ds, n, schedule, seed=i, batch_size=3)
        sub = ds.subset(np.random.default_rng(i).permutation(ds.size)[:n])
        _, rec = forward(g, sub.images, retain=True)
        for unit in g.channel_units:
            maps = rec[unit.stat_source]
            order = schedule.order_for(unit.key)
            stored = np.array([[feature_norm(maps[s, c], order) for c in range(maps.shape[1])] for s in range(n)])
            oracle = stored.mean(axis=0)
            worst = max(worst, float(np.max(np.abs(stats.values[unit.key] - oracle) / np.maximum(oracle, 1.0))))
        one = collect_stats(g, ds, 1, schedule, seed=100 + i)
        first = ds.subset(np.random.default_rng(100 + i).permutation(ds.size)[:1])
        _, rec1 = forward(g, first.images, retain=True)
        for unit in g.channel_units:
            maps = rec1[unit.stat_source][0]
            direct = [feature_norm(maps[c], schedule.order_for(unit.key)) for c in range(maps.shape[0])]
            single_exact &= one.values[unit.key].tolist() == direct
        nets += 1
    report(3, "averaged feature-map norm fidelity", worst <= 1e-6 and single_exact,
           f"{nets} nets, max deviation {worst:.2e}, N=1 exact: {single_exact}")


def test_criterion_04_norm_properties():
    rng = np.random.default_rng(4)
    n_maps, mono, homog, rank_ok, layers = 0, True, 0.0, True, 0
    while n_maps < 10_000:
        N, C = int(rng.integers(1, 5)), int(rng.integers(2, 12))
        H = int(rng.integers(1, 9))
        # post-ReLU maps: non-negative, with exact zeros
        maps = np.maximum(rng.standard_normal((N, C, H, H)) * rng.uniform(0.01, 100), 0)
        l1, l2, linf = (feature_norms(maps, o) for o in (L1, L2, LINF))
        mono &= bool(np.all(linf <= l2 * (1 + 1e-12)) and np.all(l2 <= l1 * (1 + 1e-12)))
        c = float(np.exp(rng.uniform(-5, 5)))
        for order in (L1, L2, LINF, NormOrder(3.0)):
            base = feature_norms(maps, order)
            scaled = feature_norms(c * maps, order)
            rel = np.abs(scaled - c * base) / np.maximum(c * base, 1e-300)
            homog = max(homog, float(np.max(np.where(base > 0, rel, 0.0))))
            rank_ok &= rank_kernels(scaled.mean(axis=0)).tolist() == rank_kernels(base.mean(axis=0)).tolist()
        n_maps += N * C
        layers += 1
    ok = mono and homog <= 1e-6 and rank_ok
    report(4, "norm properties", ok, f"{n_maps} maps in {layers} layers, monotone {mono}, "
                                     f"homogeneity err {homog:.1e}, ranking invariant {rank_ok}")


def test_criterion_05_vgg16_schedule_bookkeeping():
    table = scaled_vgg16_schedule()
    train, val, test = synth_generate(SynthSpec(class_count=8, size=32, per_class=(8, 4, 4), sigma=0.1, seed=5))
    g = vgg_style((1, 32, 32), scaled_vgg16_blocks(), num_classes=8, seed=5)
    rounds = [{lid: col[r] for lid, col in table.items()} for r in range(1, 5)]
    cfg = PipelineConfig(rounds=rounds, criterion="fm-layerwise", stats_samples=16,
                         finetune=TrainConfig(max_epochs=1, patience=1), seed=5)
    _, records = run_pipeline(g, cfg, train, val, test)
    exact = all(rec.kernel_counts == targets for rec, targets in zip(records[1:], rounds))
    shrink = all(b.params <= a.params and b.bytes <= a.bytes for a, b in zip(records, records[1:]))
    report(5, "scaled VGG16 keep-count schedule", exact and shrink and len(records) == 5,
           f"counts exact {exact}, params {records[0].params}->{records[-1].params}, "
           f"bytes {records[0].bytes}->{records[-1].bytes}")


def test_criterion_06_dead_kernel_plant():
    train, val, test = synth_generate(SynthSpec(class_count=4, size=16, per_class=(30, 10, 30), sigma=0.1, seed=6))
    g = vgg_style((1, 16, 16), ((8, 8), (12,)), num_classes=4, seed=6)
    g, _ = train_from_scratch(g, train, val, lr=0.02, cfg=TrainConfig(max_epochs=8, patience=3, seed=6))
    planted = {"conv1_2": (1, 5), "conv2_1": (0, 7, 11)}
    params = {}
    for lid, idx in planted.items():
        w, b = g.layer(lid).weights.copy(), g.layer(lid).bias.copy()
        w[list(idx)] = 0
        b[list(idx)] = 0
        params[lid] = (w, b)
    g = g.with_params(params)
    stats = collect_stats(g, train, 50, uniform_schedule(g, L1), seed=0)
    scored_zero = all(np.all(stats.values[lid][list(idx)] == 0) for lid, idx in planted.items())
    pruned = apply_plan(g, PrunePlan(planted))
    probe = test.images[:32]
    diff = float(np.max(np.abs(forward(pruned, probe)[0].astype(np.float64) - forward(g, probe)[0])))
    same_acc = evaluate(pruned, test) == evaluate(g, test)
    report(6, "dead-kernel plant", diff <= 1e-6 and same_acc and scored_zero,
           f"max |dlogit| {diff:.1e}, accuracy unchanged {same_acc}, planted kernels score 0: {scored_zero}")


# ---------------------------------------------------------------------------
# criterion-ordering benchmark shared by criteria 7, 8 and 10

@pytest.fixture(scope="module")
def benchmark():
    runs = []
    for seed in BENCH_SEEDS:
        train, val, test = synth_generate(SynthSpec(seed=seed, **BENCH_SYNTH))
        g = vgg_style(train.image_shape, num_classes=train.class_count, seed=seed)
        pre = TrainConfig(**{**BENCH_PRETRAIN.to_dict(), "seed": seed})
        g, _ = train_from_scratch(g, train, val, lr=BENCH_PRETRAIN_LR, cfg=pre)
        rounds = geometric_rounds(g, BENCH_KEEP_FRACTION, BENCH_ROUNDS)
        result = {"seed": seed, "graph": g, "train": train, "base_acc": evaluate(g, test), "records": {}}
        for crit in ("kernel-l1", "fm-layerwise"):
            ft = TrainConfig(**{**BENCH_FINETUNE.to_dict(), "seed": seed})
            cfg = PipelineConfig(rounds=rounds, criterion=crit, stats_samples=100, finetune=ft, seed=seed)
            _, records = run_pipeline(g, cfg, train, val, test)
            result["records"][crit] = records
        runs.append(result)
    return runs


def test_criterion_07_criterion_ordering(benchmark):
    trained = all(r["base_acc"] >= 0.95 for r in benchmark)
    fm = np.array([r["records"]["fm-layerwise"][-1].test_acc for r in benchmark])
    kl = np.array([r["records"]["kernel-l1"][-1].test_acc for r in benchmark])
    kept = [r["records"]["fm-layerwise"][-1].params / r["records"]["fm-layerwise"][0].params for r in benchmark]
    wins = int(np.sum(fm >= kl))
    ok = trained and wins >= 4 and fm.mean() >= kl.mean() - 0.005
    report(7, "fm-layerwise vs kernel-L1 ordering", ok,
           f"base acc {[round(r['base_acc'], 3) for r in benchmark]}, fm {np.round(fm, 3).tolist()}, "
           f"kernel-l1 {np.round(kl, 3).tolist()}, wins {wins}/5, mean diff {100 * (fm.mean() - kl.mean()):+.2f}pp, "
           f"params kept ~{np.mean(kept):.2f}")


def test_criterion_08_decorrelation(benchmark):
    r = benchmark[0]
    stats = collect_stats(r["graph"], r["train"], 100, uniform_schedule(r["graph"], L1), seed=0)
    rho = correlation_report(stats, r["graph"])
    finite = {k: v for k, v in rho.items() if v is not None}
    best = min(finite, key=lambda k: abs(finite[k]))
    report(8, "feature-map L1 vs kernel L1 decorrelation", abs(finite[best]) < 0.8,
           f"min |rho| {abs(finite[best]):.2f} at {best}; " + ", ".join(f"{k}={v:+.2f}" for k, v in finite.items()))


def test_criterion_09_determinism_and_persistence(tmp_path):
    synth = {"class_count": 4, "size": 16, "per_class": [16, 8, 8], "sigma": 0.1, "seed": 2}
    cfg = {"schema_version": 1, "seed": 3, "data": {"synth": synth},
           "pipeline": {"stats_samples": 20, "rounds": [{"conv1_1": 6, "conv2_1": 10}, {"conv1_1": 4, "conv2_1": 7},
                                                         {"conv1_1": 3, "conv2_1": 5}],
                        "finetune": {"max_epochs": 2, "patience": 1, "batch_size": 16}}}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    g = vgg_style((1, 16, 16), ((8,), (12,)), num_classes=4, seed=1)
    model = tmp_path / "m.lnpm"
    save_model(g, model)

    def pipe(out, *extra):
        return cli_main(["pipeline", "--config", str(path), "--model", str(model), "--output-dir", str(out), *extra])

    codes = [pipe(tmp_path / "a"), pipe(tmp_path / "b"), pipe(tmp_path / "c", "--rounds", "1"),
             pipe(tmp_path / "c", "--resume")]
    read = lambda d, f: (tmp_path / d / f).read_bytes()  # noqa: E731
    same_csv = read("a", "results.csv") == read("b", "results.csv")
    same_model = read("a", "round_3/model.lnpm") == read("b", "round_3/model.lnpm")
    resumed = read("a", "results.csv") == read("c", "results.csv") and \
        read("a", "round_3/model.lnpm") == read("c", "round_3/model.lnpm")
    final = loads(read("a", "round_3/model.lnpm"))
    probe = np.random.default_rng(0).random((8, 1, 16, 16), dtype=np.float32)
    round_trip = forward(loads(dumps(final)), probe)[0].tobytes() == forward(final, probe)[0].tobytes()
    ok = codes == [0, 0, 0, 0] and same_csv and same_model and resumed and round_trip
    report(9, "determinism and persistence", ok,
           f"byte-identical results.csv {same_csv} and model {same_model}, resume {resumed}, "
           f"round-trip logits bit-exact {round_trip}")


def test_criterion_10_stage_one_freeze(benchmark):
    flags = [rec.conv_frozen_stage1 for r in benchmark for recs in r["records"].values() for rec in recs[1:]]
    report(10, "stage-1 conv freeze", len(flags) > 0 and all(flags),
           f"{sum(flags)}/{len(flags)} rounds with bit-identical conv weights after stage 1")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
