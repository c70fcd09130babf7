"""Acceptance suite: one test per criterion, summarised by conftest.py.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end of the output.
"""
import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from fd import distinct_values, max_rel_error, numeric_grad
from oracles import auc_pairs, brute_persistence, random_series
from tempreg import cli
from tempreg.anomaly import all_minima_persistence, build_events, evaluate, persistent_minima, roc_auc_eer
from tempreg.data import FrameSequence, IrregularSegment, SamplingConfig, SceneSpec, sample_cuboids, synth_video_generate
from tempreg.errors import ShapeMismatch
from tempreg.features import (
    DESCRIPTOR_DIM,
    FlowField,
    dense_flow,
    extract_grid_descriptors,
    hog_hof_descriptor,
)
from tempreg.layers import (
    Activation,
    Conv,
    ConvSpec,
    Deconv,
    Dense,
    LayerParams,
    MaxPool,
    Unpool,
    conv_forward,
    conv_input_backward,
    layer_backward,
    maxpool_forward,
    unpool_forward,
)
from tempreg.models import (
    build_conv_ae,
    checkpoint_bytes,
    conv_ae_config,
    layer_shapes,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from tempreg.optim import TrainConfig, train
from tempreg.regularity import regularity_scores, regularity_series

SEEDS = (0, 1, 2)

# Synthetic detection benchmark: one wrapping blob on a mid-grey background.
# The test video continues the training scene and contains two irregular segments.
TRAIN_LEN = 400
TEST_LEN = 400
SEGMENTS = [(100, 149, "reverse"), (250, 299, "teleport")]
BENCH_TRAIN = dict(max_iters=4500, batch_size=16, learning_rate=0.05)


def detail(record_property, text):
    record_property("detail", text)


# -- 1. gradient fidelity -------------------------------------------------------

def _chain_grads(stages, x, rng):
    """Analytic and numeric gradients of <chain(x), proj> for every input and parameter."""

    def run():
        h, rec, caches = x, None, []
        for layer, params in stages:
            h, cache = layer.forward(h, params, rec if isinstance(layer, Unpool) else None)
            if isinstance(layer, MaxPool):
                rec = cache.record
            caches.append(cache)
        return h, caches

    out, caches = run()
    proj = rng.normal(size=out.shape)
    f = lambda: float(np.sum(run()[0] * proj))
    grad, pairs = proj, []
    for (layer, params), cache in reversed(list(zip(stages, caches))):
        grad, pgrads = layer_backward(layer, cache, grad, params)
        if params is not None:
            pairs += [(pgrads.weights, params.weights), (pgrads.bias, params.bias)]
    pairs.append((grad, x))
    return max(max_rel_error(a, numeric_grad(f, arr)) for a, arr in pairs)


def _layer_cases(rng):
    c_in, c_out = 2, 3
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    conv = Conv(ConvSpec(c_in, c_out, (3, 3), stride, pad))
    conv_p = LayerParams(rng.normal(size=(c_out, c_in, 3, 3)), rng.normal(size=c_out))
    target = (int(rng.integers(5, 8)), int(rng.integers(5, 8)))  # full output 7x7 is cropped
    deconv = Deconv(ConvSpec(c_out, c_in, (3, 3), 2), target)
    deconv_p = LayerParams(rng.normal(size=(c_out, c_in, 3, 3)), rng.normal(size=c_in))
    dense_p = LayerParams(rng.normal(size=(4, 5)), rng.normal(size=4))
    pooled = distinct_values(rng, (2, 5, 6))
    _, rec = maxpool_forward(pooled)

    class FixedUnpool(Unpool):
        def forward(self, x, params=None, record=None):
            return super().forward(x, params, rec)

    composite_x = rng.normal(size=(2, 8, 8))
    comp_conv = Conv(ConvSpec(2, 3, (3, 3), 1, 1))
    comp_conv_p = LayerParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    comp_deconv = Deconv(ConvSpec(3, 2, (2, 2), 2), (8, 8))
    comp_deconv_p = LayerParams(rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2))
    return {
        "conv": ([(conv, conv_p)], rng.normal(size=(2, c_in, 7, 6))),
        "deconv": ([(deconv, deconv_p)], rng.normal(size=(c_out, 3, 3))),
        "fc": ([(Dense(5, 4), dense_p)], rng.normal(size=(3, 5))),
        "sigmoid": ([(Activation("sigmoid"), None)], rng.normal(size=(2, 3, 4))),
        "tanh": ([(Activation("tanh"), None)], rng.normal(size=(2, 3, 4))),
        "maxpool": ([(MaxPool(), None)], pooled),
        "unpool": ([(FixedUnpool(), None)], rng.normal(size=rec.switches.shape)),
        # conv -> tanh -> max-pool -> deconv
        "composite": (
            [(comp_conv, comp_conv_p), (Activation("tanh"), None), (MaxPool(), None), (comp_deconv, comp_deconv_p)],
            composite_x,
        ),
    }


@pytest.mark.criterion(1, "gradient fidelity, every layer type and a composite, 20 seeds")
def test_c01_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, (stages, x) in _layer_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), _chain_grads(stages, x, rng))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    detail(record_property, f"max rel err {worst[top]:.1e} ({top}), {elapsed:.1f}s")
    assert all(v < 1e-4 for v in worst.values()), worst
    assert elapsed < 60


# -- 2. shapes and adjoint ------------------------------------------------------------

def _mirror_pairs(cfg):
    """Encoder conv/pool input shapes against the decoder deconv/unpool output shapes."""
    shapes = [tuple(cfg.input_shape)] + layer_shapes(cfg)
    enc = [shapes[i] for i, d in enumerate(cfg.layers) if d["type"] in ("conv", "pool")]
    dec = [shapes[i + 1] for i, d in enumerate(cfg.layers) if d["type"] in ("deconv", "unpool")]
    return enc, dec[::-1]


@pytest.mark.criterion(2, "mirror shapes, conv adjoint, pool/unpool")
def test_c02_shapes_and_adjoint(record_property):
    t0 = time.perf_counter()
    for preset in ("tiny", "paper"):
        enc, dec = _mirror_pairs(conv_ae_config(preset))
        assert enc == dec and len(enc) == 5, preset
    tiny = build_conv_ae(conv_ae_config("tiny"), rng_seed=0)
    x = np.random.default_rng(0).random((2, *tiny.input_shape))
    assert model_forward(tiny, x)[0].shape == x.shape

    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        k = int(rng.choice([1, 3, 5, 11]))
        spec = ConvSpec(3, 4, (k, k), stride=int(rng.integers(1, 5)), pad=int(rng.integers(0, 3)))
        h, w = int(rng.integers(k, k + 12)), int(rng.integers(k, k + 12))
        wts = rng.normal(size=(4, 3, k, k))
        xin = rng.normal(size=(3, h, w))
        y = rng.normal(size=(4, *spec.out_size(h, w)))
        lhs = np.sum(conv_forward(xin, spec, LayerParams(wts, np.zeros(4))) * y)
        rhs = np.sum(xin * conv_input_backward(y, spec, wts, (h, w)))
        worst = max(worst, abs(lhs - rhs))
    assert worst < 1e-8

    rng = np.random.default_rng(1)
    xin = distinct_values(rng, (3, 8, 9))
    pooled, rec = maxpool_forward(xin)
    restored = unpool_forward(pooled, rec)
    want = np.zeros_like(xin)
    for c in range(3):
        for i in range(4):
            for j in range(4):
                win = xin[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                a, b = np.unravel_index(np.argmax(win), (2, 2))
                want[c, 2 * i + a, 2 * j + b] = win[a, b]
    assert np.array_equal(restored, want)
    elapsed = time.perf_counter() - t0
    detail(record_property, f"adjoint gap {worst:.1e}, {elapsed:.2f}s")
    assert elapsed < 10


# -- 3. architecture arithmetic ---------------------------------------------------------

@pytest.mark.criterion(3, "paper preset feature maps 55 -> 27 -> 13")
def test_c03_paper_feature_maps(record_property):
    t0 = time.perf_counter()
    cfg = conv_ae_config("paper")
    shapes = layer_shapes(cfg)
    by_type = [(d["type"], s) for d, s in zip(cfg.layers, shapes)]
    enc = [s for t, s in by_type[: len(by_type) // 2] if t in ("conv", "pool")]
    assert enc == [(512, 55, 55), (512, 27, 27), (256, 27, 27), (256, 13, 13), (128, 13, 13)]
    elapsed = time.perf_counter() - t0
    detail(record_property, f"{' -> '.join('x'.join(map(str, s)) for s in enc)}, {elapsed * 1000:.0f}ms")
    assert elapsed < 1


# -- 4. training sanity ------------------------------------------------------------------

@pytest.mark.criterion(4, "tiny conv-AE loss halves in 500 iterations, smoothed trace monotone")
@pytest.mark.parametrize("seed", SEEDS)
def test_c04_training_sanity(record_property, seed):
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        seq, _ = synth_video_generate(SceneSpec(length=400), seed)
        # a fixed full batch keeps the loss a deterministic function of the weights
        cuboids = sample_cuboids(seq, SamplingConfig(T=5, sample_stride=8, strides_enabled=(1,)))
        model = build_conv_ae(conv_ae_config("tiny", T=5), rng_seed=seed)
        cfg = TrainConfig.for_model("conv_ae", max_iters=500, batch_size=len(cuboids), learning_rate=0.002, seed=seed)
        losses = np.array(train(model, cuboids, cfg).losses)
    elapsed = time.perf_counter() - t0
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    ratio = losses[-1] / losses[0]
    detail(record_property, f"seed {seed}: ratio {ratio:.3f}, max smoothed step {np.diff(smooth).max():+.4f}, {elapsed:.0f}s")
    assert ratio < 0.5
    assert np.all(np.diff(smooth) <= 0)
    assert elapsed < 300


# -- 5 and 6. synthetic detection benchmark ---------------------------------------------------

def _benchmark_run(seed, T):
    scene = SceneSpec(length=TRAIN_LEN)
    train_seq, _ = synth_video_generate(scene, seed)
    test_scene = SceneSpec(
        length=TEST_LEN, t0=TRAIN_LEN, irregular=[IrregularSegment(a, b, beh) for a, b, beh in SEGMENTS]
    )
    test_seq, labels = synth_video_generate(test_scene, seed)
    model = build_conv_ae(conv_ae_config("tiny", T=T), rng_seed=seed, dtype=np.float32)
    cuboids = sample_cuboids(train_seq, SamplingConfig(T=T))
    train(model, cuboids, TrainConfig.for_model("conv_ae", seed=seed, **BENCH_TRAIN))
    series = regularity_series(test_seq, model)
    minima = persistent_minima(series.s)
    report = evaluate(build_events([m.index for m in minima], len(series)), labels, series.s)
    gap = float(series.s[labels == 0].mean() - series.s[labels == 1].mean())
    return report, gap


@pytest.fixture(scope="module")
def benchmark():
    runs, timing = {}, {}
    with threadpool_limits(limits=1):
        for T in (10, 3):
            t0 = time.perf_counter()
            for seed in SEEDS:
                runs[seed, T] = _benchmark_run(seed, T)
            timing[T] = time.perf_counter() - t0
    return runs, timing


@pytest.mark.slow
@pytest.mark.criterion(5, "synthetic detection: AUC >= 0.9, both events, <= 1 false alarm, 3 seeds")
def test_c05_end_to_end_detection(record_property, benchmark):
    runs, timing = benchmark
    ok = True
    for seed in SEEDS:
        rep, _ = runs[seed, 10]
        passed = rep.auc >= 0.9 and rep.correct_detections == 2 and rep.missed == 0 and rep.false_alarms <= 1
        ok &= passed
        detail(record_property, f"seed {seed}: AUC {rep.auc:.3f}, hits {rep.correct_detections}, FA {rep.false_alarms}")
    detail(record_property, f"{timing[10]:.0f}s")
    assert ok
    assert timing[10] < 600


@pytest.mark.slow
@pytest.mark.criterion(6, "regular/irregular score gap larger for T=10 than T=3")
def test_c06_temporal_depth_trend(record_property, benchmark):
    runs, _ = benchmark
    wins = 0
    for seed in SEEDS:
        g10, g3 = runs[seed, 10][1], runs[seed, 3][1]
        wins += g10 > g3
        detail(record_property, f"seed {seed}: {g10:.3f} vs {g3:.3f}")
    assert wins >= 2


# -- 7 and 8. oracles for the detector and the metric -----------------------------------

@pytest.mark.criterion(7, "persistence matches brute force on 1000 series")
def test_c07_persistence_oracle(record_property):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(1000):
        s = random_series(rng)
        got = {m.index: m.persistence for m in all_minima_persistence(s)}
        want = brute_persistence(s)
        assert got.keys() == want.keys()
        for k, p in want.items():
            if math.isinf(p):
                assert math.isinf(got[k])
            else:
                worst = max(worst, abs(got[k] - p))
    detail(record_property, f"max deviation {worst:.1e}")
    assert worst <= 1e-12


@pytest.mark.criterion(8, "ROC AUC matches pair counting on 100 series")
def test_c08_auc_oracle(record_property):
    rng = np.random.default_rng(88)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 400))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        s = np.round(rng.random(n), int(rng.integers(1, 5)))
        auc, _ = roc_auc_eer(s, labels)
        worst = max(worst, abs(auc - auc_pairs(1 - s, labels)))
    detail(record_property, f"max deviation {worst:.1e}")
    assert worst < 1e-9


# -- 9. score formula -------------------------------------------------------------------------

@pytest.mark.criterion(9, "score examples [2,4,10] and constant error")
def test_c09_score_examples():
    assert list(regularity_scores([2.0, 4.0, 10.0])) == [1.0, 0.8, 0.2]
    assert np.all(regularity_scores(np.full(9, 0.37)) == 1.0)
    assert np.all(regularity_scores(np.zeros(3)) == 1.0)


# -- 10. descriptor contract ---------------------------------------------------------------

@pytest.mark.criterion(10, "204-d descriptor layout and degenerate inputs")
def test_c10_descriptor_contract():
    rng = np.random.default_rng(10)
    block = rng.random((15, 32, 32))
    flows = [dense_flow(block[i], block[i + 1], iters=20) for i in range(14)]
    vec = hog_hof_descriptor(block, flows).vector
    assert DESCRIPTOR_DIM == 204 and vec.shape == (204,)
    for blk in list(vec[:96].reshape(12, 8)) + list(vec[96:].reshape(12, 9)):
        assert abs(np.linalg.norm(blk) - 1) < 1e-9

    still = hog_hof_descriptor(np.full((15, 32, 32), 0.4), [FlowField(np.zeros((32, 32)), np.zeros((32, 32)))] * 14)
    hof = still.vector[96:].reshape(12, 9)
    assert np.all(still.vector[:96] == 0) and np.all(hof[:, :8] == 0) and np.allclose(hof[:, 8], 1)
    same = dense_flow(block[0], block[0])
    assert np.all(same.u == 0) and np.all(same.v == 0)
    with pytest.raises(ShapeMismatch):
        hog_hof_descriptor(block[:, :, :31], flows)
    with pytest.raises(ShapeMismatch):
        hog_hof_descriptor(block, flows[:-1])
    assert extract_grid_descriptors(FrameSequence(rng.random((20, 31, 40))), L=15) == []
    assert extract_grid_descriptors(FrameSequence(rng.random((14, 32, 32))), L=15) == []


# -- 11. checkpoint round trip ------------------------------------------------------------

@pytest.mark.criterion(11, "checkpoint save/load/save bytes and double-precision scores identical")
def test_c11_checkpoint_round_trip(tmp_path, record_property):
    seq, _ = synth_video_generate(SceneSpec(length=60), 11)
    model = build_conv_ae(conv_ae_config("tiny"), rng_seed=11, dtype=np.float32)
    train(model, sample_cuboids(seq, SamplingConfig(T=5)), TrainConfig.for_model("conv_ae", max_iters=40, seed=11))
    path = tmp_path / "a.trae"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.dtype == np.float64
    save_checkpoint(loaded, tmp_path / "b.trae")
    assert path.read_bytes() == (tmp_path / "b.trae").read_bytes() == checkpoint_bytes(model)

    before = regularity_series(seq, model.astype(np.float64))
    after = regularity_series(seq, loaded)
    assert np.array_equal(before.e, after.e) and np.array_equal(before.s, after.s)
    detail(record_property, f"{path.stat().st_size} bytes, {len(after.e)} frames scored")


# -- 12. CLI determinism -------------------------------------------------------------------

def _pipeline(root):
    steps = [
        ["gen-synth", "--len", "120", "--seed", "12", "--out", "train"],
        ["gen-synth", "--len", "120", "--t0", "120", "--anomaly", "40:70:teleport", "--seed", "12", "--out", "test"],
        ["train", "--data", "train", "--out", "model", "--T", "5", "--iters", "30", "--seed", "12"],
        ["score", "--checkpoint", "model/model.trae", "--data", "test", "--out", "scores/scores.csv"],
        ["detect", "--scores", "scores/scores.csv", "--out", "events/events.json"],
        ["eval", "--events", "events/events.json", "--labels", "test/labels.csv", "--scores", "scores/scores.csv",
         "--out", "report/report.json"],
    ]
    for args in steps:
        assert cli.main(args + ["--threads", "1"]) == 0, args


def _tree(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


@pytest.mark.criterion(12, "CLI pipeline is byte-identical across two runs")
def test_c12_cli_determinism(tmp_path, monkeypatch, record_property):
    for run in ("a", "b"):
        (tmp_path / run).mkdir()
        monkeypatch.chdir(tmp_path / run)
        _pipeline(tmp_path / run)
    files = _tree(tmp_path / "a")
    assert files == _tree(tmp_path / "b")
    assert Path("report/report.json") in files and Path("model/model.trae") in files
    for rel in files:
        assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False), rel
    detail(record_property, f"{len(files)} files identical")
