"""Acceptance suite: one or more tests per criterion, summarised at the end of the run.

Trend criteria train the desk-scale default configuration (blobs, MLP,
3 stages, 40 epochs) for five seeds per link preset.  Runs with the same seed
share initialization and batch order, so comparisons between presets use the
standard error of the paired per-seed differences.
"""

import math
import statistics
import time

import numpy as np
import pytest

from mpcompress.compressors import (
    CompressorConfig,
    Quantized,
    Sparse,
    WireCompressor,
    decompress,
    dense,
    quantize,
    topk,
    topk_count,
)
from mpcompress.feedback import (
    AqsgdState,
    Ef21State,
    EfState,
    aqsgd_receive,
    aqsgd_send,
    ef21_receive,
    ef21_step,
    ef_step,
    efmixed_step,
)
from mpcompress.harness.checks import codec_check, gradcheck
from mpcompress.harness.config import ExperimentConfig
from mpcompress.harness.datasets import make_dataset
from mpcompress.harness.runner import run_experiment, train_seed
from mpcompress.nn_model import (
    OptState,
    backward,
    build,
    cosine_lr,
    cross_entropy,
    forward,
    parameters,
    preset_spec,
    sgd_momentum_step,
)
from mpcompress.pipeline import LinkConfig, Pipeline, PipelineConfig, batch_order, run_epoch
from mpcompress.tensor_core import make_rng
from mpcompress.wire import decode, encode, wire_size

SEEDS = [0, 1, 2, 3, 4]
TREND_PRESETS = ["baseline", "topK50", "topK10", "topK2", "ef21-topK10", "fw2-bw8", "fw4-bw2"]


def criterion(number, title):
    return pytest.mark.criterion(number, title)


class Clock:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.1f}s, limit {self.limit}s"


def paired(a, b):
    """Mean and standard error of the per-seed differences ``a - b``."""
    d = [x - y for x, y in zip(a, b)]
    return statistics.fmean(d), statistics.stdev(d) / math.sqrt(len(d))


# --- 1 ---------------------------------------------------------------------------


@criterion(1, "gradient correctness (max rel err < 1e-6)")
@pytest.mark.parametrize("preset", ["mlp", "cnn"])
def test_c1_gradcheck(preset, record_property):
    with Clock(60):
        rep = gradcheck(preset, seed=0)
    layer_kinds = {line.split()[1] for line in rep.lines if line.startswith("layer")}
    stages = {line.split()[1] for line in rep.lines if line.startswith("pipeline")}
    record_property("detail", f"{preset} max {rep.max_error:.1e}")
    assert {"P=2", "P=4"} <= stages
    assert layer_kinds >= ({"linear", "relu"} if preset == "mlp" else {"conv2d", "relu", "flatten", "linear"})
    assert rep.ok, rep.text()
    assert rep.max_error < 1e-6


# --- 2 ---------------------------------------------------------------------------


def monolithic_params(cfg, data, seed, epochs):
    layers = build(preset_spec(cfg.model, data.input_dim, data.classes), seed)
    opt = OptState(cfg.optimizer.momentum, cfg.optimizer.weight_decay)
    trajectory = []
    for e in range(epochs):
        lr = cosine_lr(e, cfg.optimizer.lr0, cfg.t_max)
        for idx in batch_order(len(data.x_train), cfg.batch_size, seed, e):
            cache = []
            _, g = cross_entropy(forward(layers, data.x_train[idx], cache), data.y_train[idx])
            _, grads = backward(layers, g, cache)
            sgd_momentum_step(opt, parameters(layers), grads, lr)
        trajectory.append([p.tobytes() for p in parameters(layers)])
    return trajectory


@criterion(2, "baseline equivalence (P in 1,2,4 bit-identical to monolithic)")
def test_c2_identity_pipelines_match_monolithic(record_property):
    cfg = ExperimentConfig(epochs=5, links="baseline")
    data = make_dataset(cfg.dataset)
    with Clock(120):
        ref = monolithic_params(cfg, data, 0, cfg.epochs)
        for degree in (1, 2, 4):
            layers = build(preset_spec(cfg.model, data.input_dim, data.classes), 0)
            pcfg = PipelineConfig(degree=degree, links=LinkConfig())
            opts = [OptState(cfg.optimizer.momentum, cfg.optimizer.weight_decay) for _ in range(degree)]
            settings = cfg.train_settings(0)
            with Pipeline(layers, pcfg) as pipe:
                for e in range(cfg.epochs):
                    run_epoch(pipe, data, e, opts, None, settings)
                    got = [p.tobytes() for p in parameters(pipe.layers)]
                    assert got == ref[e], f"P={degree} diverges from monolithic at epoch {e}"
    record_property("detail", "5 epochs, every epoch bit-equal")


# --- 3 ---------------------------------------------------------------------------


@criterion(3, "compressor bounds (zero violations over 1e4 vectors)")
def test_c3_compressor_bounds(record_property):
    rng = make_rng(3)
    violations = 0
    with Clock(30):
        for _ in range(10_000):
            n = int(rng.integers(1, 200))
            x = rng.normal(size=n) * 10 ** rng.uniform(-3, 3)
            for b in (2, 4, 6, 8):
                err = np.max(np.abs(x - decompress(quantize(x, b))))
                violations += err > (x.max() - x.min()) / (2 * (2**b - 1))
            r = float(rng.uniform(0.001, 1.0))
            k = topk_count(n, r)
            resid = x - decompress(topk(x, r))
            violations += resid @ resid > (1 - k / n) * (x @ x)
    record_property("detail", f"{violations} violations")
    assert violations == 0


# --- 4 ---------------------------------------------------------------------------


@criterion(4, "EF / EF21 / EF-mixed accounting")
def test_c4_feedback_accounting(record_property):
    rng = make_rng(4)
    top10 = CompressorConfig("topk", ratio=0.1)
    ef, ef21, ef21_rx, mixed = EfState(), Ef21State(), Ef21State(), EfState()
    n = 200
    sum_x = np.zeros(n)
    sum_ef = np.zeros(n)
    sum_mixed = np.zeros(n)
    sum_ef21 = np.zeros(n)
    with Clock(10):
        for _ in range(100):
            x = rng.normal(size=n)
            sum_x += x
            sum_ef += decompress(ef_step(ef, x, top10))
            msg = ef21_step(ef21, x, top10)
            sum_ef21 += decompress(msg)
            ef21_receive(ef21_rx, msg)
            sum_mixed += decompress(efmixed_step(mixed, x, 0.1))
    rel_ef = np.linalg.norm(sum_ef + ef.error - sum_x) / np.linalg.norm(sum_x)
    rel_mixed = np.linalg.norm(sum_mixed + mixed.error - sum_x) / np.linalg.norm(sum_x)
    abs_ef21 = np.max(np.abs(ef21.g - sum_ef21))
    record_property("detail", f"EF {rel_ef:.1e}, EF-mixed {rel_mixed:.1e}, EF21 {abs_ef21:.1e}")
    assert rel_ef <= 1e-9
    assert rel_mixed <= 1e-9
    assert abs_ef21 <= 1e-12
    assert ef21_rx.g.tobytes() == ef21.g.tobytes()


# --- 5 ---------------------------------------------------------------------------


@criterion(5, "AQ-SGD sender/receiver buffers bit-equal")
def test_c5_aqsgd_coherence(record_property):
    rng = make_rng(5)
    wc = WireCompressor(CompressorConfig("topk", ratio=0.5))
    tx, rx = AqsgdState("sender", 50), AqsgdState("receiver", 50)
    with Clock(10):
        for _ in range(1000):
            sid = int(rng.integers(0, 50))
            frame = encode(aqsgd_send(tx, sid, rng.normal(size=16), wc, cast=True))
            aqsgd_receive(rx, sid, decode(frame))
    assert tx.buffer.keys() == rx.buffer.keys()
    assert all(tx.buffer[k].tobytes() == rx.buffer[k].tobytes() for k in tx.buffer)
    record_property("detail", f"{len(tx.buffer)} ids")


# --- 6 ---------------------------------------------------------------------------


@criterion(6, "wire exactness")
def test_c6_wire(record_property):
    worked = Quantized((4,), 2, 0.0, 4.0, np.array([0, 1, 2, 3], dtype=np.uint8))
    assert encode(worked) == bytes.fromhex("01 01 04000000 02 00000000 00008040 E4")
    assert wire_size(worked) == 16
    with Clock(60):
        rep = codec_check(10_000, seed=6)
    record_property("detail", rep.lines[0])
    assert rep.ok, rep.text()


# --- 7 ---------------------------------------------------------------------------


@criterion(7, "byte-savings arithmetic")
def test_c7_byte_arithmetic(record_property):
    x = make_rng(7).normal(size=1000)
    dense_size = 2 + 4 + 4 * 1000
    sparse = topk(x, 0.1)
    q2 = quantize(x, 2)
    assert isinstance(sparse, Sparse) and len(sparse.indices) == 100
    assert wire_size(sparse) == len(encode(sparse)) == 810
    assert dense_size == 4006 == wire_size(dense(x)) == len(encode(dense(x)))
    assert 810 / 4006 == pytest.approx(0.202, abs=5e-4)
    # 1 tag + 1 rank + 4 dim + 1 bits + 4 min + 4 max + 250 payload
    assert wire_size(q2) == len(encode(q2)) == 265
    record_property("detail", f"topK10 810/4006={810 / 4006:.4f}, 2-bit 265/4006={265 / 4006:.4f}")


# --- 8 to 11: trends ---------------------------------------------------------------


@pytest.fixture(scope="module")
def trends():
    data = make_dataset(ExperimentConfig().dataset)
    runs = {}
    t0 = time.perf_counter()
    for preset in TREND_PRESETS:
        cfg = ExperimentConfig(name=preset, links=preset, seeds=SEEDS, eval_modes="both")
        finals = [train_seed(cfg, data, s)[-1] for s in SEEDS]
        runs[preset] = {"on": [r.test_acc_on for r in finals], "off": [r.test_acc_off for r in finals]}
    runs["_elapsed"] = time.perf_counter() - t0
    return runs


@pytest.mark.slow
@criterion(8, "trend: baseline >= Top50% >= Top10% >= Top2% (no inversion beyond 1 se)")
def test_c8_topk_ordering(trends, record_property):
    chain = ["baseline", "topK50", "topK10", "topK2"]
    means = {p: statistics.fmean(trends[p]["on"]) for p in chain}
    record_property("detail", " ".join(f"{p}={means[p]:.3f}" for p in chain))
    for hi, lo in zip(chain, chain[1:]):
        gap, se = paired(trends[hi]["on"], trends[lo]["on"])
        assert gap >= -se, f"{lo} beats {hi} by {-gap:.4f} > se {se:.4f}"
    assert trends["_elapsed"] < 15 * 60


@pytest.mark.slow
@criterion(9, "trend: Top10% acc(off) < acc(on) by >= 1 se")
def test_c9_inference_mismatch(trends, record_property):
    gap, se = paired(trends["topK10"]["on"], trends["topK10"]["off"])
    record_property("detail", f"on-off {gap:.4f}, se {se:.4f}")
    assert gap >= se


@pytest.mark.slow
@criterion(10, "trend: EF21 closes the on/off gap in >= 4 of 5 seeds")
def test_c10_ef21_closes_gap(trends, record_property):
    plain = [abs(a - b) for a, b in zip(trends["topK10"]["on"], trends["topK10"]["off"])]
    ef21 = [abs(a - b) for a, b in zip(trends["ef21-topK10"]["on"], trends["ef21-topK10"]["off"])]
    wins = sum(e < p for e, p in zip(ef21, plain))
    record_property("detail", f"{wins}/5 seeds")
    assert wins >= 4


@pytest.mark.slow
@criterion(11, "trend: fw2-bw8 beats fw4-bw2 by >= 3 se")
def test_c11_gradient_sensitivity(trends, record_property):
    gap, se = paired(trends["fw2-bw8"]["on"], trends["fw4-bw2"]["on"])
    record_property(
        "detail",
        f"fw2-bw8 {statistics.fmean(trends['fw2-bw8']['on']):.3f}, fw4-bw2 {statistics.fmean(trends['fw4-bw2']['on']):.3f}, "
        f"gap {gap:.4f}, se {se:.4f}",
    )
    assert gap >= 3 * se


# --- 12 ----------------------------------------------------------------------------


@criterion(12, "transport equivalence (byte-identical CSVs)")
def test_c12_transport_equivalence(tmp_path, record_property):
    csvs = {}
    with Clock(120):
        for transport in ("in_process", "loopback_socket"):
            cfg = ExperimentConfig(
                name="transport",
                links=["aqsgd-topK10", "fw4-bw8"],
                epochs=3,
                seeds=[0, 1],
                transport=transport,
            )
            res = run_experiment(cfg, tmp_path / transport)
            csvs[transport] = [p.read_bytes() for p in res.seed_csvs] + [res.aggregate_csv.read_bytes()]
    assert csvs["in_process"] == csvs["loopback_socket"]
    record_property("detail", f"{len(csvs['in_process'])} files identical")
