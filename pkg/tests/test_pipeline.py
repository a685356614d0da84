import numpy as np
import pytest

from mpcompress.compressors import CompressorConfig
from mpcompress.feedback import ProtocolError
from mpcompress.harness.datasets import DatasetSpec, make_dataset
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
from mpcompress.pipeline import (
    DirectionConfig,
    DivergenceError,
    LinkConfig,
    Pipeline,
    PipelineConfig,
    TrainSettings,
    batch_order,
    partition,
    run_epoch,
)
from mpcompress.tensor_core import make_rng

SMALL = DatasetSpec(samples=400, spread=2.5, seed=1)


def direction(kind="identity", feedback="none", **kw):
    return DirectionConfig(CompressorConfig(kind, **kw), feedback)


def link(fw=None, bw=None, reuse=False):
    return LinkConfig(fw or direction(), bw or direction(), reuse)


def train(data, degree, lnk, epochs=3, seed=0, model="mlp", **pkw):
    layers = build(preset_spec(model, data.input_dim, data.classes), seed)
    cfg = PipelineConfig(degree=degree, links=lnk, **pkw)
    settings = TrainSettings(lr0=0.01, t_max=2 * epochs, batch_size=50, seed=seed, warmup_epochs=cfg.warmup_epochs)
    opts = [OptState() for _ in range(degree)]
    rows = []
    with Pipeline(layers, cfg, aqsgd_capacity=len(data.x_train)) as pipe:
        for e in range(epochs):
            rows.append(run_epoch(pipe, data, e, opts, None, settings))
    return layers, rows


def monolithic(data, epochs, seed=0):
    """Plain single-process training: the reference for identity pipelines."""
    layers = build(preset_spec("mlp", data.input_dim, data.classes), seed)
    opt = OptState()
    for e in range(epochs):
        lr = cosine_lr(e, 0.01, 2 * epochs)
        for idx in batch_order(len(data.x_train), 50, seed, e):
            cache = []
            _, g = cross_entropy(forward(layers, data.x_train[idx], cache), data.y_train[idx])
            _, grads = backward(layers, g, cache)
            sgd_momentum_step(opt, parameters(layers), grads, lr)
    return layers


@pytest.fixture(scope="module")
def data():
    return make_dataset(SMALL)


def bits_equal(a, b):
    return all(u.tobytes() == v.tobytes() for u, v in zip(parameters(a), parameters(b)))


def test_partition_examples():
    assert [len(s) for s in partition(list(range(7)), 4)] == [2, 2, 2, 1]
    assert [len(s) for s in partition(list(range(5)), 1)] == [5]
    assert [len(s) for s in partition(list(range(5)), 5)] == [1] * 5
    with pytest.raises(ValueError):
        partition(list(range(3)), 4)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(degree=3, links=[link()])
    with pytest.raises(ValueError):
        LinkConfig(direction(), direction("topk", "aqsgd", ratio=0.1))
    with pytest.raises(ValueError):
        direction("quantize", "ef_mixed", bits=4)
    with pytest.raises(ValueError):
        link(direction("quantize", bits=2), direction("topk", ratio=0.1), reuse=True)


@pytest.mark.parametrize("degree", [1, 2, 4])
def test_identity_pipeline_is_bit_identical_to_monolithic(data, degree):
    ref = monolithic(data, 3)
    got, _ = train(data, degree, link(), epochs=3)
    assert bits_equal(got, ref)


def test_identity_feedback_modes_are_transparent(data):
    ref, _ = train(data, 3, link(), epochs=2)
    for fb in ("ef", "aqsgd"):
        got, _ = train(data, 3, link(direction("identity", fb)), epochs=2)
        assert bits_equal(got, ref), fb


def test_top100_matches_identity_up_to_float32_cast(data):
    ref, _ = train(data, 3, link(), epochs=2)
    got, _ = train(data, 3, link(direction("topk", ratio=1.0), direction("topk", ratio=1.0)), epochs=2)
    for u, v in zip(parameters(got), parameters(ref)):
        np.testing.assert_allclose(u, v, rtol=1e-4, atol=1e-5)


def test_byte_ratio_quantize2_vs_quantize8(data):
    _, r2 = train(data, 2, link(direction("quantize", bits=2), direction("quantize", bits=2)), epochs=1)
    _, r8 = train(data, 2, link(direction("quantize", bits=8), direction("quantize", bits=8)), epochs=1)
    ratio = r2[-1].bytes_forward / r8[-1].bytes_forward
    assert ratio == pytest.approx(0.25, abs=0.01)


def test_bytes_per_epoch_arithmetic(data):
    # mlp split in 2 stages: one cut after the first ReLU, activations (50, 64)
    steps = len(data.x_train) // 50
    _, rows = train(data, 2, link(), epochs=2)
    per_msg = 2 + 8 + 8 * 50 * 64
    assert rows[0].bytes_forward == steps * per_msg
    assert rows[1].bytes_forward == 2 * steps * per_msg
    _, rows = train(data, 2, link(direction("topk", ratio=0.1), direction("topk", ratio=0.1)), epochs=1)
    assert rows[0].bytes_forward == rows[0].bytes_backward == steps * (2 + 8 + 4 + 8 * 320)


def test_eval_on_equals_off_for_identity_links(data):
    _, rows = train(data, 3, link(), epochs=2)
    assert rows[-1].test_acc_on == rows[-1].test_acc_off
    assert rows[-1].test_loss_on == rows[-1].test_loss_off


def test_eval_does_not_touch_feedback_state(data):
    layers = build(preset_spec("mlp", data.input_dim, data.classes), 0)
    cfg = PipelineConfig(degree=2, links=link(direction("topk", "ef21", ratio=0.1)))
    with Pipeline(layers, cfg) as pipe:
        pipe.train_step(data.x_train[:50], data.y_train[:50], data.ids_train[:50], 0.01, [OptState(), OptState()])
        before = pipe.links[0].fwd_tx.g.copy()
        sent = pipe.bytes_forward()
        pipe.evaluate(data.x_test, data.y_test, True)
        assert np.array_equal(pipe.links[0].fwd_tx.g, before)
        assert pipe.bytes_forward() == sent


def test_untrained_model_is_near_chance(data):
    layers = build(preset_spec("mlp", data.input_dim, data.classes), 0)
    with Pipeline(layers, PipelineConfig(degree=2, links=link())) as pipe:
        _, acc = pipe.evaluate(data.x_test, data.y_test, False)
    assert acc < 0.3


def test_warmup_epochs_equal_baseline(data):
    base, base_rows = train(data, 3, link(), epochs=2)
    top = link(direction("topk", ratio=0.1), direction("topk", ratio=0.1))
    warm, warm_rows = train(data, 3, top, epochs=2, warmup_epochs=2)
    assert bits_equal(warm, base)
    assert warm_rows[-1].bytes_forward == base_rows[-1].bytes_forward


@pytest.mark.parametrize(
    "lnk",
    [
        link(direction("topk", "ef", ratio=0.1), direction("quantize", "ef21", bits=4)),
        link(direction("topk", "ef_mixed", ratio=0.2), direction("topk", "ef", ratio=0.2)),
        link(direction("topk", "aqsgd", ratio=0.1), direction("quantize", bits=8)),
        link(direction("topk", ratio=0.1), direction("topk", ratio=0.1), reuse=True),
    ],
)
def test_threaded_executor_matches_sequential(data, lnk):
    seq, seq_rows = train(data, 3, lnk, epochs=2)
    thr, thr_rows = train(data, 3, lnk, epochs=2, executor="threaded")
    assert bits_equal(seq, thr)
    assert seq_rows == thr_rows


def test_socket_transport_matches_in_process(data):
    lnk = link(direction("topk", "ef21", ratio=0.1), direction("quantize", bits=4))
    a, ra = train(data, 3, lnk, epochs=2)
    b, rb = train(data, 3, lnk, epochs=2, transport="loopback_socket")
    assert bits_equal(a, b)
    assert ra == rb


def test_reuse_indices_sends_gradients_on_activation_support(data, monkeypatch):
    from mpcompress.pipeline import Link

    sent = []
    real = Link._send

    def spy(self, chan, msg, forward_dir, count=True):
        sent.append((forward_dir, msg))
        return real(self, chan, msg, forward_dir, count)

    monkeypatch.setattr(Link, "_send", spy)
    layers = build(preset_spec("mlp", data.input_dim, data.classes), 0)
    lnk = link(direction("topk", ratio=0.1), direction("topk", ratio=0.1), reuse=True)
    with Pipeline(layers, PipelineConfig(degree=2, links=lnk)) as pipe:
        for s in (0, 50, 100):
            pipe.compute_gradients(data.x_train[s : s + 50], data.y_train[s : s + 50])
        assert pipe.links[0]._sent_indices == [] and pipe.links[0]._recv_indices == []
    fwd = [m for d, m in sent if d]
    bwd = [m for d, m in sent if not d]
    assert len(fwd) == len(bwd) == 3
    for f, g in zip(fwd, bwd):
        assert np.array_equal(f.indices, g.indices)


def test_reuse_index_mismatch_is_a_protocol_error(data):
    layers = build(preset_spec("mlp", data.input_dim, data.classes), 0)
    lnk = link(direction("topk", ratio=0.1), direction("topk", ratio=0.1), reuse=True)
    with Pipeline(layers, PipelineConfig(degree=2, links=lnk)) as pipe:
        l0 = pipe.links[0]
        x = make_rng(0).normal(size=(2, 8))
        l0.send_activations(x)
        got = l0.recv_activations()
        sent = set(l0._recv_indices[-1].tolist())
        l0._recv_indices[-1] = np.array([i for i in range(16) if i not in sent][:2], dtype=np.int64)
        l0.send_gradients(got)
        with pytest.raises(ProtocolError):
            l0.recv_gradients()


def test_aqsgd_buffers_grow_with_distinct_samples(data):
    _, rows = train(data, 2, link(direction("topk", "aqsgd", ratio=0.1)), epochs=2)
    steps = len(data.x_train) // 50
    per_sample = 64 * 8
    # sender and receiver each hold one row per training sample seen
    assert rows[0].feedback_buffer_bytes == 2 * steps * 50 * per_sample
    assert rows[0].feedback_buffer_bytes <= rows[1].feedback_buffer_bytes <= 2 * len(data.x_train) * per_sample


def test_divergence_is_reported(data):
    layers = build(preset_spec("mlp", data.input_dim, data.classes), 0)
    cfg = PipelineConfig(degree=2, links=link(direction("topk", ratio=0.5)))
    with Pipeline(layers, cfg) as pipe:
        with pytest.raises(DivergenceError):
            pipe.train_step(data.x_train[:50] * 1e300, data.y_train[:50], None, 0.01, [OptState(), OptState()])
