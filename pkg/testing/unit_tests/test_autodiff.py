#!/usr/bin/env python
# -*- coding: utf-8
# pytest unit tests for microfed.autodiff

import math
import pickle

import pytest
import torch
from pathlib import Path

from microfed import autodiff as mf_autodiff
from microfed.autodiff import DTYPE, CheckpointFormatError, ComputeGraph, IncompatibleParamsError, \
    OptimizerState, ParamSet, ShapeError, TrainingDivergenceError, forward_layer, param_slice
from testing.unit_tests.t_utils import create_tmp_dir, __tmp_dir__
from testing.common_testing_util import remove_tmp_dir


def setup_function():
    create_tmp_dir()


def _randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def _params():
    return ParamSet([("conv.weight", _randn(2, 1, 3, 3)), ("conv.bias", _randn(2, seed=1)),
                     ("scalar", torch.tensor(3.5, dtype=DTYPE))])


def test_checkpoint_round_trip():
    params = _params()
    path_checkpoint = Path(__tmp_dir__, "params.fgps")
    params.save(path_checkpoint)
    loaded = ParamSet.load(path_checkpoint)
    assert loaded.equal(params)
    assert loaded.names == ["conv.weight", "conv.bias", "scalar"]
    assert loaded.shapes == [(2, 1, 3, 3), (2,), ()]
    assert path_checkpoint.read_bytes()[:4] == b"FGPS"


def test_checkpoint_empty():
    assert len(ParamSet.from_bytes(ParamSet().to_bytes())) == 0


@pytest.mark.parametrize('corrupt,match', [
    (lambda b: b"XGPS" + b[4:], "byte offset 0"),
    (lambda b: b[:4] + bytes([2]) + b[5:], "version 2"),
    (lambda b: b[:-3], "Truncated"),
    (lambda b: b + b"\x00", "Trailing"),
    (lambda b: b[:9], "Truncated"),
])
def test_checkpoint_corruption(corrupt, match):
    payload = corrupt(_params().to_bytes())
    with pytest.raises(CheckpointFormatError, match=match):
        ParamSet.from_bytes(payload)


def test_paramset_copies_entries():
    tensor = torch.ones(3, dtype=DTYPE)
    params = ParamSet([("a", tensor)])
    tensor += 1
    assert torch.equal(params["a"], torch.ones(3, dtype=DTYPE))


def test_paramset_duplicate_name():
    with pytest.raises(ValueError):
        ParamSet([("a", torch.ones(1)), ("a", torch.ones(1))])


def test_paramset_helpers():
    params = _params()
    assert params.total_count == 18 + 2 + 1
    assert params.subset("conv").names == ["conv.weight", "conv.bias"]
    assert params.zeros_like().max_abs_diff(params.zeros_like()) == 0.0
    assert params.is_finite()
    assert params.map(lambda _, t: t * float("nan")).is_finite() is False
    assert params.to_vector().shape == (21,)
    assert params == ParamSet(params)
    assert params != params.zeros_like()


def test_incompatible_params():
    params = _params()
    other = ParamSet([("conv.weight", _randn(2, 1, 3, 3)), ("conv.bias", _randn(3))])
    assert not params.is_compatible(other)
    with pytest.raises(IncompatibleParamsError):
        mf_autodiff.sgd_step(params, other, 0.1)


def test_init_uniform_bound():
    generator = torch.Generator().manual_seed(3)
    values = mf_autodiff.init_uniform((8, 4, 3, 3), 36, 72, generator)
    assert float(values.abs().max()) <= math.sqrt(6.0 / (36 + 72))
    again = mf_autodiff.init_uniform((8, 4, 3, 3), 36, 72, torch.Generator().manual_seed(3))
    assert torch.equal(values, again)


def test_conv_entries():
    entries = dict(mf_autodiff.conv_entries("enc0.conv1", 1, 4, 3, torch.Generator().manual_seed(0)))
    assert entries["enc0.conv1.weight"].shape == (4, 1, 3, 3)
    assert torch.equal(entries["enc0.conv1.bias"], torch.zeros(4, dtype=DTYPE))


def _projected(output):
    """Scalar loss <output, R> with a fixed random R, so every output value carries a distinct weight."""
    return (output * _randn(*output.shape, seed=11)).sum()


def _layer_graph(kind, **options):
    def program(params, graph):
        if kind == "concat":
            inputs = [params["x"], params["y"]]
        else:
            inputs = params["x"]
        output = forward_layer(kind, param_slice(params, "conv") or None, inputs, graph, "conv", **options)
        return _projected(output)
    return ComputeGraph(program)


@pytest.mark.parametrize('kind,options', [
    ("conv2d", {"padding_mode": "zeros"}),
    ("conv2d", {"padding_mode": "reflect"}),
    ("leaky_relu", {"negative_slope": 0.2}),
    ("relu", {}),
    ("sigmoid", {}),
    ("upsample", {}),
    ("maxpool", {}),
    ("avgpool", {}),
    ("concat", {}),
    ("softmax", {}),
])
def test_finite_diff_layers(kind, options):
    entries = [("x", _randn(1, 2, 8, 8, seed=5))]
    if kind == "conv2d":
        entries += [("conv.weight", _randn(3, 2, 3, 3, seed=6)), ("conv.bias", _randn(3, seed=7))]
    if kind == "concat":
        entries.append(("y", _randn(1, 1, 8, 8, seed=8)))
    report = mf_autodiff.finite_diff_check(_layer_graph(kind, **options), ParamSet(entries), tol=1e-4)
    assert report.passed, report.max_rel_error
    assert report.n_checked == sum(t.numel() for _, t in entries)


@pytest.mark.parametrize('kind', ["relu", "leaky_relu", "maxpool"])
def test_finite_diff_at_kink(kind):
    # Every input sits exactly on a switch of the layer
    params = ParamSet([("x", torch.zeros(1, 2, 4, 4, dtype=DTYPE))])
    graph = _layer_graph(kind)
    report = mf_autodiff.finite_diff_check(graph, params, tol=1e-6)
    assert report.passed, report.max_rel_error
    assert not graph.track_switches


def test_finite_diff_linear_loss():
    coefficients = _randn(3, 4, seed=3)
    graph = ComputeGraph(lambda p, g: (p["w"] * coefficients).sum())
    report = mf_autodiff.finite_diff_check(graph, ParamSet([("w", _randn(3, 4, seed=4))]), tol=1e-6)
    assert report.passed, report.max_rel_error
    assert report.n_checked == 12


def test_finite_diff_detects_wrong_gradient(monkeypatch):
    exact_backward = mf_autodiff.backward

    def scaled_backward(graph, params, coordinates=None):
        return exact_backward(graph, params, coordinates).map(lambda _, t: 1.01 * t)

    monkeypatch.setattr(mf_autodiff, "backward", scaled_backward)
    params = ParamSet([("x", _randn(1, 2, 8, 8, seed=5)), ("conv.weight", _randn(3, 2, 3, 3, seed=6)),
                       ("conv.bias", _randn(3, seed=7))])
    report = mf_autodiff.finite_diff_check(_layer_graph("conv2d"), params, tol=1e-4)
    assert not report.passed
    assert report.worst == pytest.approx(0.01 / 1.01, rel=1e-3)


def test_graph_tracks_switches():
    x = torch.tensor([[[[1.0, -1.0], [0.0, 2.0]]]], dtype=DTYPE)

    def program(p, graph):
        y = forward_layer("relu", None, p["x"], graph, "act")
        return forward_layer("maxpool", None, y, graph, "pool").sum()

    graph = ComputeGraph(program)
    graph.evaluate({"x": x})
    assert graph.switches == []
    graph.track_switches = True
    graph.evaluate({"x": x})
    assert len(graph.switches) == 2
    assert torch.equal(graph.switches[0], x > 0)
    assert int(graph.switches[1].flatten()[0]) == 3


def test_conv2d_identity_kernel():
    x = _randn(2, 1, 5, 6, seed=9)
    params = {"weight": torch.ones(1, 1, 1, 1, dtype=DTYPE), "bias": torch.zeros(1, dtype=DTYPE)}
    assert torch.equal(forward_layer("conv2d", params, x), x)


def test_conv2d_box_filter_on_constant_image():
    x = torch.full((1, 1, 6, 6), 0.37, dtype=DTYPE)
    params = {"weight": torch.full((1, 1, 3, 3), 1.0 / 9.0, dtype=DTYPE), "bias": torch.zeros(1, dtype=DTYPE)}
    output = forward_layer("conv2d", params, x, padding_mode="reflect")
    assert output.shape == x.shape
    assert torch.allclose(output, x, rtol=0, atol=1e-14)


def test_conv2d_matches_direct_sum():
    x = _randn(1, 2, 5, 4, seed=12)
    weight, bias = _randn(3, 2, 3, 3, seed=13), _randn(3, seed=14)
    output = forward_layer("conv2d", {"weight": weight, "bias": bias}, x)
    padded = torch.zeros(1, 2, 7, 6, dtype=DTYPE)
    padded[:, :, 1:6, 1:5] = x
    for o in range(3):
        for i in range(5):
            for j in range(4):
                expected = float(bias[o])
                for c in range(2):
                    for u in range(3):
                        for v in range(3):
                            expected += float(weight[o, c, u, v]) * float(padded[0, c, i + u, j + v])
                assert float(output[0, o, i, j]) == pytest.approx(expected, rel=0, abs=1e-12)


@pytest.mark.parametrize('kind,inputs,match', [
    ("conv2d", torch.zeros(1, 3, 8, 8, dtype=DTYPE), "expected 2 input channels"),
    ("conv2d", torch.zeros(2, 8, 8, dtype=DTYPE), "4-D"),
    ("maxpool", torch.zeros(1, 1, 7, 8, dtype=DTYPE), "even height and width"),
    ("upsample", torch.zeros(8, 8, dtype=DTYPE), "4-D"),
    ("concat", [torch.zeros(1, 1, 8, 8, dtype=DTYPE), torch.zeros(1, 1, 4, 4, dtype=DTYPE)], "cannot concatenate"),
])
def test_forward_layer_shape_errors(kind, inputs, match):
    params = {"weight": torch.zeros(4, 2, 3, 3, dtype=DTYPE), "bias": torch.zeros(4, dtype=DTYPE)}
    with pytest.raises(ShapeError, match=match):
        forward_layer(kind, params if kind == "conv2d" else None, inputs, name="enc0.conv1")


def test_forward_layer_even_kernel():
    params = {"weight": torch.zeros(1, 1, 2, 2, dtype=DTYPE), "bias": torch.zeros(1, dtype=DTYPE)}
    with pytest.raises(ShapeError, match="odd k"):
        forward_layer("conv2d", params, torch.zeros(1, 1, 4, 4, dtype=DTYPE), name="head")


def test_forward_layer_unknown_kind():
    with pytest.raises(ValueError):
        forward_layer("dropout", None, torch.zeros(1, 1, 4, 4, dtype=DTYPE))


def test_compute_graph_records_nodes():
    params = ParamSet([("conv.weight", _randn(2, 1, 3, 3)), ("conv.bias", torch.zeros(2, dtype=DTYPE))])
    image = _randn(1, 1, 8, 8, seed=2)

    def program(p, graph):
        x = forward_layer("conv2d", param_slice(p, "conv"), image, graph, "conv")
        x = forward_layer("relu", None, x, graph, "conv.act")
        return forward_layer("maxpool", None, x, graph, "pool").sum()

    graph = ComputeGraph(program)
    graph.evaluate(params)
    assert [node.kind for node in graph.nodes] == ["conv2d", "relu", "maxpool"]
    assert graph.nodes[0].inputs == (-1,)
    assert graph.nodes[0].params == ("conv.weight", "conv.bias")
    assert graph.nodes[1].inputs == (0,)
    assert graph.nodes[2].shape == (1, 2, 4, 4)


def test_compute_graph_scalar_loss():
    graph = ComputeGraph(lambda p, g: p["a"] * 2)
    with pytest.raises(ShapeError):
        graph.evaluate(ParamSet([("a", torch.ones(3))]))


def test_backward_unused_parameter():
    params = ParamSet([("a", torch.tensor([1.0, 2.0])), ("b", torch.tensor([5.0]))])
    graph = ComputeGraph(lambda p, g: (p["a"] ** 2).sum())
    grads = mf_autodiff.backward(graph, params)
    assert torch.equal(grads["a"], torch.tensor([2.0, 4.0], dtype=DTYPE))
    assert torch.equal(grads["b"], torch.zeros(1, dtype=DTYPE))
    assert float(graph.loss) == 5.0


def test_backward_divergence():
    params = ParamSet([("a", torch.tensor([-1.0]))])
    graph = ComputeGraph(lambda p, g: torch.log(p["a"]).sum())
    with pytest.raises(TrainingDivergenceError) as err:
        mf_autodiff.backward(graph, params, {"client": "iron", "round": 3, "epoch": 0, "batch": 7})
    assert err.value.coordinates == {"client": "iron", "round": 3, "epoch": 0, "batch": 7}
    assert "client=iron" in str(err.value)
    assert "batch=7" in str(err.value)


def test_divergence_error_pickle():
    err = TrainingDivergenceError("Non-finite loss nan", {"batch": 2}).extend(client="iron", round=1)
    assert list(err.coordinates) == ["client", "round", "batch"]
    restored = pickle.loads(pickle.dumps(err))
    assert restored.coordinates == err.coordinates
    assert str(restored) == str(err)


def test_sgd_step():
    w = ParamSet([("a", torch.tensor([1.0, -2.0]))])
    g = ParamSet([("a", torch.tensor([0.5, 1.0]))])
    updated = mf_autodiff.sgd_step(w, g, 0.1)
    assert torch.allclose(updated["a"], torch.tensor([0.95, -2.1], dtype=DTYPE), rtol=0, atol=1e-15)
    assert mf_autodiff.sgd_step(w, g, 0.0).equal(w)
    with pytest.raises(ValueError):
        mf_autodiff.sgd_step(w, g, -0.1)


def test_adam_first_step():
    w = ParamSet([("a", torch.tensor([1.0, -2.0, 0.5]))])
    g = ParamSet([("a", torch.tensor([0.3, -4.0, 1e-3]))])
    state = OptimizerState.create("adam", 0.01, w)
    new_state, updated = mf_autodiff.adam_step(state, w, g)
    # Bias correction makes the first step lr * g / (|g| + eps)
    expected = w["a"] - 0.01 * g["a"] / (g["a"].abs() + 1e-8)
    assert float((updated["a"] - expected).abs().max()) < 1e-12
    assert new_state.step_count == 1
    assert state.step_count == 0
    assert state.first_moment.equal(w.zeros_like())


def test_optimizer_step_dispatch():
    w = ParamSet([("a", torch.tensor([1.0]))])
    g = ParamSet([("a", torch.tensor([2.0]))])
    state, updated = mf_autodiff.optimizer_step(OptimizerState.create("sgd", 0.5, w), w, g)
    assert state.step_count == 1
    assert float(updated["a"]) == 0.0
    state, _ = mf_autodiff.optimizer_step(OptimizerState.create("adam", 0.5, w), w, g)
    assert state.step_count == 1
    assert state.first_moment is not None


@pytest.mark.parametrize('kind,learning_rate', [
    ("rmsprop", 0.1),
    ("sgd", -1.0),
])
def test_optimizer_state_validation(kind, learning_rate):
    with pytest.raises(ValueError):
        OptimizerState(kind=kind, learning_rate=learning_rate)


def test_backward_sum_of_params():
    params = _params()
    graph = ComputeGraph(lambda p, g: sum(t.sum() for t in p.values()))
    grads = mf_autodiff.backward(graph, params)
    assert grads.equal(params.map(lambda _, t: torch.ones_like(t)))


def test_sgd_step_is_linear():
    w, g, h = _params(), _params().map(lambda _, t: t * 0.5 - 1.0), _params().map(lambda _, t: 0.2 - 0.3 * t)
    g_plus_h = ParamSet((name, g[name] + h[name]) for name in g.names)

    def displacement(grads, learning_rate):
        return ParamSet((name, w[name] - t) for name, t in mf_autodiff.sgd_step(w, grads, learning_rate).items())

    both = displacement(g_plus_h, 0.1)
    separate = ParamSet((name, t + displacement(h, 0.1)[name]) for name, t in displacement(g, 0.1).items())
    assert both.max_abs_diff(separate) < 1e-12
    assert displacement(g, 0.2).max_abs_diff(displacement(g.map(lambda _, t: 2 * t), 0.1)) < 1e-12


def test_adam_zero_gradient():
    w = _params()
    state = OptimizerState.create("adam", 0.01, w)
    for _ in range(3):
        state, updated = mf_autodiff.adam_step(state, w, w.zeros_like())
        assert updated.equal(w)
    assert state.step_count == 3
    assert state.first_moment.equal(w.zeros_like())
    assert state.second_moment.equal(w.zeros_like())


def test_adam_is_deterministic():
    def trajectory():
        w = _params()
        state = OptimizerState.create("adam", 0.05, w)
        points = []
        for step in range(5):
            grads = w.map(lambda name, t: torch.sin(t * (step + 1)))
            state, w = mf_autodiff.adam_step(state, w, grads)
            points.append(w)
        return points

    for first, second in zip(trajectory(), trajectory()):
        assert first.equal(second)


def teardown_function():
    remove_tmp_dir()
