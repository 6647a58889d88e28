#!/usr/bin/env python
# -*- coding: utf-8
# pytest unit tests for microfed.federated

import json
from dataclasses import replace

import numpy as np
import pytest
import torch
from pathlib import Path

from microfed import autodiff as mf_autodiff
from microfed import federated as mf_federated
from microfed import models as mf_models
from microfed import training as mf_training
from microfed.autodiff import DTYPE, IncompatibleParamsError, ParamSet, TrainingDivergenceError
from microfed.federated import FederatedConfig, PrivacyViolationError, Server
from testing.unit_tests.t_utils import create_tmp_dir, __tmp_dir__
from testing.common_testing_util import remove_tmp_dir, make_dataset, make_two_clients, STYLE_DARK_BOUNDARY, \
    TINY_SEGMENTER, TINY_STYLE_MODEL

FAST = FederatedConfig(rounds=2, rounds_separate=2, batch_size=4, learning_rate=1e-3, seed=5)


def setup_function():
    create_tmp_dir()


def _constant(value, shape=(2, 3)):
    return ParamSet([("w", torch.full(shape, float(value), dtype=DTYPE))])


def test_fedavg_weighted_mean():
    aggregate = mf_federated.fedavg_aggregate([(_constant(1.0), 1), (_constant(4.0), 2)])
    assert torch.allclose(aggregate["w"], torch.full((2, 3), 3.0, dtype=DTYPE), rtol=0, atol=1e-15)


def test_fedavg_single_update():
    params = _constant(2.5)
    assert mf_federated.fedavg_aggregate([(params, 7)]) is params


def test_fedavg_order_and_scale_invariance():
    generator = torch.Generator().manual_seed(0)
    updates = [(ParamSet([("w", torch.randn(4, 4, generator=generator, dtype=DTYPE))]), n) for n in (3, 5, 5, 11)]
    reference = mf_federated.fedavg_aggregate(updates)
    assert mf_federated.fedavg_aggregate(list(reversed(updates))).equal(reference)
    assert mf_federated.fedavg_aggregate([updates[2], updates[0], updates[3], updates[1]]).equal(reference)
    assert mf_federated.fedavg_aggregate([(p, 7 * n) for p, n in updates]).equal(reference)


def test_fedavg_within_client_range():
    generator = torch.Generator().manual_seed(1)
    updates = [(ParamSet([("w", torch.randn(50, generator=generator, dtype=DTYPE))]), n) for n in (1, 2, 3)]
    aggregate = mf_federated.fedavg_aggregate(updates)["w"]
    stacked = torch.stack([p["w"] for p, _ in updates])
    assert bool(torch.all(aggregate >= stacked.min(dim=0).values))
    assert bool(torch.all(aggregate <= stacked.max(dim=0).values))


@pytest.mark.parametrize('updates', [
    [],
    [(_constant(1.0), 0)],
    [(_constant(1.0), 1), (_constant(2.0), 1.5)],
    [(_constant(1.0), 1), (_constant(2.0), -2)],
])
def test_fedavg_invalid_weights(updates):
    with pytest.raises(ValueError):
        mf_federated.fedavg_aggregate(updates)


def test_fedavg_incompatible():
    with pytest.raises(IncompatibleParamsError):
        mf_federated.fedavg_aggregate([(_constant(1.0), 1), (_constant(1.0, (3, 2)), 1)])


@pytest.mark.parametrize('params', [
    {"rounds": 0},
    {"local_epochs": 0},
    {"learning_rate": -1.0},
    {"selection": "test_map"},
])
def test_federated_config_invalid(params):
    with pytest.raises(ValueError):
        FederatedConfig(**params)


def test_federated_config_from_dict():
    cfg = FederatedConfig.from_dict({"rounds": 3, "optimizer": "sgd", "learning_rate": 0.1, "unused": 1}, seed=9)
    assert (cfg.rounds, cfg.optimizer, cfg.learning_rate, cfg.seed) == (3, "sgd", 0.1, 9)
    assert cfg.new_optimizer(_constant(0.0)).kind == "sgd"
    assert FAST.new_optimizer(_constant(0.0)).first_moment is not None


def test_server_relays_copies():
    server = Server()
    params = _constant(1.0)
    received = server.send(0, "train", "server", "a", params)
    assert received.equal(params)
    assert received["w"].data_ptr() != params["w"].data_ptr()
    assert server.send(0, "train", "a", "server", {"n_samples": 4}) == {"n_samples": 4}
    assert [entry.kind for entry in server.transcript] == ["checkpoint", "metadata"]
    assert server.transcript[0].size == len(params.to_bytes())


def test_server_refuses_images():
    server = Server()
    with pytest.raises(PrivacyViolationError):
        server.send(0, "train", "a", "server", np.zeros((16, 16)))
    with pytest.raises(PrivacyViolationError):
        server.send(0, "train", "a", "server", torch.zeros(16, 16))
    assert server.transcript == []


def test_transcript_round_trip():
    server = Server()
    server.send(1, "validate", "a", "server", {"loss": 0.5})
    path_transcript = Path(__tmp_dir__, "transcript.jsonl")
    server.write_transcript(path_transcript)
    entries = mf_federated.read_transcript(path_transcript)
    assert entries == [server.transcript[0].to_dict()]
    assert mf_federated.audit_transcript(entries) == []


def test_audit_flags_raw_payloads():
    entries = [{"round": 0, "stage": "train", "sender": "a", "recipient": "server", "kind": "checkpoint"},
               {"round": 0, "stage": "train", "sender": "b", "recipient": "server", "kind": "image"}]
    violations = mf_federated.audit_transcript(entries)
    assert len(violations) == 1
    assert "'image'" in violations[0]


def test_fedavg_equals_central_sgd_step():
    # Full-batch SGD on equal-size clients: one round of FedAvg is one centralized step
    datasets = make_two_clients(n_train=2)
    clients = mf_federated.make_clients(datasets)
    cfg = FederatedConfig(rounds=1, local_epochs=1, batch_size=8, learning_rate=0.1, optimizer="sgd", seed=2)
    w0 = mf_models.build_segmenter(TINY_SEGMENTER, 1)
    federated, _ = mf_federated.federated_training(clients, cfg, TINY_SEGMENTER, init_params=w0)

    samples = datasets[0].train + datasets[1].train
    graph = mf_models.segmentation_graph(np.stack([s.image for s in samples]), np.stack([s.label for s in samples]),
                                         TINY_SEGMENTER)
    central = mf_autodiff.sgd_step(w0, mf_autodiff.backward(graph, w0), 0.1)
    assert federated.max_abs_diff(central) < 1e-10


def test_federated_training_outputs():
    clients = mf_federated.make_clients(make_two_clients())
    cfg = replace(FAST, rounds=3, save_round_checkpoints=True)
    path_output = Path(__tmp_dir__, "fedavg")
    best, history = mf_federated.federated_training(clients, cfg, TINY_SEGMENTER, path_output=path_output)
    assert [record.round for record in history] == [0, 1, 2]
    assert history[0].selected
    assert set(history[0].client_losses) == {"austenite", "iron"}

    with open(path_output / "rounds.jsonl") as fp:
        records = [json.loads(line) for line in fp]
    assert [r["mean_loss"] for r in records] == [record.mean_loss for record in history]
    mean_losses = [r["mean_loss"] for r in records]
    best_round = mean_losses.index(min(mean_losses))
    assert records[best_round]["selected"]
    assert _min_loss_is_running_minimum(records)
    assert best.equal(ParamSet.load(path_output / "best_model.fgps"))
    assert best.equal(ParamSet.load(path_output / f"round_{best_round}.fgps"))


def _min_loss_is_running_minimum(records):
    running = float("inf")
    for record in records:
        running = min(running, record["mean_loss"])
        if record["min_loss"] != running:
            return False
    return True


def test_federated_training_deterministic():
    first, _ = mf_federated.federated_training(mf_federated.make_clients(make_two_clients()), FAST, TINY_SEGMENTER)
    second, _ = mf_federated.federated_training(mf_federated.make_clients(make_two_clients()), FAST,
                                                TINY_SEGMENTER)
    threaded, _ = mf_federated.federated_training(mf_federated.make_clients(make_two_clients()),
                                                  replace(FAST, n_jobs=2), TINY_SEGMENTER)
    assert first.equal(second)
    assert first.equal(threaded)


def test_federated_training_transcript_is_clean():
    server = Server()
    mf_federated.federated_training(mf_federated.make_clients(make_two_clients()), FAST, TINY_SEGMENTER,
                                    server=server)
    assert mf_federated.audit_transcript(server.transcript) == []
    # Per round and client: broadcast, checkpoint, size, validation model, validation loss
    assert len(server.transcript) == FAST.rounds * 2 * 5


def test_optimizer_state_persists_across_rounds():
    clients = mf_federated.make_clients(make_two_clients())
    mf_federated.federated_training(clients, replace(FAST, batch_size=8), TINY_SEGMENTER)
    assert [client.optimizer.step_count for client in clients] == [2, 2]


def test_client_local_training():
    client = mf_federated.make_clients([make_dataset("austenite", STYLE_DARK_BOUNDARY)])[0]
    w = mf_models.build_segmenter(TINY_SEGMENTER, 0)
    snapshot = ParamSet(w)
    params = mf_federated.client_local_training(client, w, FAST, TINY_SEGMENTER)
    assert w.equal(snapshot)
    assert client.params is params
    assert params.is_compatible(w) and not params.equal(w)
    assert client.optimizer.step_count == 1

    mf_federated.client_local_training(client, params, FAST, TINY_SEGMENTER, round_index=1)
    assert client.optimizer.step_count == 2

    # A different architecture starts a fresh optimizer
    wider = replace(TINY_SEGMENTER, base_channels=3)
    mf_federated.client_local_training(client, mf_models.build_segmenter(wider, 0), FAST, wider)
    assert client.optimizer.step_count == 1


def test_client_local_training_full_batch_sgd():
    client = mf_federated.make_clients([make_dataset("austenite", STYLE_DARK_BOUNDARY)])[0]
    samples = client.dataset.train
    w = mf_models.build_segmenter(TINY_SEGMENTER, 0)
    cfg = FederatedConfig(rounds=1, batch_size=8, learning_rate=0.1, optimizer="sgd", seed=5)
    params = mf_federated.client_local_training(client, w, cfg, TINY_SEGMENTER)

    graph = mf_models.segmentation_graph(np.stack([s.image for s in samples]), np.stack([s.label for s in samples]),
                                         TINY_SEGMENTER)
    expected = mf_autodiff.sgd_step(w, mf_autodiff.backward(graph, w), 0.1)
    # One batch holding every sample, shuffled; only the summation order differs
    assert params.max_abs_diff(expected) < 1e-12


@pytest.mark.parametrize('optimizer', ["sgd", "adam"])
def test_client_local_training_zero_learning_rate(optimizer):
    client = mf_federated.make_clients([make_dataset("austenite", STYLE_DARK_BOUNDARY)])[0]
    w = mf_models.build_segmenter(TINY_SEGMENTER, 0)
    cfg = FederatedConfig(rounds=1, local_epochs=2, batch_size=2, learning_rate=0.0, optimizer=optimizer, seed=5)
    params = mf_federated.client_local_training(client, w, cfg, TINY_SEGMENTER)
    assert params.equal(w)
    assert client.optimizer.step_count == 4


def test_client_local_training_replays_batch_order():
    client = mf_federated.make_clients([make_dataset("austenite", STYLE_DARK_BOUNDARY)])[0]
    samples = client.dataset.train
    assert len(samples) == 4
    w = mf_models.build_segmenter(TINY_SEGMENTER, 0)
    cfg = FederatedConfig(rounds=1, local_epochs=2, batch_size=3, learning_rate=0.05, optimizer="sgd", seed=3)
    params = mf_federated.client_local_training(client, w, cfg, TINY_SEGMENTER, round_index=2)

    expected = w
    for epoch in range(2):
        batches = mf_training.batch_order(3, 0, 2, epoch, 4, 3)
        assert [len(indices) for indices in batches] == [3, 1]
        for indices in batches:
            graph = mf_models.segmentation_graph(np.stack([samples[i].image for i in indices]),
                                                 np.stack([samples[i].label for i in indices]), TINY_SEGMENTER)
            expected = mf_autodiff.sgd_step(expected, mf_autodiff.backward(graph, expected), 0.05)
    assert params.equal(expected)
    assert client.optimizer.step_count == 4


def test_zero_learning_rate_keeps_first_round():
    cfg = replace(FAST, rounds=3, learning_rate=0.0, optimizer="sgd")
    w0 = mf_models.build_segmenter(TINY_SEGMENTER, 0)
    best, history = mf_federated.federated_training(mf_federated.make_clients(make_two_clients()), cfg,
                                                    TINY_SEGMENTER, init_params=w0)
    assert len({record.mean_loss for record in history}) == 1
    assert [record.selected for record in history] == [True, False, False]
    assert best.equal(w0)


def test_divergence_reports_coordinates():
    clients = mf_federated.make_clients(make_two_clients())
    broken = mf_models.build_segmenter(TINY_SEGMENTER, 0).map(lambda _, t: t * float("nan"))
    with pytest.raises(TrainingDivergenceError) as err:
        mf_federated.federated_training(clients, FAST, TINY_SEGMENTER, init_params=broken)
    assert err.value.coordinates["client"] == "austenite"
    assert err.value.coordinates["round"] == 0


def test_style_transfer_grows_train_split():
    clients = mf_federated.make_clients(make_two_clients())
    server = Server()
    path_output = Path(__tmp_dir__, "fedtransfer")
    styles = mf_federated.federated_image_style_transfer(clients, TINY_STYLE_MODEL, 3, server,
                                                         path_output=path_output)
    assert set(styles) == {"austenite", "iron"}
    assert [client.n_samples for client in clients] == [8, 8]
    synthetic = clients[0].dataset.train[4:]
    assert [s.sample_id for s in synthetic] == [f"austenite_000{k}@iron" for k in range(4)]
    assert all(s.origin == "synthetic-from-iron" for s in synthetic)
    np.testing.assert_array_equal(synthetic[0].label, clients[0].dataset.train[0].label)
    assert len(clients[0].dataset.val) == 1
    assert not any(s.is_synthetic for s in clients[0].dataset.val + clients[0].dataset.test)
    assert Path(path_output, "style_models", "iron", "generator.fgps").is_file()
    assert {entry.stage for entry in server.transcript} == {"style"}
    assert mf_federated.audit_transcript(server.transcript) == []


def test_style_transfer_single_client():
    clients = mf_federated.make_clients([make_dataset("austenite", STYLE_DARK_BOUNDARY)])
    assert mf_federated.federated_image_style_transfer(clients, TINY_STYLE_MODEL, 0) == {}
    assert clients[0].n_samples == 4


def test_fed_transfer_privacy():
    clients = mf_federated.make_clients(make_two_clients())
    server = Server()
    path_output = Path(__tmp_dir__, "fedtransfer")
    _, history = mf_federated.fed_transfer(clients, FAST, TINY_SEGMENTER, TINY_STYLE_MODEL, server,
                                           path_output=path_output)
    assert len(history) == FAST.rounds
    server.write_transcript(path_output / "transcript.jsonl")
    entries = mf_federated.read_transcript(path_output / "transcript.jsonl")
    assert mf_federated.audit_transcript(entries) == []
    assert {entry["kind"] for entry in entries} == {"checkpoint", "metadata"}
    assert {entry["stage"] for entry in entries} == {"style", "train", "validate"}


def test_fed_transfer_without_style_transfer():
    clients = mf_federated.make_clients(make_two_clients())
    path_output = Path(__tmp_dir__, "fedavg")
    mf_federated.fed_transfer(clients, replace(FAST, style_transfer=False), TINY_SEGMENTER, TINY_STYLE_MODEL,
                              path_output=path_output)
    assert not Path(path_output, "style_models").exists()
    assert [client.n_samples for client in clients] == [4, 4]


def test_separate_single_client_equals_federated():
    dataset = make_dataset("austenite", STYLE_DARK_BOUNDARY)
    cfg = replace(FAST, rounds=1, rounds_separate=3)
    path_output = Path(__tmp_dir__, "separate")
    results = mf_federated.separate_training(mf_federated.make_clients([dataset]), cfg, TINY_SEGMENTER,
                                             path_output=path_output)
    federated, history = mf_federated.federated_training(mf_federated.make_clients([dataset]),
                                                         replace(cfg, rounds=3), TINY_SEGMENTER)
    separate, separate_history = results["austenite"]
    assert separate.equal(federated)
    assert len(separate_history) == 3
    assert [r.mean_loss for r in separate_history] == [r.mean_loss for r in history]
    assert Path(path_output, "austenite", "best_model.fgps").is_file()
    assert Path(path_output, "austenite", "transcript.jsonl").is_file()


def test_separate_training_keys():
    results = mf_federated.separate_training(mf_federated.make_clients(make_two_clients()), FAST, TINY_SEGMENTER)
    assert list(results) == ["austenite", "iron"]


def test_centralized_training():
    server = Server()
    best, history = mf_federated.centralized_training(mf_federated.make_clients(make_two_clients()), FAST,
                                                      TINY_SEGMENTER, server=server)
    assert len(history) == FAST.rounds
    assert list(history[0].client_losses) == ["pooled"]
    assert best.is_compatible(mf_models.build_segmenter(TINY_SEGMENTER, 0))
    assert mf_federated.audit_transcript(server.transcript) == []


def test_centralized_single_client_equals_separate():
    dataset = make_dataset("austenite", STYLE_DARK_BOUNDARY)
    cfg = replace(FAST, rounds=3, rounds_separate=3)
    central, central_history = mf_federated.centralized_training(mf_federated.make_clients([dataset]), cfg,
                                                                 TINY_SEGMENTER)
    separate, separate_history = mf_federated.separate_training(mf_federated.make_clients([dataset]), cfg,
                                                                TINY_SEGMENTER)["austenite"]
    assert central.equal(separate)
    assert [r.mean_loss for r in central_history] == [r.mean_loss for r in separate_history]


def teardown_function():
    remove_tmp_dir()
