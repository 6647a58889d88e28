#!/usr/bin/env python
# -*- coding: utf-8
# pytest unit tests for microfed.config_manager

import pytest
from pathlib import Path

from microfed import config_manager as mf_config_manager
from microfed.config_manager import ConfigError, ConfigurationManager
from testing.unit_tests.t_utils import create_tmp_dir, __tmp_dir__
from testing.common_testing_util import remove_tmp_dir, tiny_config, write_config, TINY_CONFIG


def setup_function():
    create_tmp_dir()


def test_default_config_is_valid():
    config = ConfigurationManager().get_config()
    assert config["seed"] == 0
    assert config["modes"] == ["separate", "central", "fedavg", "fedtransfer"]
    assert [c["n_samples"] for c in config["dataset"]["clients"]] == [318, 318]


def test_clients_filled_from_template():
    config = ConfigurationManager.from_dict(TINY_CONFIG).get_config()
    clients = config["dataset"]["clients"]
    assert [c["client_id"] for c in clients] == ["austenite", "iron"]
    assert clients[1]["style"]["mean_boundary"] == 0.8
    assert set(clients[1]["style"]) == {"mean_boundary", "mean_grain", "grain_jitter", "noise_std", "blur_radius",
                                        "texture_frequency", "texture_amplitude"}
    assert config["federated"]["rounds"] == 2
    assert config["federated"]["optimizer"] == "adam"
    assert config["dataset"]["split_ratio"] == [560, 140, 192]


def test_config_from_file():
    path_config = write_config(tiny_config(seed=11), Path(__tmp_dir__, "config.json"))
    config = ConfigurationManager(path_config).get_config()
    assert config["seed"] == 11


@pytest.mark.parametrize('context,match', [
    ({"federated": {"roundz": 3}}, "Unknown configuration key 'federated.roundz'"),
    ({"colour": "red"}, "Unknown configuration key 'colour'"),
    ({"dataset": {"clients": [{"client_id": "a", "n_samples": 6, "colour": 1}]}},
     r"dataset.clients\[0\].colour"),
    ({"seed": -1}, "'seed'"),
    ({"seed": 1.5}, "'seed'"),
    ({"federated": {"rounds": 0}}, "'federated.rounds'"),
    ({"federated": {"optimizer": "rmsprop"}}, "'federated.optimizer'"),
    ({"modes": ["federated"]}, "'modes'"),
    ({"modes": []}, "'modes'"),
    ({"style_model": {"lambda_l1": -1.0}}, "'style_model.lambda_l1'"),
    ({"segmenter": {"kernel_size": 4}}, "'segmenter.kernel_size'"),
    ({"dataset": {"image_size": [16, 18]}}, "divisible"),
    ({"dataset": {"n_sites": [6, 3]}}, "'dataset.n_sites'"),
    ({"augmentation": {"random_erasing": {"area_fraction_range": [0.2, 0.7]}}}, "area_fraction_range"),
    ({"evaluation": {"partition_mode": "all"}}, "'evaluation.partition_mode'"),
])
def test_invalid_values(context, match):
    with pytest.raises(ConfigError, match=match):
        ConfigurationManager.from_dict(context).get_config()


@pytest.mark.parametrize('clients,match', [
    ([{"client_id": "a", "n_samples": 6}, {"client_id": "a", "n_samples": 6}], "unique"),
    ([{"client_id": "global", "n_samples": 6}], r"clients\[0\].client_id"),
    ([{"client_id": "pooled", "n_samples": 6}], r"clients\[0\].client_id"),
    ([{"client_id": "a/b", "n_samples": 6}], r"clients\[0\].client_id"),
    ([{"client_id": "a", "n_samples": 2}], r"clients\[0\].n_samples"),
    ([{"client_id": "a", "n_samples": 6}, {"client_id": "b", "n_samples": 3}], r"clients\[1\].n_samples"),
    ([{"client_id": "a", "n_samples": 6, "style": {"noise_std": 0.9}}], "noise_std"),
    ([], "'dataset.clients'"),
])
def test_invalid_clients(clients, match):
    with pytest.raises(ConfigError, match=match):
        ConfigurationManager.from_dict({"dataset": {"clients": clients}}).get_config()


def test_missing_file():
    with pytest.raises(ConfigError, match="does not exist"):
        ConfigurationManager(str(Path(__tmp_dir__, "nowhere.json")))


def test_directory_instead_of_file():
    with pytest.raises(ConfigError, match="is a directory"):
        ConfigurationManager(__tmp_dir__)


def test_not_a_json_extension():
    path_config = Path(__tmp_dir__, "config.yaml")
    path_config.write_text("{}")
    with pytest.raises(ConfigError, match="not a .json file"):
        ConfigurationManager(str(path_config))


def test_invalid_json():
    path_config = Path(__tmp_dir__, "config.json")
    path_config.write_text("{\"seed\": ")
    with pytest.raises(ConfigError, match="not valid JSON"):
        ConfigurationManager(str(path_config))


def test_update_nested():
    merged = mf_config_manager.update({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"b": 5}})
    assert merged == {"a": {"b": 5, "c": 2}, "d": 3}


def teardown_function():
    remove_tmp_dir()
