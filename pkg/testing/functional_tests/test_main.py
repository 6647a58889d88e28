from pathlib import Path

import pandas as pd
import pytest

from microfed import main as mf_main
from microfed import utils as mf_utils
from microfed.autodiff import ParamSet
from testing.functional_tests.t_utils import __tmp_dir__, create_tmp_dir, check_config_files
from testing.common_testing_util import remove_tmp_dir, tiny_config, write_config


def setup_function():
    create_tmp_dir()


def _config(**overrides):
    config = tiny_config(path_output=str(Path(__tmp_dir__, "out")), **overrides)
    return write_config(config, Path(__tmp_dir__, "config.json"))


def _run(command, path_config, *extra):
    return mf_main.main(args=[command, "-c", path_config, *extra])


def test_synth_is_reproducible():
    path_config = _config()
    assert _run("synth", path_config) == mf_main.EXIT_SUCCESS
    path_dataset = Path(__tmp_dir__, "out", "seed-7", "dataset")
    assert Path(path_dataset, "dataset.json").is_file()
    assert Path(path_dataset, "austenite", "test", "austenite_0005_image.pgm").is_file()
    digest = mf_utils.directory_digest(path_dataset)

    assert _run("synth", path_config) == mf_main.EXIT_SUCCESS
    assert mf_utils.directory_digest(path_dataset) == digest

    assert _run("synth", path_config, "--out", str(Path(__tmp_dir__, "elsewhere"))) == mf_main.EXIT_SUCCESS
    path_other = Path(__tmp_dir__, "elsewhere", "seed-7", "dataset")
    assert mf_utils.directory_digest(path_other, exclude=["config_file.json"]) == \
        mf_utils.directory_digest(path_dataset, exclude=["config_file.json"])


def test_synth_repeat():
    path_config = _config(repeat=2)
    assert _run("synth", path_config, "--seed", "3") == mf_main.EXIT_SUCCESS
    assert sorted(p.name for p in Path(__tmp_dir__, "out").glob("seed-*")) == ["seed-3", "seed-4"]
    assert mf_utils.directory_digest(Path(__tmp_dir__, "out", "seed-3", "dataset"), exclude=["config_file.json"]) != \
        mf_utils.directory_digest(Path(__tmp_dir__, "out", "seed-4", "dataset"), exclude=["config_file.json"])


def test_train_eval_report():
    path_config = _config()
    path_out = Path(__tmp_dir__, "out")
    assert _run("synth", path_config) == mf_main.EXIT_SUCCESS
    for mode in ["separate", "central", "fedavg", "fedtransfer"]:
        assert _run("train", path_config, "--mode", mode) == mf_main.EXIT_SUCCESS
    path_runs = Path(path_out, "seed-7", "runs")
    assert Path(path_runs, "fedtransfer", "best_model.fgps").is_file()
    assert Path(path_runs, "fedtransfer", "style_models", "iron", "generator.fgps").is_file()
    assert not Path(path_runs, "fedavg", "style_models").exists()
    assert Path(path_runs, "separate", "austenite", "best_model.fgps").is_file()
    assert Path(path_runs, "central", "transcript.jsonl").is_file()
    check_config_files(path_out)

    manifest = mf_main.RunManifest.load(Path(path_runs, "fedtransfer"))
    assert manifest.mode == "fedtransfer"
    assert manifest.seed == 7
    assert manifest.clients == ["austenite", "iron"]
    assert "best_model.fgps" in manifest.artifacts
    assert Path(path_runs, "fedtransfer", manifest.dataset_path).resolve() == \
        Path(path_out, "seed-7", "dataset").resolve()

    assert _run("eval", path_config) == mf_main.EXIT_SUCCESS
    results = mf_main.RunManifest.load(Path(path_runs, "separate")).results
    assert set(results) == {"separate-austenite", "separate-iron"}
    assert set(results["separate-iron"]) == {"austenite", "iron", "global"}
    assert Path(path_runs, "central", "eval", "global.json").is_file()
    assert Path(path_runs, "separate", "eval", "iron", "austenite.csv").is_file()

    assert _run("report", path_config) == mf_main.EXIT_SUCCESS
    path_report = Path(path_out, "report")
    for name in ["comparison.csv", "comparison.txt", "comparison.dat", "comparison.png", "p_values.csv"]:
        assert Path(path_report, name).is_file()
    table = pd.read_csv(Path(path_report, "comparison.csv"), index_col="method")
    assert list(table.index) == ["central", "fedavg", "fedtransfer", "separate-austenite", "separate-iron"]


def test_train_is_reproducible():
    path_config = _config()
    assert _run("synth", path_config) == mf_main.EXIT_SUCCESS
    path_run = Path(__tmp_dir__, "out", "seed-7", "runs", "fedavg")
    assert _run("train", path_config, "--mode", "fedavg") == mf_main.EXIT_SUCCESS
    first = ParamSet.load(Path(path_run, "best_model.fgps"))
    assert _run("train", path_config, "--mode", "fedavg") == mf_main.EXIT_SUCCESS
    assert ParamSet.load(Path(path_run, "best_model.fgps")).equal(first)


def test_reproduce():
    path_config = _config(repeat=2, modes=["central", "fedavg"])
    assert _run("reproduce", path_config) == mf_main.EXIT_SUCCESS
    table = pd.read_csv(Path(__tmp_dir__, "out", "report", "comparison.csv"), index_col="method")
    assert list(table["n_seeds"]) == [2, 2]
    assert not table["global MAP std"].isna().any()
    p_values = pd.read_csv(Path(__tmp_dir__, "out", "report", "p_values.csv"), index_col=0)
    assert list(p_values.columns) == ["central", "fedavg"]


@pytest.mark.parametrize('args', [
    ["train"],
    ["train", "--mode", "federated"],
    ["unknown"],
])
def test_bad_arguments(args):
    assert mf_main.main(args=args) == mf_main.EXIT_CONFIG_ERROR


@pytest.mark.parametrize('overrides', [
    {"federated": {"roundz": 2}},
    {"federated": {"rounds": 0}},
    {"dataset": {"clients": [{"client_id": "a", "n_samples": 3}]}},
])
def test_config_errors(overrides):
    assert _run("synth", _config(**overrides)) == mf_main.EXIT_CONFIG_ERROR
    assert not Path(__tmp_dir__, "out", "seed-7").exists()


def test_missing_config_file():
    assert _run("synth", str(Path(__tmp_dir__, "missing.json"))) == mf_main.EXIT_CONFIG_ERROR


def test_train_without_dataset():
    assert _run("train", _config(), "--mode", "central") == mf_main.EXIT_IO_ERROR


def test_eval_without_runs():
    assert _run("eval", _config()) == mf_main.EXIT_IO_ERROR


def test_eval_detects_tampering():
    path_config = _config()
    assert _run("synth", path_config) == mf_main.EXIT_SUCCESS
    assert _run("train", path_config, "--mode", "central") == mf_main.EXIT_SUCCESS
    path_model = Path(__tmp_dir__, "out", "seed-7", "runs", "central", "best_model.fgps")
    payload = bytearray(path_model.read_bytes())
    payload[-1] ^= 0xFF
    path_model.write_bytes(bytes(payload))
    assert _run("eval", path_config) == mf_main.EXIT_IO_ERROR


def test_corrupted_dataset():
    path_config = _config()
    assert _run("synth", path_config) == mf_main.EXIT_SUCCESS
    path_image = Path(__tmp_dir__, "out", "seed-7", "dataset", "iron", "train", "iron_0000_image.pgm")
    path_image.write_bytes(b"P5\n16 16\n255\n")
    assert _run("train", path_config, "--mode", "central") == mf_main.EXIT_IO_ERROR


def test_divergence_exit_code():
    path_config = _config(federated={"rounds": 2, "batch_size": 8, "optimizer": "sgd", "learning_rate": 1e300})
    assert _run("synth", path_config) == mf_main.EXIT_SUCCESS
    assert _run("train", path_config, "--mode", "fedavg") == mf_main.EXIT_DIVERGENCE


def teardown_function():
    remove_tmp_dir()
