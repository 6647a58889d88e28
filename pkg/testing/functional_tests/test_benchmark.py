"""Multi-seed directional checks on the desk benchmark.

Slow: deselected by default, run with ``pytest -m benchmark``.
"""
from pathlib import Path

import numpy as np
import pytest

from microfed import config_manager as mf_config_manager
from microfed import main as mf_main
from testing.functional_tests.t_utils import __tmp_dir__, create_tmp_dir
from testing.common_testing_util import remove_tmp_dir

PATH_CONFIG_DESK = Path(mf_config_manager.PATH_CONFIG_DEFAULT).parent / "config_desk.json"


def setup_function():
    create_tmp_dir()


def _seed_means(path_output):
    """Per-seed results averaged over seeds, keyed by model then test set then metric."""
    per_seed = {}
    for path_run in sorted(Path(path_output).glob("seed-*/runs/*")):
        for model, summaries in mf_main.RunManifest.load(path_run).results.items():
            for test_set, summary in summaries.items():
                for metric in ("MAP", "MVI", "ARI"):
                    per_seed.setdefault(model, {}).setdefault(test_set, {}).setdefault(metric, []).append(
                        summary[metric])
    return {model: {test_set: {metric: float(np.mean(values)) for metric, values in metrics.items()}
                    for test_set, metrics in test_sets.items()}
            for model, test_sets in per_seed.items()}


@pytest.mark.benchmark
def test_desk_benchmark_orderings():
    path_output = Path(__tmp_dir__, "desk")
    assert mf_main.main(args=["reproduce", "-c", str(PATH_CONFIG_DESK), "--out", str(path_output),
                              "--jobs", "4"]) == mf_main.EXIT_SUCCESS
    means = _seed_means(path_output)
    clients = ["austenite", "iron"]

    # Separate models degrade on the other client's test split
    for own, other in (clients, clients[::-1]):
        separate = means[f"separate-{own}"]
        assert separate[own]["MAP"] - separate[other]["MAP"] >= 0.05

    fedtransfer, fedavg, central = means["fedtransfer"], means["fedavg"], means["central"]
    assert fedtransfer["global"]["MAP"] - fedavg["global"]["MAP"] >= 0.02
    assert fedtransfer["global"]["MVI"] < fedavg["global"]["MVI"]
    assert abs(fedtransfer["global"]["MAP"] - central["global"]["MAP"]) <= 0.05

    assert Path(path_output, "report", "comparison.csv").is_file()


def teardown_function():
    remove_tmp_dir()
