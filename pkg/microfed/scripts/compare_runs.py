#!/usr/bin/env python
##############################################################
#
# This script compares evaluated runs, method by method, over seeds
#
# Usage: microfed_compare_runs --runs out/seed-*/runs/* -o out/report
#
##############################################################

import argparse
from typing import List, Sequence, Union

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from loguru import logger
from pathlib import Path
from scipy.stats import ttest_ind_from_stats

from microfed import utils as mf_utils
from microfed.evaluation import GLOBAL_TEST_SET
from microfed.keywords import ManifestKW

METRICS = ("MAP", "MVI", "ARI")
# True when larger is better
METRIC_HIGHER_IS_BETTER = {"MAP": True, "MVI": False, "ARI": True}
RUN_MANIFEST = "manifest.json"


def get_parser():
    parser = argparse.ArgumentParser()
    parser.add_argument("-r", "--runs", required=True, nargs="+",
                        help="Evaluated run directories (each holding a manifest.json with results).",
                        metavar=mf_utils.Metavar.folder)
    parser.add_argument("-o", "--output", dest="out", required=True,
                        help="Output folder of the comparison files.",
                        metavar=mf_utils.Metavar.folder)
    return parser


def collect_results(path_runs: Sequence[Union[str, Path]]) -> pd.DataFrame:
    """Gather the evaluation results stored in run manifests.

    Returns:
        pandas.DataFrame: One row per (method, seed, test set) with a column per metric. Test sets keep the
        client order of the first manifest, followed by the global average.
    """
    rows = []
    for path_run in path_runs:
        path_manifest = Path(path_run) / RUN_MANIFEST
        manifest = mf_utils.load_json_file(path_manifest)
        results = manifest[ManifestKW.RESULTS]
        if not results:
            raise ValueError(f"{path_manifest} holds no results; evaluate the run first.")
        for method, summaries in results.items():
            for test_set, summary in summaries.items():
                rows.append({"method": method, "seed": manifest[ManifestKW.SEED], "test_set": test_set,
                             **{metric: summary[metric] for metric in METRICS}})
        logger.info(f"Read {len(results)} evaluated model(s) from {path_run}.")
    df = pd.DataFrame(rows)
    duplicated = df.duplicated(["method", "seed", "test_set"])
    if duplicated.any():
        raise ValueError(f"Several runs report the same method and seed: "
                         f"{df.loc[duplicated, ['method', 'seed']].drop_duplicates().values.tolist()}.")
    return df


def _ordered(values) -> List[str]:
    seen = list(dict.fromkeys(values))
    return [v for v in seen if v != GLOBAL_TEST_SET] + ([GLOBAL_TEST_SET] if GLOBAL_TEST_SET in seen else [])


def compute_statistics(df: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation over seeds of every (test set, metric) column, per method.

    The standard deviation is left empty when a method has a single seed. A ``best`` column flags, for every
    (test set, metric), the method with the largest mean MAP or ARI and the smallest mean MVI.

    Returns:
        pandas.DataFrame: Indexed by method, with ``n_seeds`` and ``<test set> <metric> {mean,std,best}``
        columns.
    """
    methods = list(dict.fromkeys(df["method"]))
    test_sets = _ordered(df["test_set"])
    grouped = df.groupby(["method", "test_set"])[list(METRICS)]
    avg = grouped.mean()
    std = grouped.std(ddof=1)

    table = pd.DataFrame(index=pd.Index(methods, name="method"))
    table["n_seeds"] = df.groupby("method")["seed"].nunique().reindex(methods)
    for test_set in test_sets:
        for metric in METRICS:
            column = f"{test_set} {metric}"
            means = pd.Series({m: avg[metric].get((m, test_set), np.nan) for m in methods})
            table[f"{column} mean"] = means
            table[f"{column} std"] = pd.Series({m: std[metric].get((m, test_set), np.nan) for m in methods})
            best = means.max() if METRIC_HIGHER_IS_BETTER[metric] else means.min()
            table[f"{column} best"] = means == best
    return table


def compute_p_values(df: pd.DataFrame, test_set: str = GLOBAL_TEST_SET, metric: str = "MAP") -> pd.DataFrame:
    """Welch's t-test between every pair of methods on one test set and metric, from per-seed values."""
    subset = df[df["test_set"] == test_set].groupby("method")[metric]
    avg, std, count = subset.mean(), subset.std(ddof=1), subset.count()
    methods = list(dict.fromkeys(df["method"]))
    p_values = np.full((len(methods), len(methods)), np.nan)
    for i, method_a in enumerate(methods):
        for j, method_b in enumerate(methods):
            if count[method_a] > 1 and count[method_b] > 1:
                p_values[i, j] = ttest_ind_from_stats(mean1=avg[method_a], std1=std[method_a],
                                                      nobs1=count[method_a], mean2=avg[method_b],
                                                      std2=std[method_b], nobs2=count[method_b],
                                                      equal_var=False).pvalue
    return pd.DataFrame(p_values, index=methods, columns=methods)


def _cell(table: pd.DataFrame, method: str, column: str) -> str:
    mean, std = table.loc[method, f"{column} mean"], table.loc[method, f"{column} std"]
    if np.isnan(mean):
        return "-"
    text = f"{mean:.3f}" if np.isnan(std) else f"{mean:.3f} ± {std:.3f}"
    return text + ("*" if table.loc[method, f"{column} best"] else "")


def format_table(table: pd.DataFrame) -> str:
    """Aligned plain-text table; ``*`` marks the best method of each column."""
    columns = [c[:-len(" mean")] for c in table.columns if c.endswith(" mean")]
    arrows = {metric: "↑" if higher else "↓" for metric, higher in METRIC_HIGHER_IS_BETTER.items()}
    cells = pd.DataFrame({"method": list(table.index), "seeds": table["n_seeds"].astype(int).to_numpy()})
    for column in columns:
        cells[f"{column} {arrows[column.split()[-1]]}"] = [_cell(table, method, column) for method in table.index]
    return cells.to_string(index=False, justify="left") + "\n"


def write_gnuplot_data(table: pd.DataFrame, path_dat: Union[str, Path]):
    """One line per method: index, quoted name, then mean and std of every (test set, metric) column."""
    columns = [c[:-len(" mean")] for c in table.columns if c.endswith(" mean")]
    with open(path_dat, "w") as fp:
        fp.write("# index method " + " ".join(f'"{c} mean" "{c} std"' for c in columns) + "\n")
        for index, method in enumerate(table.index):
            values = []
            for column in columns:
                for stat in ("mean", "std"):
                    value = table.loc[method, f"{column} {stat}"]
                    values.append("NaN" if np.isnan(value) else f"{value:.6f}")
            fp.write(f'{index} "{method}" ' + " ".join(values) + "\n")


def plot_comparison(table: pd.DataFrame, path_png: Union[str, Path], test_set: str = GLOBAL_TEST_SET):
    """Bar chart of MAP, MVI and ARI per method on one test set, with the seed standard deviation."""
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 4))
    positions = np.arange(len(table.index))
    for ax, metric in zip(axes, METRICS):
        means = table[f"{test_set} {metric} mean"].to_numpy(dtype=float)
        stds = np.nan_to_num(table[f"{test_set} {metric} std"].to_numpy(dtype=float))
        colors = ["tab:orange" if best else "tab:blue" for best in table[f"{test_set} {metric} best"]]
        ax.bar(positions, means, yerr=stds, color=colors, capsize=4)
        ax.set_xticks(positions)
        ax.set_xticklabels(table.index, rotation=30, ha="right")
        ax.set_title(f"{metric} ({test_set} test)")
        ax.grid(axis="y", linestyle="dotted")
    fig.tight_layout()
    fig.savefig(path_png)
    plt.close(fig)


def compare_runs(path_runs: Sequence[Union[str, Path]], path_output: Union[str, Path]) -> pd.DataFrame:
    """Build the method comparison of evaluated runs.

    Writes ``comparison.csv``, ``comparison.txt``, ``comparison.dat`` (gnuplot columns), ``comparison.png`` and
    ``p_values.csv`` (Welch's t-test on global MAP) in ``path_output``.

    Usage example::

        microfed_compare_runs --runs out/seed-0/runs/fedavg out/seed-1/runs/fedavg -o out/report

    Args:
        path_runs (list): Run directories whose manifests hold evaluation results.
        path_output (str): Output folder.

    Returns:
        pandas.DataFrame: The comparison table.
    """
    path_output = Path(path_output)
    path_output.mkdir(parents=True, exist_ok=True)
    df = collect_results(path_runs)
    table = compute_statistics(df)
    table.to_csv(path_output / "comparison.csv", float_format="%.6f")
    text = format_table(table)
    with open(path_output / "comparison.txt", "w", encoding="utf-8") as fp:
        fp.write(text)
    write_gnuplot_data(table, path_output / "comparison.dat")
    if GLOBAL_TEST_SET in set(df["test_set"]):
        plot_comparison(table, path_output / "comparison.png")
        p_df = compute_p_values(df)
        logger.info(f"P-values on global MAP:\n{p_df}")
        p_df.to_csv(path_output / "p_values.csv", float_format="%.6g")
    logger.info(f"Comparison of {len(table.index)} methods:\n{text}")
    return table


def main(args=None):
    mf_utils.init_microfed()
    parser = get_parser()
    args = mf_utils.get_arguments(parser, args)
    compare_runs(args.runs, args.out)


if __name__ == '__main__':
    main()
