#!/usr/bin/env python

import json
import argparse
from textwrap import wrap
from typing import List, Union

import pandas as pd
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from loguru import logger
from pathlib import Path

from microfed import utils as mf_utils
from microfed.federated import ROUNDS_FILE, STYLE_MODELS_DIR
from microfed.models import STYLE_SIDECAR


def get_parser():
    parser = argparse.ArgumentParser()
    parser.add_argument("-i", "--input", required=True, type=str, nargs="+",
                        help="""Run directories. Each one holding a rounds.jsonl file (or subfolders holding one,
                                as separate training writes) gets its own subplot.""",
                        metavar=mf_utils.Metavar.folder)
    parser.add_argument("-o", "--output", required=True, type=str,
                        help="Output folder.", metavar=mf_utils.Metavar.folder)
    return parser


def read_rounds(path_rounds: Union[str, Path]) -> pd.DataFrame:
    """Load a ``rounds.jsonl`` file, one row per round with a ``loss <client>`` column per client."""
    records = []
    with open(path_rounds, "r") as fp:
        for line in fp:
            if line.strip():
                record = json.loads(line)
                client_losses = record.pop("client_losses")
                record.update({f"loss {client}": loss for client, loss in client_losses.items()})
                records.append(record)
    if not records:
        raise ValueError(f"{path_rounds} holds no round.")
    return pd.DataFrame.from_records(records).set_index("round")


def find_rounds_files(path_run: Union[str, Path]) -> List[Path]:
    path_run = Path(path_run)
    if (path_run / ROUNDS_FILE).is_file():
        return [path_run / ROUNDS_FILE]
    found = sorted(path_run.glob(f"*/{ROUNDS_FILE}"))
    if not found:
        raise FileNotFoundError(f"No {ROUNDS_FILE} in {path_run} or its subfolders.")
    return found


def plot_curve(df: pd.DataFrame, fig_ax, subplot_title: str):
    """Plot per-client and mean validation losses over rounds; selected rounds are marked."""
    rounds = df.index + 1
    for column in [c for c in df.columns if c.startswith("loss ")]:
        fig_ax.plot(rounds, df[column], alpha=0.6, label=column[len("loss "):])
    fig_ax.plot(rounds, df["mean_loss"], color="black", label="mean")
    selected = df[df["selected"].astype(bool)]
    fig_ax.scatter(selected.index + 1, selected["mean_loss"], marker="o", color="black", zorder=3,
                   label="selected")
    fig_ax.legend(loc="best")
    fig_ax.grid(linestyle='dotted')
    fig_ax.set_xlabel('Round')
    fig_ax.set_ylabel('Validation loss')
    fig_ax.set_xlim([1, max(len(df), 2)])
    fig_ax.title.set_text('\n'.join(wrap(subplot_title, 60)))


def plot_style_curves(path_run: Path, path_output: Path) -> List[Path]:
    """Plot the reconstruction L1 and adversarial losses of every style model saved in a run."""
    written = []
    for path_sidecar in sorted(path_run.glob(f"{STYLE_MODELS_DIR}/*/{STYLE_SIDECAR}")):
        metadata = mf_utils.load_json_file(path_sidecar)
        history = pd.DataFrame(metadata["history"])
        if history.empty:
            continue
        history.index = history.index + 1
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        axes[0].plot(history.index, history["l1"])
        axes[0].axhline(metadata["config"]["l1_threshold"], linestyle="--", color="gray")
        axes[0].set_ylabel("Reconstruction L1")
        axes[1].plot(history.index, history["generator"], label="generator")
        axes[1].plot(history.index, history["discriminator"], label="discriminator")
        axes[1].legend(loc="best")
        for ax in axes:
            ax.set_xlabel("Epoch")
            ax.grid(linestyle="dotted")
        fig.suptitle(f"Style model of {metadata['owner']}")
        fig.tight_layout()
        path_png = path_output / f"style_model_{metadata['owner']}.png"
        fig.savefig(path_png)
        plt.close(fig)
        written.append(path_png)
    return written


def run_plot_training_curves(input_folders: List[str], output_folder: str) -> List[Path]:
    """Plot the validation curves of runs and save their data as ``.csv`` files.

    Args:
        input_folders (list): Run directories.
        output_folder (str): Output folder, created if needed.

    Returns:
        list: Written files.
    """
    path_output = Path(output_folder)
    path_output.mkdir(parents=True, exist_ok=True)
    curves = []
    for input_folder in input_folders:
        for path_rounds in find_rounds_files(input_folder):
            name = path_rounds.resolve().parent.relative_to(Path(input_folder).resolve().parent).as_posix()
            curves.append((name, read_rounds(path_rounds)))

    n_cols = min(len(curves), 3)
    n_rows = (len(curves) + n_cols - 1) // n_cols
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(6 * n_cols, 4 * n_rows), squeeze=False)
    written = []
    for k, (name, df) in enumerate(curves):
        plot_curve(df, axes[k // n_cols][k % n_cols], name)
        path_csv = path_output / f"{name.replace('/', '_')}_rounds.csv"
        df.to_csv(path_csv)
        written.append(path_csv)
    for k in range(len(curves), n_rows * n_cols):
        axes[k // n_cols][k % n_cols].axis("off")
    fig.tight_layout()
    path_png = path_output / "training_curves.png"
    fig.savefig(path_png)
    plt.close(fig)
    written.append(path_png)
    logger.info(f"Saved training curves of {len(curves)} run(s) in {path_png}.")

    for input_folder in input_folders:
        written += plot_style_curves(Path(input_folder), path_output)
    return written


def main(args=None):
    mf_utils.init_microfed()
    parser = get_parser()
    args = mf_utils.get_arguments(parser, args)
    run_plot_training_curves(input_folders=args.input, output_folder=args.output)


if __name__ == '__main__':
    main()
