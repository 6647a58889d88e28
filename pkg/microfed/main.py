import os
import sys
import copy
import time
import shutil
import argparse
from dataclasses import dataclass, field, asdict, fields, replace
from typing import Dict, List, Optional, Sequence, Union

from joblib import Parallel, delayed
from loguru import logger
from pathlib import Path

from microfed import config_manager as mf_config_manager
from microfed import evaluation as mf_evaluation
from microfed import federated as mf_federated
from microfed import models as mf_models
from microfed import transforms as mf_transforms
from microfed import utils as mf_utils
from microfed.autodiff import CheckpointFormatError, ParamSet, TrainingDivergenceError
from microfed.config_manager import ConfigError
from microfed.keywords import ConfigKW, EvaluationKW, ModeKW
from microfed.loader import dataset as mf_dataset
from microfed.loader.dataset import DatasetManifestError
from microfed.loader.pgm import PGMFormatError
from microfed.scripts import compare_runs as mf_compare_runs

EXIT_SUCCESS = 0
EXIT_CONFIG_ERROR = 2
EXIT_DIVERGENCE = 3
EXIT_IO_ERROR = 4

CONFIG_FILE = "config_file.json"
RUN_MANIFEST = "manifest.json"
DATASET_DIR = "dataset"
RUNS_DIR = "runs"
EVAL_DIR = "eval"
REPORT_DIR = "report"


class RunManifestError(ValueError):
    """A run directory lacks its manifest, or a listed artifact is missing or altered."""


@dataclass
class RunManifest:
    """Self-description of a run directory.

    Attributes:
        config_digest (str): sha256 of the canonical JSON of the resolved configuration.
        version (str): microfed version that produced the run.
        mode (str): Training mode.
        seed (int): Run seed.
        dataset_path (str): Dataset directory, relative to the run directory.
        clients (list): Client ids, in configuration order.
        timings (dict): Seconds spent per stage.
        artifacts (dict): sha256 of every file of the run directory but the manifest, keyed by relative path.
        results (dict): Evaluation summaries, keyed by model then by test set.
    """
    config_digest: str
    version: str
    mode: str
    seed: int
    dataset_path: str
    clients: List[str]
    timings: Dict[str, float] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    results: Dict[str, Dict[str, dict]] = field(default_factory=dict)

    def refresh_artifacts(self, path_run: Path):
        self.artifacts = {}
        for path in sorted(p for p in Path(path_run).rglob("*") if p.is_file()):
            relative = path.relative_to(path_run).as_posix()
            if relative != RUN_MANIFEST:
                self.artifacts[relative] = mf_utils.sha256_file(path)

    def save(self, path_run: Union[str, Path]):
        self.refresh_artifacts(Path(path_run))
        mf_utils.save_json(asdict(self), Path(path_run) / RUN_MANIFEST)

    @classmethod
    def load(cls, path_run: Union[str, Path]) -> "RunManifest":
        path_manifest = Path(path_run) / RUN_MANIFEST
        if not path_manifest.is_file():
            raise RunManifestError(f"No {RUN_MANIFEST} in {path_run}; is it a run directory?")
        content = mf_utils.load_json_file(path_manifest)
        missing = [f.name for f in fields(cls) if f.name not in content]
        if missing:
            raise RunManifestError(f"{path_manifest} misses the keys {missing}.")
        return cls(**{f.name: content[f.name] for f in fields(cls)})

    def verify(self, path_run: Union[str, Path]):
        """Raise ``RunManifestError`` unless every listed artifact exists with its recorded digest."""
        for relative, digest in self.artifacts.items():
            path = Path(path_run) / relative
            if not path.is_file():
                raise RunManifestError(f"Artifact {relative} listed in the manifest of {path_run} is missing.")
            if mf_utils.sha256_file(path) != digest:
                raise RunManifestError(f"Artifact {relative} of {path_run} does not match its manifest digest.")


def get_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", required=False, type=str, metavar=mf_utils.Metavar.file,
                        help="Path to configuration file. The packaged defaults are used when omitted.")
    common.add_argument("--seed", required=False, type=int, metavar=mf_utils.Metavar.int,
                        help="Base seed, overrides 'seed' of the configuration.")
    common.add_argument("--repeat", required=False, type=int, metavar=mf_utils.Metavar.int,
                        help="Number of seeds (seed, seed + 1, ...), overrides 'repeat'.")
    common.add_argument("--out", dest="path_output", required=False, type=str, metavar=mf_utils.Metavar.folder,
                        help="Output directory, overrides 'path_output'.")
    common.add_argument("--jobs", dest="n_jobs", required=False, type=int, metavar=mf_utils.Metavar.int,
                        help="Seeds processed in parallel worker processes, overrides 'n_jobs'.")

    parser = argparse.ArgumentParser(prog="microfed",
                                     description="Federated segmentation of synthetic grain micrographs.")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="<command>")
    subparsers.add_parser("synth", parents=[common],
                          help="Generate every client's dataset into <out>/seed-<s>/dataset/.")
    train_parser = subparsers.add_parser("train", parents=[common],
                                         help="Train one mode into <out>/seed-<s>/runs/<mode>/.")
    train_parser.add_argument("--mode", required=True, choices=mf_config_manager.MODES,
                              help="Training mode.")
    eval_parser = subparsers.add_parser("eval", parents=[common],
                                        help="Evaluate trained runs on every client's test split.")
    eval_parser.add_argument("--run", dest="runs", action="append", metavar=mf_utils.Metavar.folder,
                             help="Run directory, may be repeated. Every run under <out> when omitted.")
    eval_parser.add_argument("--dataset", dest="path_dataset", required=False, metavar=mf_utils.Metavar.folder,
                             help="Dataset directory, read from the run manifest when omitted.")
    report_parser = subparsers.add_parser("report", parents=[common],
                                          help="Compare evaluated runs into <out>/report/.")
    report_parser.add_argument("--runs", dest="runs", nargs="+", metavar=mf_utils.Metavar.folder,
                               help="Run directories. Every run under <out> when omitted.")
    subparsers.add_parser("reproduce", parents=[common],
                          help="synth, train every configured mode, eval and report, for every seed.")
    return parser


def get_context(args) -> dict:
    """Resolved configuration with the command-line overrides applied and validated."""
    context = mf_config_manager.ConfigurationManager(args.config).get_config()
    overrides = {ConfigKW.SEED: args.seed, ConfigKW.REPEAT: args.repeat, ConfigKW.PATH_OUTPUT: args.path_output,
                 ConfigKW.N_JOBS: args.n_jobs}
    for key, value in overrides.items():
        if value is not None:
            context[key] = value
    mf_config_manager.validate_config(context)
    return context


def get_seeds(context: dict) -> List[int]:
    return [(context[ConfigKW.SEED] + r) % 2 ** 64 for r in range(context[ConfigKW.REPEAT])]


def seed_directory(context: dict, seed: int) -> Path:
    return Path(context[ConfigKW.PATH_OUTPUT]) / f"seed-{seed}"


def save_config_file(context: dict, path_output: Union[str, Path]):
    mf_utils.save_json(context, Path(path_output, CONFIG_FILE))


def config_digest(context: dict) -> str:
    return mf_utils.sha256_bytes(mf_utils.canonical_json(context))


def _seed_context(context: dict, seed: int) -> dict:
    seed_context = copy.deepcopy(context)
    seed_context[ConfigKW.SEED] = seed
    return seed_context


def _reset_directory(path: Path):
    if path.exists():
        logger.info(f"Replacing existing directory: {path}")
        shutil.rmtree(path)
    path.mkdir(parents=True)


def _seed_task(context: dict, seed: int, task, *args):
    """Run ``task(context, seed, *args)`` with an extra log sink in the seed directory."""
    path_seed = seed_directory(context, seed)
    path_seed.mkdir(parents=True, exist_ok=True)
    sink = logger.add(str(path_seed / context[ConfigKW.LOG_FILE]), level="DEBUG")
    try:
        return task(context, seed, *args)
    finally:
        logger.remove(sink)


def for_each_seed(context: dict, task, *args) -> list:
    seeds = get_seeds(context)
    n_jobs = min(context[ConfigKW.N_JOBS], len(seeds))
    return Parallel(n_jobs=n_jobs)(delayed(_seed_task)(context, seed, task, *args) for seed in seeds)


def synth_seed(context: dict, seed: int) -> Path:
    """Generate and save the client datasets of one seed."""
    path_dataset = seed_directory(context, seed) / DATASET_DIR
    _reset_directory(path_dataset)
    datasets = mf_dataset.make_client_datasets(context[ConfigKW.DATASET], seed)
    mf_dataset.save_client_datasets(datasets, path_dataset)
    save_config_file(_seed_context(context, seed), path_dataset)
    logger.info(f"Dataset of seed {seed} written to {path_dataset} "
                f"(digest {mf_utils.directory_digest(path_dataset)[:12]}).")
    return path_dataset


def run_mode(context: dict, mode: str, datasets: Sequence[mf_dataset.ClientDataset], path_run: Path):
    """Train ``mode`` on ``datasets``, writing every artifact below ``path_run``.

    Returns:
        The training result: ``{client id: (model, history)}`` for separate training, ``(model, history)``
        otherwise.
    """
    seed = context[ConfigKW.SEED]
    cfg = mf_federated.FederatedConfig.from_dict(context[ConfigKW.FEDERATED], seed)
    seg_cfg = mf_models.SegmenterConfig.from_dict(context[ConfigKW.SEGMENTER])
    style_cfg = mf_models.StyleModelConfig.from_dict(context[ConfigKW.STYLE_MODEL])
    augmentation = mf_transforms.get_augmentation(context[ConfigKW.AUGMENTATION])
    clients = mf_federated.make_clients(datasets)
    logger.info(f"Training mode '{mode}' with seed {seed}, augmentation {augmentation}.")

    if mode == ModeKW.SEPARATE:
        return mf_federated.separate_training(clients, cfg, seg_cfg, augmentation, path_run)

    server = mf_federated.Server()
    try:
        if mode == ModeKW.CENTRAL:
            result = mf_federated.centralized_training(clients, cfg, seg_cfg, augmentation, server, path_run)
        elif mode == ModeKW.FEDAVG:
            result = mf_federated.fed_transfer(clients, replace(cfg, style_transfer=False), seg_cfg, style_cfg,
                                               server, augmentation, path_run)
        elif mode == ModeKW.FEDTRANSFER:
            result = mf_federated.fed_transfer(clients, cfg, seg_cfg, style_cfg, server, augmentation, path_run)
        else:
            raise ConfigError(f"ERROR: Unknown mode '{mode}', expected one of {mf_config_manager.MODES}.")
    finally:
        server.write_transcript(path_run / mf_federated.TRANSCRIPT_FILE)
    violations = mf_federated.audit_transcript(mf_federated.read_transcript(path_run / mf_federated.TRANSCRIPT_FILE))
    for violation in violations:
        logger.error(f"Transcript audit: {violation}")
    logger.info(f"Transcript audit of '{mode}': {len(server.transcript)} messages, {len(violations)} violations.")
    return result


def train_seed(context: dict, seed: int, mode: str) -> Path:
    """Train ``mode`` on the saved dataset of one seed and write its run directory."""
    path_seed = seed_directory(context, seed)
    path_dataset = path_seed / DATASET_DIR
    if not (path_dataset / mf_dataset.DATASET_INDEX).is_file():
        raise FileNotFoundError(f"No dataset in {path_dataset}; run 'microfed synth' with the same seed first.")
    datasets = mf_dataset.load_client_datasets(path_dataset)
    path_run = path_seed / RUNS_DIR / mode
    _reset_directory(path_run)
    seed_context = _seed_context(context, seed)
    save_config_file(seed_context, path_run)

    begin_time = time.time()
    result = run_mode(seed_context, mode, datasets, path_run)
    histories = [history for _, history in result.values()] if mode == ModeKW.SEPARATE else [result[1]]
    timings = {"train": time.time() - begin_time,
               "rounds": sum(record.duration for history in histories for record in history)}

    manifest = RunManifest(config_digest=config_digest(seed_context), version=mf_utils.__version__, mode=mode,
                           seed=seed, dataset_path=os.path.relpath(path_dataset, path_run),
                           clients=[d.client_id for d in datasets], timings=timings)
    manifest.save(path_run)
    logger.info(f"Run '{mode}' of seed {seed} written to {path_run}.")
    return path_run


def evaluate_run(path_run: Union[str, Path], path_dataset: Optional[Union[str, Path]] = None) -> dict:
    """Evaluate the model(s) of a run directory on every client's test split.

    Only the run's manifest and configuration file are read. Separate runs evaluate every client's model on
    every test split. Summaries are written to ``<run>/eval/`` and stored in the manifest.

    Returns:
        dict: Summaries keyed by model, then by test set.
    """
    path_run = Path(path_run)
    manifest = RunManifest.load(path_run)
    manifest.verify(path_run)
    context = mf_config_manager.ConfigurationManager(str(path_run / CONFIG_FILE)).get_config()
    if config_digest(context) != manifest.config_digest:
        raise RunManifestError(f"{path_run / CONFIG_FILE} does not match the configuration digest of the run.")
    path_dataset = Path(path_dataset) if path_dataset is not None else path_run / manifest.dataset_path
    datasets = mf_dataset.load_client_datasets(path_dataset)
    seg_cfg = mf_models.SegmenterConfig.from_dict(context[ConfigKW.SEGMENTER])
    evaluation_params = context[ConfigKW.EVALUATION]
    partition_mode = evaluation_params[EvaluationKW.PARTITION_MODE]
    thresholds = evaluation_params[EvaluationKW.IOU_THRESHOLDS]

    begin_time = time.time()
    path_eval = path_run / EVAL_DIR
    _reset_directory(path_eval)
    results = {}
    if manifest.mode == ModeKW.SEPARATE:
        for client_id in manifest.clients:
            params = ParamSet.load(path_run / client_id / mf_federated.BEST_MODEL_FILE)
            results[f"{manifest.mode}-{client_id}"] = mf_evaluation.evaluate_on_clients(
                params, datasets, seg_cfg, path_eval / client_id, partition_mode, thresholds)
    else:
        params = ParamSet.load(path_run / mf_federated.BEST_MODEL_FILE)
        results[manifest.mode] = mf_evaluation.evaluate_on_clients(params, datasets, seg_cfg, path_eval,
                                                                   partition_mode, thresholds)
    manifest.results = results
    manifest.timings["eval"] = time.time() - begin_time
    manifest.save(path_run)
    for model, summaries in results.items():
        overall = summaries[mf_evaluation.GLOBAL_TEST_SET]
        logger.info(f"{path_run} [{model}] global test: MAP {overall['MAP']:.4f}, MVI {overall['MVI']:.4f}, "
                    f"ARI {overall['ARI']:.4f}.")
    return results


def find_runs(context: dict) -> List[Path]:
    """Every run directory (one holding a manifest) below the configured output."""
    path_output = Path(context[ConfigKW.PATH_OUTPUT])
    return sorted(p.parent for p in path_output.glob(f"seed-*/{RUNS_DIR}/*/{RUN_MANIFEST}"))


def reproduce_seed(context: dict, seed: int) -> List[Path]:
    synth_seed(context, seed)
    path_runs = []
    for mode in context[ConfigKW.MODES]:
        path_run = train_seed(context, seed, mode)
        evaluate_run(path_run)
        path_runs.append(path_run)
    return path_runs


def cmd_synth(context: dict) -> List[Path]:
    return for_each_seed(context, synth_seed)


def cmd_train(context: dict, mode: str) -> List[Path]:
    return for_each_seed(context, train_seed, mode)


def cmd_eval(context: dict, runs: Optional[Sequence[str]] = None, path_dataset: Optional[str] = None) -> List[dict]:
    runs = [Path(r) for r in runs] if runs else find_runs(context)
    if not runs:
        raise FileNotFoundError(f"No run directory found below {context[ConfigKW.PATH_OUTPUT]}.")
    n_jobs = min(context[ConfigKW.N_JOBS], len(runs))
    return Parallel(n_jobs=n_jobs)(delayed(evaluate_run)(path_run, path_dataset) for path_run in runs)


def cmd_report(context: dict, runs: Optional[Sequence[str]] = None) -> Path:
    runs = [Path(r) for r in runs] if runs else find_runs(context)
    if not runs:
        raise FileNotFoundError(f"No run directory found below {context[ConfigKW.PATH_OUTPUT]}.")
    path_report = Path(context[ConfigKW.PATH_OUTPUT]) / REPORT_DIR
    mf_compare_runs.compare_runs(runs, path_report)
    return path_report


def cmd_reproduce(context: dict) -> Path:
    runs = [path_run for path_runs in for_each_seed(context, reproduce_seed) for path_run in path_runs]
    return cmd_report(context, runs)


def set_loggers(context: dict) -> List[int]:
    """Log to stdout and to ``<path_output>/<log_file>``; returns the sink ids."""
    path_output = Path(context[ConfigKW.PATH_OUTPUT])
    if not path_output.is_dir():
        logger.info(f"Creating output path: {path_output}")
        path_output.mkdir(parents=True)
    logger.remove()
    level = "DEBUG" if context[ConfigKW.DEBUGGING] else "INFO"
    return [logger.add(sys.stdout, level=level),
            logger.add(str(path_output / context[ConfigKW.LOG_FILE]), level="DEBUG")]


def run_command(context: dict, args):
    """Run one subcommand.

    Args:
        context (dict): Resolved configuration.
        args (argparse.Namespace): Parsed command line.

    Returns:
        The command's output paths or results.
    """
    sinks = set_loggers(context)
    try:
        begin_time = time.time()
        if args.command == "synth":
            result = cmd_synth(context)
        elif args.command == "train":
            result = cmd_train(context, args.mode)
        elif args.command == "eval":
            result = cmd_eval(context, args.runs, args.path_dataset)
        elif args.command == "report":
            result = cmd_report(context, args.runs)
        else:
            result = cmd_reproduce(context)
        logger.info(f"Command '{args.command}' finished in {time.time() - begin_time:.1f} s.")
        return result
    finally:
        for sink in sinks:
            logger.remove(sink)
        logger.add(sys.stderr)


def main(args=None) -> int:
    """Parse the command line, run the command and map failures to exit codes.

    Returns:
        int: 0 on success, 2 on a configuration error, 3 on training divergence, 4 on an I/O or format error.
    """
    mf_utils.init_microfed()
    parser = get_parser()
    try:
        args = mf_utils.get_arguments(parser, args)
    except mf_utils.ArgParseException as err:
        logger.error(err)
        return EXIT_CONFIG_ERROR

    try:
        context = get_context(args)
        run_command(context, args)
    except ConfigError as err:
        logger.error(err)
        return EXIT_CONFIG_ERROR
    except TrainingDivergenceError as err:
        logger.error(f"Training diverged: {err}")
        return EXIT_DIVERGENCE
    except (OSError, PGMFormatError, CheckpointFormatError, DatasetManifestError, RunManifestError) as err:
        logger.error(f"{type(err).__name__}: {err}")
        return EXIT_IO_ERROR
    return EXIT_SUCCESS


def run_main():
    sys.exit(main())


if __name__ == "__main__":
    run_main()
