import json
import copy
import numbers
import collections.abc
from typing import Any, Callable, Dict, List, Optional, Tuple

from loguru import logger
from pathlib import Path
from microfed.keywords import ConfigKW, DatasetKW, ClientKW, StyleKW, RandomErasingKW, AugmentationKW, \
    SegmenterKW, StyleModelKW, FederatedKW, EvaluationKW, ModeKW
from microfed.loader.dataset import split_counts

PATH_CONFIG_DEFAULT = Path(__file__).resolve().parent / "config" / "config_default.json"

MODES = [ModeKW.SEPARATE, ModeKW.CENTRAL, ModeKW.FEDAVG, ModeKW.FEDTRANSFER]

# Names used for the pooled client and the averaged test set
RESERVED_CLIENT_IDS = ("global", "pooled")


class ConfigError(ValueError):
    """Raised when a configuration file cannot be used as is."""


def update(source_dict: dict, destination_dict: dict) -> dict:
    """Update dictionary and nested dictionaries.

    Args:
        source_dict (dict): Source dictionary that is updated by destination dictionary.
        destination_dict (dict): Destination dictionary.

    Returns:
        dict: updated dictionary
    """
    for key, value in destination_dict.items():
        if isinstance(value, collections.abc.Mapping):
            source_dict[key] = update(source_dict.get(key, {}), value)
        else:
            source_dict[key] = value
    return source_dict


def deep_dict_compare(source_dict: dict, destination_dict: dict, keyname: str = None):
    """Compare and display differences between dictionaries (and nested dictionaries).

    Args:
        source_dict (dict): Source dictionary.
        destination_dict (dict): Destination dictionary.
        keyname (str): Key name to indicate the path to nested parameter.

    """
    for key in destination_dict:
        key_str = key if keyname is None else keyname + key
        if key not in source_dict:
            logger.info(f'    {key_str}: {destination_dict[key]}')
        elif isinstance(destination_dict[key], collections.abc.Mapping) and \
                isinstance(source_dict[key], collections.abc.Mapping):
            deep_dict_compare(source_dict[key], destination_dict[key], key_str + ": ")
        elif destination_dict[key] != source_dict[key]:
            logger.info(f'    {key_str}: {source_dict[key]} -> {destination_dict[key]}')


def load_json(config_path: str) -> dict:
    """Load json file content

    Args:
        config_path (str): Path to json file.

    Returns:
        dict: config dictionary.

    """
    with open(config_path, "r") as fhandle:
        default_config = json.load(fhandle)
    return default_config


def _is_int(value):
    return isinstance(value, numbers.Integral) and not isinstance(value, bool)


def _is_number(value):
    return isinstance(value, numbers.Real) and not isinstance(value, bool)


def _is_pair(check):
    return lambda v: isinstance(v, list) and len(v) == 2 and all(check(x) for x in v)


# Dotted key path -> (predicate, human readable expectation)
RULES: Dict[str, Tuple[Callable[[Any], bool], str]] = {
    ConfigKW.PATH_OUTPUT: (lambda v: isinstance(v, str) and v != "", "a non-empty string"),
    ConfigKW.SEED: (lambda v: _is_int(v) and 0 <= v < 2 ** 64, "an integer in [0, 2^64)"),
    ConfigKW.REPEAT: (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    ConfigKW.N_JOBS: (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    ConfigKW.DEBUGGING: (lambda v: isinstance(v, bool), "a boolean"),
    ConfigKW.LOG_FILE: (lambda v: isinstance(v, str) and v != "", "a non-empty string"),
    ConfigKW.MODES: (lambda v: isinstance(v, list) and len(v) > 0 and all(m in MODES for m in v),
                     f"a non-empty list drawn from {MODES}"),
    f"{ConfigKW.DATASET}.{DatasetKW.IMAGE_SIZE}": (_is_pair(lambda x: _is_int(x) and x >= 8),
                                                   "[height, width], each >= 8"),
    f"{ConfigKW.DATASET}.{DatasetKW.N_SITES}": (
        lambda v: _is_pair(lambda x: _is_int(x) and x >= 1)(v) and v[0] <= v[1], "[low, high] with 1 <= low <= high"),
    f"{ConfigKW.DATASET}.{DatasetKW.SPLIT_RATIO}": (
        lambda v: isinstance(v, list) and len(v) == 3 and all(_is_number(x) and x > 0 for x in v),
        "three positive numbers (train, validation, test)"),
    f"{ConfigKW.DATASET}.{DatasetKW.CLIENTS}": (lambda v: isinstance(v, list) and len(v) >= 1,
                                                "a non-empty list of client entries"),
    f"{ConfigKW.AUGMENTATION}.{AugmentationKW.RANDOM_ERASING}.{RandomErasingKW.APPLIED}": (
        lambda v: isinstance(v, bool), "a boolean"),
    f"{ConfigKW.AUGMENTATION}.{AugmentationKW.RANDOM_ERASING}.{RandomErasingKW.PROBABILITY}": (
        lambda v: _is_number(v) and 0 <= v <= 1, "a number in [0, 1]"),
    f"{ConfigKW.AUGMENTATION}.{AugmentationKW.RANDOM_ERASING}.{RandomErasingKW.AREA_FRACTION_RANGE}": (
        lambda v: _is_pair(_is_number)(v) and 0 < v[0] <= v[1] <= 0.5, "[low, high] with 0 < low <= high <= 0.5"),
    f"{ConfigKW.AUGMENTATION}.{AugmentationKW.RANDOM_ERASING}.{RandomErasingKW.FILL}": (
        lambda v: v in ("constant", "noise"), "'constant' or 'noise'"),
    f"{ConfigKW.AUGMENTATION}.{AugmentationKW.RANDOM_ERASING}.{RandomErasingKW.FILL_VALUE}": (
        lambda v: _is_number(v) and 0 <= v <= 1, "a number in [0, 1]"),
    f"{ConfigKW.SEGMENTER}.{SegmenterKW.DEPTH}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.SEGMENTER}.{SegmenterKW.BASE_CHANNELS}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.SEGMENTER}.{SegmenterKW.KERNEL_SIZE}": (lambda v: _is_int(v) and v >= 1 and v % 2 == 1,
                                                        "an odd integer >= 1"),
    f"{ConfigKW.SEGMENTER}.{SegmenterKW.LEAKY_SLOPE}": (lambda v: _is_number(v) and 0 <= v < 1, "a number in [0, 1)"),
    f"{ConfigKW.SEGMENTER}.{SegmenterKW.PADDING_MODE}": (lambda v: v in ("zeros", "reflect"), "'zeros' or 'reflect'"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.DEPTH}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.BASE_CHANNELS}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.DISCRIMINATOR_CHANNELS}": (lambda v: _is_int(v) and v >= 1,
                                                                      "an integer >= 1"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.BATCH_SIZE}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.LEARNING_RATE}": (lambda v: _is_number(v) and v > 0, "a number > 0"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.BETA1}": (lambda v: _is_number(v) and 0 <= v < 1, "a number in [0, 1)"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.BETA2}": (lambda v: _is_number(v) and 0 <= v < 1, "a number in [0, 1)"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.NUM_EPOCHS}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.LAMBDA_L1}": (lambda v: _is_number(v) and v >= 0, "a number >= 0"),
    f"{ConfigKW.STYLE_MODEL}.{StyleModelKW.L1_THRESHOLD}": (lambda v: _is_number(v) and v > 0, "a number > 0"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.ROUNDS}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.ROUNDS_SEPARATE}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.LOCAL_EPOCHS}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.BATCH_SIZE}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.LEARNING_RATE}": (lambda v: _is_number(v) and v > 0, "a number > 0"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.OPTIMIZER}": (lambda v: v in ("sgd", "adam"), "'sgd' or 'adam'"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.BETA1}": (lambda v: _is_number(v) and 0 <= v < 1, "a number in [0, 1)"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.BETA2}": (lambda v: _is_number(v) and 0 <= v < 1, "a number in [0, 1)"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.EPSILON}": (lambda v: _is_number(v) and v > 0, "a number > 0"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.STYLE_TRANSFER}": (lambda v: isinstance(v, bool), "a boolean"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.SELECTION}": (lambda v: v in ("validation_loss", "validation_map"),
                                                      "'validation_loss' or 'validation_map'"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.N_JOBS}": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    f"{ConfigKW.FEDERATED}.{FederatedKW.SAVE_ROUND_CHECKPOINTS}": (lambda v: isinstance(v, bool), "a boolean"),
    f"{ConfigKW.EVALUATION}.{EvaluationKW.PARTITION_MODE}": (lambda v: v in ("include_boundary", "grains_only"),
                                                             "'include_boundary' or 'grains_only'"),
    f"{ConfigKW.EVALUATION}.{EvaluationKW.IOU_THRESHOLDS}": (
        lambda v: isinstance(v, list) and len(v) >= 1 and all(_is_number(t) and 0 <= t < 1 for t in v),
        "a non-empty list of numbers in [0, 1)"),
}

CLIENT_RULES: Dict[str, Tuple[Callable[[Any], bool], str]] = {
    ClientKW.CLIENT_ID: (lambda v: isinstance(v, str) and v != "" and "/" not in v and v.strip() == v
                         and v not in RESERVED_CLIENT_IDS,
                         f"a non-empty string without '/', other than {RESERVED_CLIENT_IDS}"),
    ClientKW.N_SAMPLES: (lambda v: _is_int(v) and v >= 3, "an integer >= 3"),
    f"{ClientKW.STYLE}.{StyleKW.MEAN_BOUNDARY}": (lambda v: _is_number(v) and 0 <= v <= 1, "a number in [0, 1]"),
    f"{ClientKW.STYLE}.{StyleKW.MEAN_GRAIN}": (lambda v: _is_number(v) and 0 <= v <= 1, "a number in [0, 1]"),
    f"{ClientKW.STYLE}.{StyleKW.GRAIN_JITTER}": (lambda v: _is_number(v) and 0 <= v <= 0.5, "a number in [0, 0.5]"),
    f"{ClientKW.STYLE}.{StyleKW.NOISE_STD}": (lambda v: _is_number(v) and 0 <= v <= 0.5, "a number in [0, 0.5]"),
    f"{ClientKW.STYLE}.{StyleKW.BLUR_RADIUS}": (lambda v: _is_number(v) and 0 <= v <= 8, "a number in [0, 8]"),
    f"{ClientKW.STYLE}.{StyleKW.TEXTURE_FREQUENCY}": (lambda v: _is_number(v) and 0 <= v <= 0.5,
                                                      "a number in [0, 0.5] (cycles per pixel)"),
    f"{ClientKW.STYLE}.{StyleKW.TEXTURE_AMPLITUDE}": (lambda v: _is_number(v) and 0 <= v <= 0.5,
                                                      "a number in [0, 0.5]"),
}


def _get_dotted(config: dict, dotted_key: str):
    value = config
    for key in dotted_key.split("."):
        value = value[key]
    return value


def _reject_unknown_keys(template: dict, context: dict, prefix: str = ""):
    """Raise ``ConfigError`` on the first key of ``context`` that ``template`` does not define."""
    for key, value in context.items():
        key_path = f"{prefix}{key}"
        if key not in template:
            raise ConfigError(f"ERROR: Unknown configuration key '{key_path}'.")
        if key == DatasetKW.CLIENTS and prefix == f"{ConfigKW.DATASET}.":
            if not isinstance(value, list):
                raise ConfigError(f"ERROR: '{key_path}' must be a list of client entries.")
            client_template = template[key][0]
            for index, client in enumerate(value):
                if not isinstance(client, collections.abc.Mapping):
                    raise ConfigError(f"ERROR: '{key_path}[{index}]' must be a mapping.")
                _reject_unknown_keys(client_template, client, f"{key_path}[{index}].")
        elif isinstance(value, collections.abc.Mapping):
            if not isinstance(template[key], collections.abc.Mapping):
                raise ConfigError(f"ERROR: '{key_path}' must not be a mapping.")
            _reject_unknown_keys(template[key], value, key_path + ".")


def _materialize_clients(client_template: dict, clients: List[dict]) -> List[dict]:
    """Fill every client entry with the template's defaults for the keys it leaves out."""
    materialized = []
    for client in clients:
        entry = copy.deepcopy(client_template)
        update(entry, copy.deepcopy(client))
        materialized.append(entry)
    return materialized


def validate_config(config: dict):
    """Check types and ranges of a fully materialized configuration.

    Args:
        config (dict): Configuration with every default filled in.

    Raises:
        ConfigError: naming the first offending key path.
    """
    for dotted_key, (check, expected) in RULES.items():
        try:
            value = _get_dotted(config, dotted_key)
        except (KeyError, TypeError):
            raise ConfigError(f"ERROR: Missing configuration key '{dotted_key}'.")
        if not check(value):
            raise ConfigError(f"ERROR: '{dotted_key}' must be {expected}, got {value!r}.")

    clients = config[ConfigKW.DATASET][DatasetKW.CLIENTS]
    for index, client in enumerate(clients):
        for dotted_key, (check, expected) in CLIENT_RULES.items():
            key_path = f"{ConfigKW.DATASET}.{DatasetKW.CLIENTS}[{index}].{dotted_key}"
            try:
                value = _get_dotted(client, dotted_key)
            except (KeyError, TypeError):
                raise ConfigError(f"ERROR: Missing configuration key '{key_path}'.")
            if not check(value):
                raise ConfigError(f"ERROR: '{key_path}' must be {expected}, got {value!r}.")

    client_ids = [client[ClientKW.CLIENT_ID] for client in clients]
    if len(set(client_ids)) != len(client_ids):
        raise ConfigError(f"ERROR: Client ids must be unique, got {client_ids}.")

    height, width = config[ConfigKW.DATASET][DatasetKW.IMAGE_SIZE]
    for section in (ConfigKW.SEGMENTER, ConfigKW.STYLE_MODEL):
        divisor = 2 ** config[section][SegmenterKW.DEPTH]
        if height % divisor or width % divisor:
            raise ConfigError(f"ERROR: '{ConfigKW.DATASET}.{DatasetKW.IMAGE_SIZE}' {[height, width]} must be "
                              f"divisible by 2^{section}.depth = {divisor}.")
    if height % 4 or width % 4:
        raise ConfigError(f"ERROR: '{ConfigKW.DATASET}.{DatasetKW.IMAGE_SIZE}' must be divisible by 4 for the "
                          f"patch discriminator.")
    if config[ConfigKW.DATASET][DatasetKW.N_SITES][1] > height * width:
        raise ConfigError(f"ERROR: '{ConfigKW.DATASET}.{DatasetKW.N_SITES}' exceeds the pixel count {height * width}.")
    split_ratio = config[ConfigKW.DATASET][DatasetKW.SPLIT_RATIO]
    for index, client in enumerate(clients):
        try:
            split_counts(client[ClientKW.N_SAMPLES], split_ratio)
        except ValueError as err:
            raise ConfigError(f"ERROR: '{ConfigKW.DATASET}.{DatasetKW.CLIENTS}[{index}].{ClientKW.N_SAMPLES}': "
                              f"{err}")


class ConfigurationManager(object):
    """Configuration file manager.

    Args:
        path_context (str): Path to configuration file. ``None`` uses the defaults only.
    Attributes:
        path_context (str): Path to configuration file.
        config_default (dict): Default configuration file from ``microfed`` package.
        context_original (dict): Provided configuration file.
        config_updated (dict): Updated configuration file.
    """

    def __init__(self, path_context: Optional[str] = None, context: Optional[dict] = None):
        self.path_context = str(path_context) if path_context is not None else None
        self.config_default: dict = load_json(str(PATH_CONFIG_DEFAULT))
        if path_context is not None:
            self._validate_path()
            try:
                self.context_original: dict = load_json(path_context)
            except json.JSONDecodeError as err:
                raise ConfigError(f"ERROR: {path_context} is not valid JSON: {err}")
        else:
            self.context_original = copy.deepcopy(context) if context is not None else {}
        if not isinstance(self.context_original, collections.abc.Mapping):
            raise ConfigError("ERROR: The configuration must be a JSON object.")
        self.config_updated: dict = {}

    @classmethod
    def from_dict(cls, context: dict) -> "ConfigurationManager":
        return cls(path_context=None, context=context)

    @property
    def config_updated(self) -> dict:
        return self._config_updated

    @config_updated.setter
    def config_updated(self, config_updated: dict):
        """
        If config_updated is empty, the loaded configuration is checked for unknown keys and merged over the
        defaults, client entries are completed from the default client template, and the result is validated.

        Args:
            config_updated (dict): The new configuration to set.
        """
        if config_updated == {}:
            context: dict = copy.deepcopy(self.context_original)
            _reject_unknown_keys(self.config_default, context)
            default = copy.deepcopy(self.config_default)
            client_template = default[ConfigKW.DATASET][DatasetKW.CLIENTS][0]
            config_updated = update(default, context)
            dataset = config_updated[ConfigKW.DATASET]
            if DatasetKW.CLIENTS in context.get(ConfigKW.DATASET, {}):
                dataset[DatasetKW.CLIENTS] = _materialize_clients(client_template, dataset[DatasetKW.CLIENTS])

        validate_config(config_updated)
        self._config_updated: dict = config_updated
        if config_updated[ConfigKW.DEBUGGING]:
            self._display_differing_keys()

    def get_config(self) -> dict:
        """Get updated configuration file with all parameters from the default config file.

        Returns:
            dict: Updated configuration dict.
        """
        return self.config_updated

    def _display_differing_keys(self):
        """Display differences between dictionaries.
        """
        logger.info('Adding the following keys to the configuration file')
        deep_dict_compare(self.config_default, self.config_updated)
        logger.info('\n')

    def _validate_path(self):
        """Ensure validity of configuration file path.
        """
        if not Path(self.path_context).exists():
            raise ConfigError(f"ERROR: The provided configuration file path (.json) does not exist: "
                              f"{Path(self.path_context).absolute()}")
        elif Path(self.path_context).is_dir():
            raise ConfigError(f"ERROR: The provided configuration file path (.json) is a directory not a file: "
                              f"{Path(self.path_context).absolute()}")
        elif not Path(self.path_context).is_file():
            raise ConfigError(f"ERROR: The provided configuration file path (.json) is not found: "
                              f"{Path(self.path_context).absolute()}")
        elif not self.path_context.endswith('.json'):
            raise ConfigError(f"ERROR: The provided configuration file path (.json) is not a .json file: "
                              f"{Path(self.path_context).absolute()}")
