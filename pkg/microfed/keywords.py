from dataclasses import dataclass


@dataclass
class ConfigKW:
    PATH_OUTPUT: str = "path_output"
    SEED: str = "seed"
    REPEAT: str = "repeat"
    N_JOBS: str = "n_jobs"
    DEBUGGING: str = "debugging"
    LOG_FILE: str = "log_file"
    MODES: str = "modes"
    DATASET: str = "dataset"
    AUGMENTATION: str = "augmentation"
    SEGMENTER: str = "segmenter"
    STYLE_MODEL: str = "style_model"
    FEDERATED: str = "federated"
    EVALUATION: str = "evaluation"


@dataclass
class DatasetKW:
    IMAGE_SIZE: str = "image_size"
    N_SITES: str = "n_sites"
    SPLIT_RATIO: str = "split_ratio"
    CLIENTS: str = "clients"


@dataclass
class ClientKW:
    CLIENT_ID: str = "client_id"
    N_SAMPLES: str = "n_samples"
    STYLE: str = "style"


@dataclass
class StyleKW:
    MEAN_BOUNDARY: str = "mean_boundary"
    MEAN_GRAIN: str = "mean_grain"
    GRAIN_JITTER: str = "grain_jitter"
    NOISE_STD: str = "noise_std"
    BLUR_RADIUS: str = "blur_radius"
    TEXTURE_FREQUENCY: str = "texture_frequency"
    TEXTURE_AMPLITUDE: str = "texture_amplitude"


@dataclass
class AugmentationKW:
    RANDOM_ERASING: str = "random_erasing"


@dataclass
class RandomErasingKW:
    APPLIED: str = "applied"
    PROBABILITY: str = "probability"
    AREA_FRACTION_RANGE: str = "area_fraction_range"
    FILL: str = "fill"
    FILL_VALUE: str = "fill_value"


@dataclass
class SegmenterKW:
    DEPTH: str = "depth"
    BASE_CHANNELS: str = "base_channels"
    KERNEL_SIZE: str = "kernel_size"
    LEAKY_SLOPE: str = "leaky_slope"
    PADDING_MODE: str = "padding_mode"


@dataclass
class StyleModelKW:
    DEPTH: str = "depth"
    BASE_CHANNELS: str = "base_channels"
    DISCRIMINATOR_CHANNELS: str = "discriminator_channels"
    BATCH_SIZE: str = "batch_size"
    LEARNING_RATE: str = "learning_rate"
    BETA1: str = "beta1"
    BETA2: str = "beta2"
    NUM_EPOCHS: str = "num_epochs"
    LAMBDA_L1: str = "lambda_l1"
    L1_THRESHOLD: str = "l1_threshold"


@dataclass
class FederatedKW:
    ROUNDS: str = "rounds"
    ROUNDS_SEPARATE: str = "rounds_separate"
    LOCAL_EPOCHS: str = "local_epochs"
    BATCH_SIZE: str = "batch_size"
    LEARNING_RATE: str = "learning_rate"
    OPTIMIZER: str = "optimizer"
    BETA1: str = "beta1"
    BETA2: str = "beta2"
    EPSILON: str = "epsilon"
    STYLE_TRANSFER: str = "style_transfer"
    SELECTION: str = "selection"
    N_JOBS: str = "n_jobs"
    SAVE_ROUND_CHECKPOINTS: str = "save_round_checkpoints"


@dataclass
class EvaluationKW:
    PARTITION_MODE: str = "partition_mode"
    IOU_THRESHOLDS: str = "iou_thresholds"


@dataclass
class ModeKW:
    SEPARATE: str = "separate"
    CENTRAL: str = "central"
    FEDAVG: str = "fedavg"
    FEDTRANSFER: str = "fedtransfer"


@dataclass
class ManifestKW:
    CONFIG_DIGEST: str = "config_digest"
    VERSION: str = "version"
    MODE: str = "mode"
    SEED: str = "seed"
    DATASET_PATH: str = "dataset_path"
    CLIENTS: str = "clients"
    TIMINGS: str = "timings"
    ARTIFACTS: str = "artifacts"
    RESULTS: str = "results"
