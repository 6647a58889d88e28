from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from pathlib import Path

from microfed import utils as mf_utils
from microfed.keywords import ClientKW, DatasetKW
from microfed.loader import pgm as mf_pgm
from microfed.loader import synthetic as mf_synthetic

ORIGIN_REAL = "real"
SYNTHETIC_PREFIX = "synthetic-from-"
SPLITS = ("train", "val", "test")
DATASET_INDEX = "dataset.json"
CLIENT_MANIFEST = "manifest.json"


class DatasetManifestError(ValueError):
    """A stored dataset does not match its manifest."""


def synthetic_origin(client_id: str) -> str:
    return SYNTHETIC_PREFIX + client_id


@dataclass
class Sample:
    """One (image, label, instances) triple.

    Attributes:
        sample_id (str): Unique id within the client, e.g. ``iron_0042``.
        image (ndarray): GrayImage, float64 in [0, 1].
        label (ndarray): LabelMap, uint8, 1 = grain.
        instances (ndarray): InstanceMap, int32, 0 = boundary.
        origin (str): ``"real"`` or ``"synthetic-from-<client id>"``.
        seed (int): Generator seed of the structure, when known.
    """
    sample_id: str
    image: np.ndarray
    label: np.ndarray
    instances: np.ndarray
    origin: str = ORIGIN_REAL
    seed: Optional[int] = None

    @property
    def is_synthetic(self) -> bool:
        return self.origin != ORIGIN_REAL


@dataclass
class ClientDataset:
    """Train, validation and test splits owned by one client."""
    client_id: str
    style: Optional[mf_synthetic.StyleSpec]
    train: List[Sample] = field(default_factory=list)
    val: List[Sample] = field(default_factory=list)
    test: List[Sample] = field(default_factory=list)

    def __post_init__(self):
        for split in ("val", "test"):
            if any(s.is_synthetic for s in getattr(self, split)):
                raise ValueError(f"Client '{self.client_id}': synthetic samples may only enter the train split.")
        ids = [s.sample_id for split in SPLITS for s in getattr(self, split)]
        if len(ids) != len(set(ids)):
            raise ValueError(f"Client '{self.client_id}': sample ids are not unique across splits.")

    @property
    def n_train(self) -> int:
        return len(self.train)

    def split(self, name: str) -> List[Sample]:
        if name not in SPLITS:
            raise ValueError(f"Unknown split '{name}', expected one of {SPLITS}.")
        return getattr(self, name)

    def real_train(self) -> List[Sample]:
        return [s for s in self.train if not s.is_synthetic]

    def with_synthetic(self, samples: Sequence[Sample]) -> "ClientDataset":
        """Copy of the dataset with ``samples`` appended to the train split."""
        if not all(s.is_synthetic for s in samples):
            raise ValueError("with_synthetic expects synthetic samples only.")
        return replace(self, train=list(self.train) + list(samples))


def split_counts(n_samples: int, split_ratio: Sequence[int] = (560, 140, 192)) -> List[int]:
    """Apportion ``n_samples`` to train/val/test by largest remainder.

    Exact quotas ``n * r_k / sum(r)`` are floored, then the leftover samples go to the largest fractional parts,
    earlier splits first on ties.

    Args:
        n_samples (int): Number of samples of the client.
        split_ratio (list): Three positive weights.

    Returns:
        list: train, validation and test counts, summing to ``n_samples``.

    Raises:
        ValueError: if a split would be empty.
    """
    if len(split_ratio) != 3 or any(r <= 0 for r in split_ratio):
        raise ValueError(f"split_ratio must hold three positive weights, got {list(split_ratio)}.")
    total = sum(split_ratio)
    quotas = [Fraction(n_samples * r, total) for r in split_ratio]
    counts = [int(q) for q in quotas]
    leftover = n_samples - sum(counts)
    order = sorted(range(3), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[:leftover]:
        counts[k] += 1
    if min(counts) == 0:
        raise ValueError(f"{n_samples} samples cannot fill train, validation and test splits with ratio "
                         f"{list(split_ratio)} (got {counts}).")
    return counts


def generate_sample(client_id: str, style: mf_synthetic.StyleSpec, seed: int, client_index: int,
                    sample_index: int, image_size: Sequence[int], n_sites_range: Sequence[int]) -> Sample:
    """Generate the ``sample_index``-th real sample of a client, a pure function of its arguments."""
    sample_seed = mf_utils.derive_seed(seed, client_index, sample_index)
    rng = np.random.default_rng(mf_utils.derive_seed(sample_seed, 0))
    n_sites = int(rng.integers(n_sites_range[0], n_sites_range[1] + 1))
    height, width = image_size
    instances, label = mf_synthetic.voronoi_labels(mf_utils.derive_seed(sample_seed, 1), height, width, n_sites)
    image = mf_synthetic.quantize(mf_synthetic.render_style(instances, style, mf_utils.derive_seed(sample_seed, 2)))
    return Sample(f"{client_id}_{sample_index:04d}", image, label, instances, ORIGIN_REAL, sample_seed)


def make_client_datasets(dataset_params: dict, seed: int, n_jobs: int = 1) -> List[ClientDataset]:
    """Generate every client's dataset.

    All clients draw grain structures from the same Voronoi generator and render them with their own StyleSpec.
    Samples are assigned to train, validation and test in index order.

    Args:
        dataset_params (dict): The ``dataset`` config section.
        seed (int): Dataset seed.
        n_jobs (int): Number of joblib workers used per client.

    Returns:
        list: One ClientDataset per configured client, in config order.
    """
    clients = dataset_params[DatasetKW.CLIENTS]
    if not clients:
        raise ValueError("At least one client is required.")
    image_size = dataset_params[DatasetKW.IMAGE_SIZE]
    n_sites_range = dataset_params[DatasetKW.N_SITES]
    split_ratio = dataset_params[DatasetKW.SPLIT_RATIO]

    datasets = []
    for client_index, client in enumerate(clients):
        client_id = client[ClientKW.CLIENT_ID]
        n_samples = client[ClientKW.N_SAMPLES]
        n_train, n_val, n_test = split_counts(n_samples, split_ratio)
        style = mf_synthetic.StyleSpec.from_dict(client[ClientKW.STYLE])
        logger.info(f"Generating {n_samples} samples for client '{client_id}' "
                    f"(train {n_train}, validation {n_val}, test {n_test}).")
        samples = Parallel(n_jobs=n_jobs)(
            delayed(generate_sample)(client_id, style, seed, client_index, k, image_size, n_sites_range)
            for k in range(n_samples))
        datasets.append(ClientDataset(client_id, style, samples[:n_train], samples[n_train:n_train + n_val],
                                      samples[n_train + n_val:]))
    return datasets


def pool_datasets(datasets: Sequence[ClientDataset], client_id: str = "pooled") -> ClientDataset:
    """Concatenate the real samples of every client, split by split, for centralized training."""
    pooled = {split: [] for split in SPLITS}
    for dataset in datasets:
        for split in SPLITS:
            pooled[split] += [replace(s, sample_id=f"{dataset.client_id}/{s.sample_id}")
                              for s in dataset.split(split) if not s.is_synthetic]
    return ClientDataset(client_id, None, pooled["train"], pooled["val"], pooled["test"])


def _sample_files(sample_id: str) -> Dict[str, str]:
    return {"image": f"{sample_id}_image.pgm", "label": f"{sample_id}_label.pgm",
            "instances": f"{sample_id}_instances.pgm"}


def save_client_datasets(datasets: Sequence[ClientDataset], path_output: Union[str, Path]) -> Path:
    """Write every client's samples as PGM files, one manifest per client and a ``dataset.json`` index.

    Layout: ``<path_output>/<client id>/<split>/<sample id>_{image,label,instances}.pgm``.

    Returns:
        Path: The written ``dataset.json``.
    """
    path_output = Path(path_output)
    index = {"clients": []}
    for dataset in datasets:
        path_client = path_output / dataset.client_id
        manifest = {ClientKW.CLIENT_ID: dataset.client_id,
                    ClientKW.STYLE: dataset.style.to_dict() if dataset.style else None,
                    "splits": {}}
        for split in SPLITS:
            path_split = path_client / split
            path_split.mkdir(parents=True, exist_ok=True)
            entries = []
            for sample in dataset.split(split):
                files = _sample_files(sample.sample_id)
                mf_pgm.save_image(path_split / files["image"], sample.image)
                mf_pgm.save_label(path_split / files["label"], sample.label)
                mf_pgm.save_instances(path_split / files["instances"], sample.instances)
                entries.append({
                    "sample_id": sample.sample_id,
                    "origin": sample.origin,
                    "seed": sample.seed,
                    "files": {key: f"{split}/{name}" for key, name in files.items()},
                    "sha256": {key: mf_utils.sha256_file(path_split / name) for key, name in files.items()},
                })
            manifest["splits"][split] = entries
        mf_utils.save_json(manifest, path_client / CLIENT_MANIFEST)
        index["clients"].append({ClientKW.CLIENT_ID: dataset.client_id,
                                 "manifest": f"{dataset.client_id}/{CLIENT_MANIFEST}",
                                 "counts": {split: len(dataset.split(split)) for split in SPLITS}})
        logger.info(f"Saved client '{dataset.client_id}' to {path_client}.")
    path_index = path_output / DATASET_INDEX
    mf_utils.save_json(index, path_index)
    return path_index


def _load_client(path_client: Path) -> ClientDataset:
    manifest = mf_utils.load_json_file(path_client / CLIENT_MANIFEST)
    splits = {}
    for split in SPLITS:
        samples = []
        for entry in manifest["splits"][split]:
            for key, relative in entry["files"].items():
                digest = mf_utils.sha256_file(path_client / relative)
                if digest != entry["sha256"][key]:
                    raise DatasetManifestError(f"{path_client / relative}: sha256 {digest} does not match the "
                                               f"manifest ({entry['sha256'][key]}).")
            files = entry["files"]
            samples.append(Sample(entry["sample_id"],
                                  mf_pgm.load_image(path_client / files["image"]),
                                  mf_pgm.load_label(path_client / files["label"]),
                                  mf_pgm.load_instances(path_client / files["instances"]),
                                  entry["origin"], entry["seed"]))
        splits[split] = samples
    style = manifest[ClientKW.STYLE]
    return ClientDataset(manifest[ClientKW.CLIENT_ID],
                         mf_synthetic.StyleSpec.from_dict(style) if style else None,
                         splits["train"], splits["val"], splits["test"])


def load_client_datasets(path_dataset: Union[str, Path]) -> List[ClientDataset]:
    """Read the datasets written by :func:`save_client_datasets`, checking every file digest.

    Raises:
        DatasetManifestError: on a missing index, a missing manifest entry or a digest mismatch.
    """
    path_dataset = Path(path_dataset)
    path_index = path_dataset / DATASET_INDEX
    if not path_index.is_file():
        raise DatasetManifestError(f"No {DATASET_INDEX} found in {path_dataset}.")
    index = mf_utils.load_json_file(path_index)
    datasets = []
    for client in index["clients"]:
        try:
            dataset = _load_client((path_dataset / client["manifest"]).parent)
        except KeyError as err:
            raise DatasetManifestError(f"Manifest of client '{client[ClientKW.CLIENT_ID]}' misses the key "
                                       f"{err}.") from err
        counts = {split: len(dataset.split(split)) for split in SPLITS}
        if counts != client["counts"]:
            raise DatasetManifestError(f"Client '{dataset.client_id}': split sizes {counts} differ from the "
                                       f"index ({client['counts']}).")
        datasets.append(dataset)
    logger.info(f"Loaded {len(datasets)} client datasets from {path_dataset}.")
    return datasets
