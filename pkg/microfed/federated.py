"""Simulated cross-silo federation: server broker, FedAvg, the style-transfer exchange and the training modes.

Every round all clients participate. The server sees only what passes through :meth:`Server.send`, namely
ParamSet checkpoints and metadata mappings, and records each message in its transcript.
"""
import json
import time
import datetime
from dataclasses import dataclass, asdict, replace
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from joblib import Parallel, delayed
from loguru import logger
from pathlib import Path
from tqdm import tqdm

from microfed import models as mf_models
from microfed import training as mf_training
from microfed import utils as mf_utils
from microfed.autodiff import OptimizerState, ParamSet, TrainingDivergenceError
from microfed.keywords import FederatedKW
from microfed.loader import dataset as mf_dataset
from microfed.loader.dataset import ClientDataset, Sample
from microfed.transforms import RandomErasing

SELECTION_CRITERIA = ("validation_loss", "validation_map")
MESSAGE_KINDS = ("checkpoint", "metadata")
SERVER = "server"

ROUNDS_FILE = "rounds.jsonl"
TRANSCRIPT_FILE = "transcript.jsonl"
BEST_MODEL_FILE = "best_model.fgps"
STYLE_MODELS_DIR = "style_models"


class PrivacyViolationError(TypeError):
    """The server was handed a payload that is neither a checkpoint nor metadata."""


@dataclass(frozen=True)
class FederatedConfig:
    """Protocol hyperparameters.

    Attributes:
        rounds (int): Communication rounds K of federated and centralized training.
        local_epochs (int): Local epochs E per round.
        batch_size (int): Local minibatch size B.
        learning_rate (float): Step size, >= 0.
        optimizer (str): ``"adam"`` or ``"sgd"``.
        seed (int): Run seed; every client and round derives its own stream from it.
        rounds_separate (int): Round budget of separate training.
        style_transfer (bool): Whether fed_transfer runs the style exchange stage.
        selection (str): ``"validation_loss"`` or ``"validation_map"``.
        n_jobs (int): Clients trained concurrently.
        save_round_checkpoints (bool): Also write ``round_<t>.fgps`` for every validated round.
    """
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    rounds_separate: int = 20
    style_transfer: bool = True
    selection: str = "validation_loss"
    n_jobs: int = 1
    save_round_checkpoints: bool = False

    def __post_init__(self):
        for name in ("rounds", "rounds_separate", "local_epochs", "batch_size", "n_jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"FederatedConfig.{name} must be >= 1, got {getattr(self, name)}.")
        if self.learning_rate < 0:
            raise ValueError(f"FederatedConfig.learning_rate must be >= 0, got {self.learning_rate}.")
        if self.selection not in SELECTION_CRITERIA:
            raise ValueError(f"Unknown selection '{self.selection}', expected one of {SELECTION_CRITERIA}.")

    @classmethod
    def from_dict(cls, params: dict, seed: int) -> "FederatedConfig":
        keys = [FederatedKW.ROUNDS, FederatedKW.ROUNDS_SEPARATE, FederatedKW.LOCAL_EPOCHS, FederatedKW.BATCH_SIZE,
                FederatedKW.LEARNING_RATE, FederatedKW.OPTIMIZER, FederatedKW.BETA1, FederatedKW.BETA2,
                FederatedKW.EPSILON, FederatedKW.STYLE_TRANSFER, FederatedKW.SELECTION, FederatedKW.N_JOBS,
                FederatedKW.SAVE_ROUND_CHECKPOINTS]
        return cls(seed=seed, **{key: params[key] for key in keys if key in params})

    def new_optimizer(self, params: ParamSet) -> OptimizerState:
        if self.optimizer == "adam":
            return OptimizerState.create("adam", self.learning_rate, params, beta1=self.beta1, beta2=self.beta2,
                                         epsilon=self.epsilon)
        return OptimizerState.create(self.optimizer, self.learning_rate, params)


@dataclass
class ClientState:
    """A stateful cross-silo client.

    Attributes:
        index (int): Position of the client in the configuration, keys its random streams.
        dataset (ClientDataset): Local data; the train split may hold synthetic samples.
        params (ParamSet): Local copy of the model after its last local training.
        optimizer (OptimizerState): Persists across rounds.
    """
    index: int
    dataset: ClientDataset
    params: Optional[ParamSet] = None
    optimizer: Optional[OptimizerState] = None

    @property
    def client_id(self) -> str:
        return self.dataset.client_id

    @property
    def n_samples(self) -> int:
        return self.dataset.n_train

    def optimizer_compatible(self, w: ParamSet) -> bool:
        state = self.optimizer
        return state is not None and (state.first_moment is None or state.first_moment.is_compatible(w))


@dataclass
class RoundRecord:
    round: int
    client_losses: Dict[str, float]
    mean_loss: float
    min_loss: float
    selected: bool
    duration: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TranscriptEntry:
    round: int
    stage: str
    sender: str
    recipient: str
    kind: str
    digest: str
    size: int

    def to_dict(self) -> dict:
        return asdict(self)


class Server(object):
    """In-process message broker between clients.

    :meth:`send` serializes the payload (FGPS bytes for a ParamSet, canonical JSON for a mapping), records a
    :class:`TranscriptEntry` and returns the payload decoded from those bytes, so that sender and recipient never
    share objects.
    """

    def __init__(self):
        self.transcript: List[TranscriptEntry] = []

    def send(self, round_index: int, stage: str, sender: str, recipient: str, payload):
        if isinstance(payload, ParamSet):
            kind, wire = "checkpoint", payload.to_bytes()
        elif isinstance(payload, Mapping):
            kind, wire = "metadata", mf_utils.canonical_json(dict(payload))
        else:
            raise PrivacyViolationError(f"The server only relays checkpoints and metadata, refused a "
                                        f"{type(payload).__name__} from '{sender}' to '{recipient}'.")
        self.transcript.append(TranscriptEntry(round_index, stage, sender, recipient, kind,
                                               mf_utils.sha256_bytes(wire), len(wire)))
        if kind == "checkpoint":
            return ParamSet.from_bytes(wire)
        return json.loads(wire.decode("utf-8"))

    def write_transcript(self, path: Union[str, Path]):
        with open(path, "w") as fp:
            for entry in self.transcript:
                fp.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")


def read_transcript(path: Union[str, Path]) -> List[dict]:
    with open(path, "r") as fp:
        return [json.loads(line) for line in fp if line.strip()]


def audit_transcript(entries) -> List[str]:
    """Return a description of every transcript entry that is not a checkpoint or metadata message."""
    violations = []
    for position, entry in enumerate(entries):
        entry = entry.to_dict() if isinstance(entry, TranscriptEntry) else dict(entry)
        if entry.get("kind") not in MESSAGE_KINDS:
            violations.append(f"message {position} ({entry.get('sender')} -> {entry.get('recipient')}, "
                              f"round {entry.get('round')}) has payload kind {entry.get('kind')!r}")
    return violations


def _pairwise_sum(terms: List[torch.Tensor]) -> torch.Tensor:
    if len(terms) == 1:
        return terms[0]
    middle = len(terms) // 2
    return _pairwise_sum(terms[:middle]) + _pairwise_sum(terms[middle:])


def fedavg_aggregate(updates: Sequence[Tuple[ParamSet, int]]) -> ParamSet:
    """Weighted mean ``sum_i (n_i / n) w_i`` of the client updates.

    Updates are put in a canonical order (by ``n_i``, then by checkpoint digest) before a pairwise summation, so
    the result does not depend on the order of ``updates`` and scaling every ``n_i`` by the same factor leaves it
    bit-identical. Each coordinate is clamped to the range spanned by the clients.

    Args:
        updates (list): ``(ParamSet, n_i)`` pairs with ``n_i > 0``.

    Returns:
        ParamSet: The aggregate, compatible with every update.

    Raises:
        ValueError: on an empty update list or a non-positive ``n_i``.
        IncompatibleParamsError: if the ParamSets differ in names or shapes.
    """
    if not updates:
        raise ValueError("fedavg_aggregate needs at least one update.")
    for params, n_samples in updates:
        if int(n_samples) != n_samples or n_samples <= 0:
            raise ValueError(f"Aggregation weights must be positive integers, got {n_samples}.")
    reference = updates[0][0]
    for params, _ in updates[1:]:
        reference.check_compatible(params, "fedavg_aggregate")
    if len(updates) == 1:
        return reference

    ordered = sorted(updates, key=lambda u: (int(u[1]), mf_utils.sha256_bytes(u[0].to_bytes())))
    total = sum(int(n) for _, n in ordered)
    weights = [float(Fraction(int(n), total)) for _, n in ordered]
    entries = []
    for name in reference.names:
        values = [params[name] for params, _ in ordered]
        mean = _pairwise_sum([weight * value for weight, value in zip(weights, values)])
        stacked = torch.stack(values)
        entries.append((name, torch.minimum(torch.maximum(mean, stacked.min(dim=0).values),
                                            stacked.max(dim=0).values)))
    return ParamSet(entries)


def client_local_training(client: ClientState, w: ParamSet, cfg: FederatedConfig,
                          seg_cfg: mf_models.SegmenterConfig, round_index: int = 0,
                          augmentation: Optional[RandomErasing] = None) -> ParamSet:
    """E local epochs of minibatch training starting from a copy of ``w``.

    The client's optimizer state is created on first use and kept across rounds; ``client.params`` is set to the
    returned ParamSet.
    """
    if not client.optimizer_compatible(w):
        client.optimizer = cfg.new_optimizer(w)
    params, client.optimizer, losses = mf_training.local_epochs(
        ParamSet(w), client.optimizer, client.dataset.train, seg_cfg, cfg.local_epochs, cfg.batch_size, cfg.seed,
        client.index, round_index, augmentation, client.client_id)
    client.params = params
    return params


def _client_loss(client: ClientState, params: ParamSet, cfg: FederatedConfig,
                 seg_cfg: mf_models.SegmenterConfig) -> float:
    if cfg.selection == "validation_map":
        return 1.0 - mf_training.validation_map(params, client.dataset.val, seg_cfg)
    return mf_training.validation_loss(params, client.dataset.val, seg_cfg)


def _write_rounds(history: Sequence[RoundRecord], path: Path):
    with open(path, "w") as fp:
        for record in history:
            fp.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def federated_training(clients: Sequence[ClientState], cfg: FederatedConfig, seg_cfg: mf_models.SegmenterConfig,
                       init_params: Optional[ParamSet] = None, server: Optional[Server] = None,
                       augmentation: Optional[RandomErasing] = None,
                       path_output: Optional[Union[str, Path]] = None) -> Tuple[ParamSet, List[RoundRecord]]:
    """K rounds of broadcast, local training, FedAvg aggregation and validation.

    The freshly aggregated model of every round is validated on each client's validation split. The returned
    model is the first aggregate whose mean validation loss strictly improved on all earlier rounds.

    Args:
        clients (list): Participating clients, all of them every round.
        cfg (FederatedConfig): Protocol hyperparameters.
        seg_cfg (SegmenterConfig): Model architecture.
        init_params (ParamSet): Starting model, built from the run seed when omitted.
        server (Server): Broker recording the transcript; a new one when omitted.
        augmentation (RandomErasing): Training-time augmentation.
        path_output (str): When set, ``rounds.jsonl``, ``best_model.fgps`` (and optional per-round checkpoints)
            are written there.

    Returns:
        ParamSet, list: The selected model and one RoundRecord per round.

    Raises:
        TrainingDivergenceError: aborting the round, with ``(client, round, epoch, batch)`` coordinates.
    """
    if not clients:
        raise ValueError("federated_training needs at least one client.")
    server = Server() if server is None else server
    w = init_params if init_params is not None else mf_models.build_segmenter(
        seg_cfg, mf_utils.derive_seed(cfg.seed, mf_training.MODEL_INIT_STREAM))
    path_output = Path(path_output) if path_output is not None else None
    if path_output is not None:
        path_output.mkdir(parents=True, exist_ok=True)

    best, best_loss, history = w, float("inf"), []
    begin_time = time.time()
    names = ", ".join(c.client_id for c in clients)
    logger.info(f"Federated training over {cfg.rounds} rounds with clients {names}.")
    for round_index in tqdm(range(cfg.rounds), desc="Rounds"):
        start_time = time.time()
        received = [server.send(round_index, "train", SERVER, c.client_id, w) for c in clients]
        try:
            local = Parallel(n_jobs=min(cfg.n_jobs, len(clients)), backend="threading")(
                delayed(client_local_training)(client, w_client, cfg, seg_cfg, round_index, augmentation)
                for client, w_client in zip(clients, received))
        except TrainingDivergenceError as err:
            logger.error(f"Round {round_index} aborted: {err}")
            raise

        updates = []
        for client, params in zip(clients, local):
            checkpoint = server.send(round_index, "train", client.client_id, SERVER, params)
            metadata = server.send(round_index, "train", client.client_id, SERVER, {"n_samples": client.n_samples})
            updates.append((checkpoint, metadata["n_samples"]))
        w = fedavg_aggregate(updates)

        client_losses = {}
        for client in clients:
            w_client = server.send(round_index, "validate", SERVER, client.client_id, w)
            try:
                loss = _client_loss(client, w_client, cfg, seg_cfg)
            except TrainingDivergenceError as err:
                raise err.extend(client=client.client_id, round=round_index)
            reply = server.send(round_index, "validate", client.client_id, SERVER, {"loss": loss})
            client_losses[client.client_id] = reply["loss"]
        mean_loss = float(np.mean(list(client_losses.values())))
        selected = mean_loss < best_loss
        if selected:
            best, best_loss = w, mean_loss
        record = RoundRecord(round_index, client_losses, mean_loss, best_loss, selected, time.time() - start_time)
        history.append(record)
        logger.info(f"Round {round_index}: mean validation loss {mean_loss:.4f} (best {best_loss:.4f})"
                    f"{', selected' if selected else ''}.")
        if path_output is not None and cfg.save_round_checkpoints:
            w.save(path_output / f"round_{round_index}.fgps")

    duration = datetime.timedelta(seconds=int(time.time() - begin_time))
    logger.info(f"Federated training finished in {duration}; best mean validation loss {best_loss:.4f}.")
    if path_output is not None:
        _write_rounds(history, path_output / ROUNDS_FILE)
        best.save(path_output / BEST_MODEL_FILE)
    return best, history


def _synthetic_samples(client: ClientState, style: mf_models.StyleModel) -> List[Sample]:
    origin = mf_dataset.synthetic_origin(style.owner)
    return [Sample(f"{sample.sample_id}@{style.owner}", mf_models.generate_synthetic(style, sample.label),
                   sample.label, sample.instances, origin, sample.seed)
            for sample in client.dataset.real_train()]


def federated_image_style_transfer(clients: Sequence[ClientState], style_cfg: mf_models.StyleModelConfig, seed: int,
                                   server: Optional[Server] = None, n_jobs: int = 1,
                                   path_output: Optional[Union[str, Path]] = None) -> Dict[str, mf_models.StyleModel]:
    """Exchange style models through the server and inject foreign-styled synthetic samples.

    Each client trains a style model on its own data and uploads it. The server relays every model to every
    other client, which renders its own training labels with it and appends the results to its train split,
    ordered by owner index. ``n_i`` grows accordingly.

    Returns:
        dict: The style model trained by each client, keyed by client id.
    """
    server = Server() if server is None else server
    if len(clients) < 2:
        logger.info("Style transfer skipped: a single client has nobody to exchange with.")
        return {}

    trained = Parallel(n_jobs=min(n_jobs, len(clients)), backend="threading")(
        delayed(mf_training.train_style_model)(client.dataset, style_cfg,
                                               mf_utils.derive_seed(seed, mf_training.STYLE_STREAM, client.index))
        for client in clients)
    styles = {client.client_id: style for client, style in zip(clients, trained)}
    if path_output is not None:
        for client_id, style in styles.items():
            style.save(Path(path_output) / STYLE_MODELS_DIR / client_id)

    uploads = {}
    for client, style in zip(clients, trained):
        uploads[client.client_id] = (server.send(0, "style", client.client_id, SERVER, style.generator),
                                     server.send(0, "style", client.client_id, SERVER, style.discriminator),
                                     server.send(0, "style", client.client_id, SERVER, style.metadata()))

    for client in clients:
        received = []
        for owner in clients:
            if owner.client_id == client.client_id:
                continue
            generator, discriminator, metadata = (server.send(0, "style", SERVER, client.client_id, payload)
                                                  for payload in uploads[owner.client_id])
            received.append(mf_models.StyleModel.from_metadata(metadata, generator, discriminator))
        synthetic = []
        for style in received:
            synthetic += _synthetic_samples(client, style)
        n_before = client.n_samples
        client.dataset = client.dataset.with_synthetic(synthetic)
        logger.info(f"Client '{client.client_id}': {len(synthetic)} synthetic samples from "
                    f"{len(received)} style models, train split {n_before} -> {client.n_samples}.")
    return styles


def fed_transfer(clients: Sequence[ClientState], cfg: FederatedConfig, seg_cfg: mf_models.SegmenterConfig,
                 style_cfg: mf_models.StyleModelConfig, server: Optional[Server] = None,
                 augmentation: Optional[RandomErasing] = None,
                 path_output: Optional[Union[str, Path]] = None) -> Tuple[ParamSet, List[RoundRecord]]:
    """Style exchange (unless ``cfg.style_transfer`` is False) followed by federated training."""
    server = Server() if server is None else server
    if cfg.style_transfer:
        federated_image_style_transfer(clients, style_cfg, cfg.seed, server, cfg.n_jobs, path_output)
    else:
        logger.info("Style transfer stage disabled, running plain FedAvg.")
    return federated_training(clients, cfg, seg_cfg, server=server, augmentation=augmentation,
                              path_output=path_output)


def separate_training(clients: Sequence[ClientState], cfg: FederatedConfig, seg_cfg: mf_models.SegmenterConfig,
                      augmentation: Optional[RandomErasing] = None, path_output: Optional[Union[str, Path]] = None
                      ) -> Dict[str, Tuple[ParamSet, List[RoundRecord]]]:
    """Train one model per client on its own data only, for ``cfg.rounds_separate`` rounds.

    With ``path_output`` set, each client's run is written to ``<path_output>/<client id>/``.
    """
    separate_cfg = replace(cfg, rounds=cfg.rounds_separate, n_jobs=1)

    def run(client):
        path_client = Path(path_output) / client.client_id if path_output is not None else None
        server = Server()
        result = federated_training([client], separate_cfg, seg_cfg, server=server, augmentation=augmentation,
                                    path_output=path_client)
        if path_client is not None:
            server.write_transcript(path_client / TRANSCRIPT_FILE)
        return result

    results = Parallel(n_jobs=min(cfg.n_jobs, len(clients)), backend="threading")(
        delayed(run)(client) for client in clients)
    return {client.client_id: result for client, result in zip(clients, results)}


def centralized_training(clients: Sequence[ClientState], cfg: FederatedConfig, seg_cfg: mf_models.SegmenterConfig,
                         augmentation: Optional[RandomErasing] = None, server: Optional[Server] = None,
                         path_output: Optional[Union[str, Path]] = None) -> Tuple[ParamSet, List[RoundRecord]]:
    """Train one model on the pooled real train and validation splits of every client."""
    pooled = ClientState(0, mf_dataset.pool_datasets([c.dataset for c in clients]))
    logger.info(f"Centralized training on {pooled.n_samples} pooled training samples.")
    return federated_training([pooled], cfg, seg_cfg, server=server, augmentation=augmentation,
                              path_output=path_output)


def make_clients(datasets: Sequence[ClientDataset]) -> List[ClientState]:
    return [ClientState(index, dataset) for index, dataset in enumerate(datasets)]
