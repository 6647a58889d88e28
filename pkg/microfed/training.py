import time
import datetime
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from tqdm import tqdm

from microfed import autodiff as mf_autodiff
from microfed import metrics as mf_metrics
from microfed import models as mf_models
from microfed import utils as mf_utils
from microfed.autodiff import ComputeGraph, OptimizerState, ParamSet, TrainingDivergenceError
from microfed.loader.dataset import ClientDataset, Sample
from microfed.transforms import RandomErasing

# Independent random streams derived from the run seed
MODEL_INIT_STREAM = 1
SHUFFLE_STREAM = 2
AUGMENTATION_STREAM = 3
STYLE_STREAM = 4

EVAL_BATCH_SIZE = 16


def batch_order(seed: int, client_index: int, round_index: int, epoch: int, n_samples: int,
                batch_size: int) -> List[np.ndarray]:
    """Seeded shuffle of ``range(n_samples)`` cut into batches of ``batch_size``; the last short batch is kept."""
    rng = np.random.default_rng(mf_utils.derive_seed(seed, SHUFFLE_STREAM, client_index, round_index, epoch))
    order = rng.permutation(n_samples)
    return [order[start:start + batch_size] for start in range(0, n_samples, batch_size)]


def assemble_batch(samples: Sequence[Sample], indices, augmentation: Optional[RandomErasing] = None,
                   seed_keys: Sequence[int] = ()) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack the selected samples into image and label tensors, erasing images when ``augmentation`` is set.

    The erasing seed of a sample is derived from ``seed_keys`` and the sample's index in ``samples``.
    """
    images = []
    for index in indices:
        image = samples[index].image
        if augmentation is not None:
            image = augmentation(image, mf_utils.derive_seed(*seed_keys, int(index)))
        images.append(image)
    labels = [samples[index].label for index in indices]
    return mf_models.to_batch(np.stack(images)), mf_models.label_batch(np.stack(labels))


def local_epochs(params: ParamSet, optimizer: OptimizerState, samples: Sequence[Sample],
                 seg_cfg: mf_models.SegmenterConfig, n_epochs: int, batch_size: int, seed: int, client_index: int,
                 round_index: int, augmentation: Optional[RandomErasing] = None,
                 client_id: str = "") -> Tuple[ParamSet, OptimizerState, List[float]]:
    """Minibatch training of the segmenter on one client's samples.

    Returns:
        ParamSet, OptimizerState, list: Updated parameters, optimizer state and the mean training loss of
        every epoch.

    Raises:
        TrainingDivergenceError: with ``(client, round, epoch, batch)`` coordinates.
    """
    if not samples:
        raise ValueError(f"Client '{client_id}' has no training samples.")
    epoch_losses = []
    for epoch in range(n_epochs):
        losses = []
        for batch_index, indices in enumerate(batch_order(seed, client_index, round_index, epoch, len(samples),
                                                          batch_size)):
            images, labels = assemble_batch(samples, indices, augmentation,
                                            (seed, AUGMENTATION_STREAM, client_index, round_index, epoch))
            graph = mf_models.segmentation_graph(images, labels, seg_cfg)
            coordinates = {"client": client_id, "round": round_index, "epoch": epoch, "batch": batch_index}
            grads = mf_autodiff.backward(graph, params, coordinates)
            optimizer, params = mf_autodiff.optimizer_step(optimizer, params, grads)
            losses.append(float(graph.loss) * len(indices))
        epoch_losses.append(sum(losses) / len(samples))
        logger.debug(f"Client '{client_id}' round {round_index} epoch {epoch}: training loss "
                     f"{epoch_losses[-1]:.4f}.")
    return params, optimizer, epoch_losses


def validation_loss(params, samples: Sequence[Sample], seg_cfg: mf_models.SegmenterConfig,
                    batch_size: int = EVAL_BATCH_SIZE) -> float:
    """Mean per-pixel cross-entropy of the segmenter over a validation split.

    Raises:
        TrainingDivergenceError: if the loss is not finite.
    """
    if not samples:
        raise ValueError("validation_loss needs a nonempty split.")
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            loss = mf_models.segmentation_loss(params, np.stack([s.image for s in chunk]),
                                               np.stack([s.label for s in chunk]), seg_cfg)
            total += float(loss) * len(chunk)
    value = total / len(samples)
    if not np.isfinite(value):
        raise TrainingDivergenceError(f"Non-finite validation loss {value}")
    return value


def validation_map(params, samples: Sequence[Sample], seg_cfg: mf_models.SegmenterConfig,
                   thresholds: Sequence[float] = mf_metrics.IOU_THRESHOLDS) -> float:
    """Mean average precision of the segmenter's instances over a split."""
    if not samples:
        raise ValueError("validation_map needs a nonempty split.")
    values = []
    for sample in samples:
        _, instances = mf_models.predict_instances(params, sample.image, seg_cfg)
        values.append(mf_metrics.average_precision(instances, sample.instances, thresholds))
    return float(np.mean(values))


def _style_step(graph: ComputeGraph, params: ParamSet, state: OptimizerState, coordinates):
    grads = mf_autodiff.backward(graph, params, coordinates)
    state, params = mf_autodiff.optimizer_step(state, params, grads)
    return params, state, float(graph.loss)


def train_style_model(dataset: ClientDataset, cfg: mf_models.StyleModelConfig, seed: int) -> mf_models.StyleModel:
    """Train a label-to-image conditional GAN on a client's real training samples.

    Each minibatch runs a discriminator step against the current generator, then a generator step against the
    updated discriminator. Both use Adam with the configured ``beta1``.

    Args:
        dataset (ClientDataset): The owner's data; only its real training samples are read.
        cfg (StyleModelConfig): Architecture and hyperparameters.
        seed (int): Seed of initialization and shuffling.

    Returns:
        StyleModel: Trained model with its per-epoch loss curves and final reconstruction L1.

    Raises:
        TrainingDivergenceError: with ``(client, stage, epoch, batch)`` coordinates.
    """
    samples = dataset.real_train()
    if not samples:
        raise ValueError(f"Client '{dataset.client_id}' has no real training samples for its style model.")
    begin_time = time.time()
    style = mf_models.StyleModel(owner=dataset.client_id, config=cfg,
                                 generator=mf_models.build_generator(cfg, mf_utils.derive_seed(seed, 0)),
                                 discriminator=mf_models.build_discriminator(cfg, mf_utils.derive_seed(seed, 1)),
                                 seed=seed)
    hyper = {"beta1": cfg.beta1, "beta2": cfg.beta2}
    g_state = OptimizerState.create("adam", cfg.learning_rate, style.generator, **hyper)
    d_state = OptimizerState.create("adam", cfg.learning_rate, style.discriminator, **hyper)
    history = {"l1": [], "generator": [], "discriminator": []}

    for epoch in tqdm(range(cfg.num_epochs), desc=f"Style model {dataset.client_id}", leave=False):
        rng = np.random.default_rng(mf_utils.derive_seed(seed, 2, epoch))
        order = rng.permutation(len(samples))
        l1_sum, g_sum, d_sum = 0.0, 0.0, 0.0
        for batch_index, start in enumerate(range(0, len(samples), cfg.batch_size)):
            chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
            labels = np.stack([s.label for s in chunk])
            images = np.stack([s.image for s in chunk])
            coordinates = {"client": dataset.client_id, "stage": "style", "epoch": epoch, "batch": batch_index}

            d_graph = ComputeGraph(lambda p, g: mf_models.discriminator_loss(style, labels, images, discriminator=p,
                                                                             graph=g))
            discriminator, d_state, d_loss = _style_step(d_graph, style.discriminator, d_state, coordinates)
            style = replace(style, discriminator=discriminator)

            l1_sum += mf_models.reconstruction_l1(style, labels, images) * len(chunk)
            g_graph = ComputeGraph(lambda p, g: mf_models.generator_loss(style, labels, images, generator=p,
                                                                         graph=g))
            generator, g_state, g_loss = _style_step(g_graph, style.generator, g_state, coordinates)
            style = replace(style, generator=generator)
            g_sum += g_loss * len(chunk)
            d_sum += d_loss * len(chunk)
        history["l1"].append(l1_sum / len(samples))
        history["generator"].append(g_sum / len(samples))
        history["discriminator"].append(d_sum / len(samples))
        logger.debug(f"Style model '{dataset.client_id}' epoch {epoch}: L1 {history['l1'][-1]:.4f}, generator loss "
                     f"{history['generator'][-1]:.4f}, discriminator loss {history['discriminator'][-1]:.4f}.")

    final_l1 = float(np.mean([mf_models.reconstruction_l1(style, s.label, s.image) for s in samples]))
    style = replace(style, history=history, final_l1=final_l1)
    if not style.meets_threshold:
        logger.warning(f"Style model of client '{dataset.client_id}' reconstructs its training images with L1 "
                       f"{final_l1:.4f}, above the threshold {cfg.l1_threshold}; it is shared anyway.")
    duration = datetime.timedelta(seconds=int(time.time() - begin_time))
    logger.info(f"Style model of client '{dataset.client_id}' trained in {duration} (final L1 {final_l1:.4f}).")
    return style
