"""Segmenter and conditional GAN programs over :class:`~microfed.autodiff.ParamSet` weights.

Every network here is a plain function of its parameters built from :func:`~microfed.autodiff.forward_layer`
calls, so the same code serves training (through a :class:`~microfed.autodiff.ComputeGraph`) and inference.
Parameters are named ``<block>.<conv>.<weight|bias>``, e.g. ``enc0.conv1.weight``.
"""
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from pathlib import Path

from microfed import autodiff as mf_autodiff
from microfed import losses as mf_losses
from microfed import metrics as mf_metrics
from microfed import utils as mf_utils
from microfed.autodiff import DTYPE, ComputeGraph, ParamSet, ShapeError, forward_layer, param_slice
from microfed.keywords import SegmenterKW, StyleModelKW

N_CLASSES = 2

GENERATOR_FILE = "generator.fgps"
DISCRIMINATOR_FILE = "discriminator.fgps"
STYLE_SIDECAR = "style_model.json"


@dataclass(frozen=True)
class SegmenterConfig:
    """Encoder-decoder segmenter.

    Attributes:
        depth (int): Number of down/up levels.
        base_channels (int): Channels of the first level, doubled at each level down.
        kernel_size (int): Odd convolution kernel size.
        leaky_slope (float): Negative slope of the leaky-relu activations.
        padding_mode (str): ``"zeros"`` or ``"reflect"``.
        in_channels (int): Input channels.
        out_channels (int): Output channels of the 1x1 head.
    """
    depth: int = 2
    base_channels: int = 8
    kernel_size: int = 3
    leaky_slope: float = 0.2
    padding_mode: str = "zeros"
    in_channels: int = 1
    out_channels: int = N_CLASSES

    @classmethod
    def from_dict(cls, params: dict) -> "SegmenterConfig":
        return cls(depth=params[SegmenterKW.DEPTH], base_channels=params[SegmenterKW.BASE_CHANNELS],
                   kernel_size=params[SegmenterKW.KERNEL_SIZE],
                   leaky_slope=params.get(SegmenterKW.LEAKY_SLOPE, 0.2),
                   padding_mode=params.get(SegmenterKW.PADDING_MODE, "zeros"))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StyleModelConfig:
    """Label-to-image conditional GAN and its training hyperparameters."""
    depth: int = 2
    base_channels: int = 8
    discriminator_channels: int = 8
    batch_size: int = 2
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    num_epochs: int = 5
    lambda_l1: float = 100.0
    l1_threshold: float = 0.1
    kernel_size: int = 3
    leaky_slope: float = 0.2

    @classmethod
    def from_dict(cls, params: dict) -> "StyleModelConfig":
        return cls(**{key: params[key] for key in cls.__dataclass_fields__ if key in params})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def generator(self) -> SegmenterConfig:
        return SegmenterConfig(depth=self.depth, base_channels=self.base_channels, kernel_size=self.kernel_size,
                               leaky_slope=self.leaky_slope, padding_mode="zeros", in_channels=N_CLASSES,
                               out_channels=1)


def _torch_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def to_batch(images) -> torch.Tensor:
    """Stack GrayImages (H, W) into a (N, 1, H, W) float64 tensor."""
    if isinstance(images, torch.Tensor):
        batch = images.to(DTYPE)
    else:
        batch = torch.as_tensor(np.asarray(images, dtype=np.float64))
    if batch.dim() == 2:
        batch = batch[None]
    if batch.dim() == 3:
        batch = batch[:, None]
    return batch


def label_batch(labels) -> torch.Tensor:
    """Stack LabelMaps (H, W) into a (N, H, W) int64 tensor."""
    batch = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    return batch[None] if batch.dim() == 2 else batch


def one_hot(labels) -> torch.Tensor:
    """(N, H, W) label maps to a (N, 2, H, W) float64 one-hot encoding, channel 1 = grain."""
    labels = label_batch(labels)
    return F.one_hot(labels, N_CLASSES).permute(0, 3, 1, 2).to(DTYPE)


# ---------------------------------------------------------------------------------------------------------------
# Encoder-decoder shared by the segmenter and the generator
# ---------------------------------------------------------------------------------------------------------------

def _level_channels(cfg: SegmenterConfig) -> List[int]:
    return [cfg.base_channels * 2 ** level for level in range(cfg.depth + 1)]


def _encoder_decoder_entries(cfg: SegmenterConfig, generator: torch.Generator):
    channels = _level_channels(cfg)
    k = cfg.kernel_size
    entries = []
    in_channels = cfg.in_channels
    for level in range(cfg.depth):
        entries += mf_autodiff.conv_entries(f"enc{level}.conv1", in_channels, channels[level], k, generator)
        entries += mf_autodiff.conv_entries(f"enc{level}.conv2", channels[level], channels[level], k, generator)
        in_channels = channels[level]
    entries += mf_autodiff.conv_entries("bottleneck.conv1", in_channels, channels[-1], k, generator)
    entries += mf_autodiff.conv_entries("bottleneck.conv2", channels[-1], channels[-1], k, generator)
    in_channels = channels[-1]
    for level in reversed(range(cfg.depth)):
        # upsampled features first, then the skip connection
        entries += mf_autodiff.conv_entries(f"dec{level}.conv1", in_channels + channels[level], channels[level], k,
                                            generator)
        entries += mf_autodiff.conv_entries(f"dec{level}.conv2", channels[level], channels[level], k, generator)
        in_channels = channels[level]
    entries += mf_autodiff.conv_entries("head", in_channels, cfg.out_channels, 1, generator)
    return entries


def encoder_decoder_param_count(cfg: SegmenterConfig) -> int:
    """Closed-form parameter count of :func:`build_segmenter`."""
    channels = _level_channels(cfg)
    k2 = cfg.kernel_size ** 2

    def conv(c_in, c_out, kk=k2):
        return c_in * c_out * kk + c_out

    total, in_channels = 0, cfg.in_channels
    for level in range(cfg.depth):
        total += conv(in_channels, channels[level]) + conv(channels[level], channels[level])
        in_channels = channels[level]
    total += conv(in_channels, channels[-1]) + conv(channels[-1], channels[-1])
    in_channels = channels[-1]
    for level in reversed(range(cfg.depth)):
        total += conv(in_channels + channels[level], channels[level]) + conv(channels[level], channels[level])
        in_channels = channels[level]
    return total + conv(in_channels, cfg.out_channels, 1)


def _check_divisible(x: torch.Tensor, factor: int, what: str):
    if x.dim() != 4:
        raise ShapeError(f"{what}: expected a (batch, channels, height, width) input, got shape {tuple(x.shape)}.")
    height, width = x.shape[2:]
    if height % factor or width % factor:
        raise ShapeError(f"{what}: input height and width must be divisible by {factor}, got {height}x{width}.")


def _conv_block(params, x, prefix, cfg, graph):
    for conv in ("conv1", "conv2"):
        name = f"{prefix}.{conv}"
        x = forward_layer("conv2d", param_slice(params, name), x, graph, name, padding_mode=cfg.padding_mode)
        x = forward_layer("leaky_relu", None, x, graph, f"{name}.act", negative_slope=cfg.leaky_slope)
    return x


def encoder_decoder_forward(params, x: torch.Tensor, cfg: SegmenterConfig,
                            graph: Optional[ComputeGraph] = None) -> torch.Tensor:
    """Run the encoder-decoder and return the raw output of its 1x1 head."""
    _check_divisible(x, 2 ** cfg.depth, "encoder-decoder")
    skips = []
    for level in range(cfg.depth):
        x = _conv_block(params, x, f"enc{level}", cfg, graph)
        skips.append(x)
        x = forward_layer("maxpool", None, x, graph, f"enc{level}.pool")
    x = _conv_block(params, x, "bottleneck", cfg, graph)
    for level in reversed(range(cfg.depth)):
        x = forward_layer("upsample", None, x, graph, f"dec{level}.up")
        x = forward_layer("concat", None, [x, skips[level]], graph, f"dec{level}.concat")
        x = _conv_block(params, x, f"dec{level}", cfg, graph)
    return forward_layer("conv2d", param_slice(params, "head"), x, graph, "head")


# ---------------------------------------------------------------------------------------------------------------
# Segmenter
# ---------------------------------------------------------------------------------------------------------------

def build_segmenter(cfg: SegmenterConfig, seed: int) -> ParamSet:
    """Glorot-initialized segmenter weights, a pure function of ``(cfg, seed)``."""
    params = ParamSet(_encoder_decoder_entries(cfg, _torch_generator(seed)))
    logger.debug(f"Segmenter with {params.total_count} parameters (depth {cfg.depth}, base {cfg.base_channels}).")
    return params


def segmenter_forward(params, images, cfg: SegmenterConfig, graph: Optional[ComputeGraph] = None) -> torch.Tensor:
    """Class logits (N, 2, H, W) of a batch of GrayImages."""
    return encoder_decoder_forward(params, to_batch(images), cfg, graph)


def predict_proba(params, images, cfg: SegmenterConfig) -> torch.Tensor:
    """Per-pixel class probabilities (N, 2, H, W); channel 1 is grain."""
    with torch.no_grad():
        return forward_layer("softmax", None, segmenter_forward(params, images, cfg), name="softmax")


def segmentation_loss(params, images, labels, cfg: SegmenterConfig,
                      graph: Optional[ComputeGraph] = None) -> torch.Tensor:
    """Mean per-pixel cross-entropy of the segmenter on a batch."""
    if len(images) == 0:
        raise ValueError("segmentation_loss needs a nonempty batch.")
    logits = segmenter_forward(params, images, cfg, graph)
    return mf_losses.CrossEntropyLoss(log_input=True)(F.log_softmax(logits, dim=1), label_batch(labels))


def segmentation_graph(images, labels, cfg: SegmenterConfig) -> ComputeGraph:
    """Training graph of one minibatch."""
    images, labels = to_batch(images), label_batch(labels)
    return ComputeGraph(lambda params, graph: segmentation_loss(params, images, labels, cfg, graph))


def instances_from_probabilities(proba) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax label map (ties go to boundary) and its 4-connected grain instances, for one (2, H, W) map."""
    proba = torch.as_tensor(proba)
    label = (proba[1] > proba[0]).numpy().astype(np.uint8)
    return label, mf_metrics.connected_components(label, connectivity=4)


def predict_instances(params, image: np.ndarray, cfg: SegmenterConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Segment one GrayImage.

    Returns:
        ndarray, ndarray: LabelMap and InstanceMap.
    """
    return instances_from_probabilities(predict_proba(params, image, cfg)[0])


# ---------------------------------------------------------------------------------------------------------------
# Conditional GAN
# ---------------------------------------------------------------------------------------------------------------

def build_generator(cfg: StyleModelConfig, seed: int) -> ParamSet:
    return ParamSet(_encoder_decoder_entries(cfg.generator, _torch_generator(seed)))


def build_discriminator(cfg: StyleModelConfig, seed: int) -> ParamSet:
    """Patch discriminator on concat(one-hot label, image): two conv + leaky-relu + 2x2 mean-pool stages."""
    generator = _torch_generator(seed)
    channels = cfg.discriminator_channels
    entries = mf_autodiff.conv_entries("disc0", N_CLASSES + 1, channels, cfg.kernel_size, generator)
    entries += mf_autodiff.conv_entries("disc1", channels, 2 * channels, cfg.kernel_size, generator)
    entries += mf_autodiff.conv_entries("disc_head", 2 * channels, 1, 1, generator)
    return ParamSet(entries)


def generator_forward(params, onehot: torch.Tensor, cfg: StyleModelConfig,
                      graph: Optional[ComputeGraph] = None) -> torch.Tensor:
    """Generated images (N, 1, H, W) in (0, 1)."""
    logits = encoder_decoder_forward(params, onehot, cfg.generator, graph)
    return forward_layer("sigmoid", None, logits, graph, "output")


def discriminator_logits(params, onehot: torch.Tensor, images: torch.Tensor, cfg: StyleModelConfig,
                         graph: Optional[ComputeGraph] = None) -> torch.Tensor:
    """Pre-sigmoid patch scores (N, 1, H/4, W/4)."""
    x = forward_layer("concat", None, [onehot, images], graph, "disc.concat")
    _check_divisible(x, 4, "discriminator")
    for stage in ("disc0", "disc1"):
        x = forward_layer("conv2d", param_slice(params, stage), x, graph, stage)
        x = forward_layer("leaky_relu", None, x, graph, f"{stage}.act", negative_slope=cfg.leaky_slope)
        x = forward_layer("avgpool", None, x, graph, f"{stage}.pool")
    return forward_layer("conv2d", param_slice(params, "disc_head"), x, graph, "disc_head")


def discriminator_forward(params, onehot, images, cfg: StyleModelConfig) -> torch.Tensor:
    """Patch probabilities D(x, y) in (0, 1)."""
    return torch.sigmoid(discriminator_logits(params, onehot, images, cfg))


@dataclass
class StyleModel:
    """A trained label-to-image style model of one client.

    Attributes:
        owner (str): Client id of the data the model was trained on.
        config (StyleModelConfig): Architecture and training hyperparameters.
        generator (ParamSet): G, one-hot LabelMap to GrayImage.
        discriminator (ParamSet): D, patch classifier of (label, image) pairs.
        seed (int): Training seed.
        history (dict): Per-epoch ``l1``, ``generator`` and ``discriminator`` loss curves.
        final_l1 (float): Reconstruction L1 of G on the owner's training labels after training.
    """
    owner: str
    config: StyleModelConfig
    generator: ParamSet
    discriminator: ParamSet
    seed: int = 0
    history: Dict[str, List[float]] = field(default_factory=dict)
    final_l1: Optional[float] = None

    @property
    def meets_threshold(self) -> Optional[bool]:
        return None if self.final_l1 is None else self.final_l1 < self.config.l1_threshold

    def metadata(self) -> dict:
        return {"owner": self.owner, "config": self.config.to_dict(), "seed": self.seed,
                StyleModelKW.LAMBDA_L1: self.config.lambda_l1, "history": self.history, "final_l1": self.final_l1,
                "meets_threshold": self.meets_threshold}

    @classmethod
    def from_metadata(cls, metadata: dict, generator: ParamSet, discriminator: ParamSet) -> "StyleModel":
        return cls(owner=metadata["owner"], config=StyleModelConfig.from_dict(metadata["config"]),
                   generator=generator, discriminator=discriminator, seed=metadata["seed"],
                   history=metadata.get("history", {}), final_l1=metadata.get("final_l1"))

    def save(self, path_output: Union[str, Path]):
        path_output = Path(path_output)
        path_output.mkdir(parents=True, exist_ok=True)
        self.generator.save(path_output / GENERATOR_FILE)
        self.discriminator.save(path_output / DISCRIMINATOR_FILE)
        mf_utils.save_json(self.metadata(), path_output / STYLE_SIDECAR)

    @classmethod
    def load(cls, path_model: Union[str, Path]) -> "StyleModel":
        path_model = Path(path_model)
        return cls.from_metadata(mf_utils.load_json_file(path_model / STYLE_SIDECAR),
                                 ParamSet.load(path_model / GENERATOR_FILE),
                                 ParamSet.load(path_model / DISCRIMINATOR_FILE))


def discriminator_loss(style: StyleModel, labels, images, discriminator: Optional[ParamSet] = None,
                       graph: Optional[ComputeGraph] = None) -> torch.Tensor:
    """``-[log D(x, y) + log(1 - D(x, G(x)))]`` averaged over the patch grid; G is held fixed.

    Args:
        style (StyleModel): Provides G, the config and (unless overridden) D.
        labels: LabelMaps x.
        images: Real GrayImages y.
        discriminator (ParamSet): D parameters to evaluate instead of ``style.discriminator``.
        graph (ComputeGraph): Recording graph.
    """
    d_params = style.discriminator if discriminator is None else discriminator
    onehot, real = one_hot(labels), to_batch(images)
    with torch.no_grad():
        fake = generator_forward(style.generator, onehot, style.config)
    d_real = discriminator_logits(d_params, onehot, real, style.config, graph)
    d_fake = discriminator_logits(d_params, onehot, fake, style.config, graph)
    return mf_losses.CGANDiscriminatorLoss(from_logits=True)(d_real, d_fake)


def generator_loss(style: StyleModel, labels, images, lambda_l1: Optional[float] = None,
                   generator: Optional[ParamSet] = None, graph: Optional[ComputeGraph] = None) -> torch.Tensor:
    """``-log D(x, G(x)) + lambda_l1 * mean |y - G(x)|``; D is held fixed.

    Args:
        style (StyleModel): Provides D, the config and (unless overridden) G.
        labels: LabelMaps x.
        images: Real GrayImages y.
        lambda_l1 (float): L1 weight, ``style.config.lambda_l1`` by default.
        generator (ParamSet): G parameters to evaluate instead of ``style.generator``.
        graph (ComputeGraph): Recording graph.
    """
    g_params = style.generator if generator is None else generator
    lambda_l1 = style.config.lambda_l1 if lambda_l1 is None else lambda_l1
    onehot, real = one_hot(labels), to_batch(images)
    fake = generator_forward(g_params, onehot, style.config, graph)
    d_fake = discriminator_logits(style.discriminator, onehot, fake, style.config, graph)
    return mf_losses.CGANGeneratorLoss(lambda_l1, from_logits=True)(d_fake, fake, real)


def reconstruction_l1(style: StyleModel, labels, images) -> float:
    """Mean |y - G(x)| over a set of (label, image) pairs."""
    with torch.no_grad():
        fake = generator_forward(style.generator, one_hot(labels), style.config)
        return float(mf_losses.L1Loss()(fake, to_batch(images)))


def generate_synthetic(style: StyleModel, label: np.ndarray) -> np.ndarray:
    """Render a LabelMap in the style of ``style.owner``.

    Returns:
        ndarray: float64 GrayImage in [0, 1].
    """
    label = np.asarray(label)
    if label.ndim != 2:
        raise ShapeError(f"generate_synthetic expects a single (H, W) label map, got shape {label.shape}.")
    with torch.no_grad():
        image = generator_forward(style.generator, one_hot(label), style.config)[0, 0]
    return np.clip(image.numpy(), 0.0, 1.0)
