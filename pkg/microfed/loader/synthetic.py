"""Synthetic polycrystalline micrographs: Voronoi grain structure and client specific rendering style."""
from dataclasses import dataclass, asdict
from typing import Tuple

import numpy as np
from loguru import logger
from scipy import ndimage

from microfed import metrics as mf_metrics
from microfed.keywords import StyleKW


@dataclass(frozen=True)
class StyleSpec:
    """How a client's microscope renders a grain structure.

    Attributes:
        mean_boundary (float): Mean intensity of boundary pixels, in [0, 1].
        mean_grain (float): Mean intensity of grain pixels, in [0, 1].
        grain_jitter (float): Half width of the uniform per-grain intensity offset.
        noise_std (float): Standard deviation of additive gaussian pixel noise.
        blur_radius (float): Gaussian blur sigma in pixels, applied before the noise.
        texture_frequency (float): Frequency (cycles/pixel) of the per-grain oriented texture.
        texture_amplitude (float): Amplitude of that texture; 0 disables it.
    """
    mean_boundary: float
    mean_grain: float
    grain_jitter: float = 0.0
    noise_std: float = 0.0
    blur_radius: float = 0.0
    texture_frequency: float = 0.0
    texture_amplitude: float = 0.0

    def __post_init__(self):
        for name in (StyleKW.MEAN_BOUNDARY, StyleKW.MEAN_GRAIN):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"StyleSpec.{name} must lie in [0, 1], got {getattr(self, name)}.")
        for name in (StyleKW.GRAIN_JITTER, StyleKW.NOISE_STD, StyleKW.TEXTURE_AMPLITUDE, StyleKW.TEXTURE_FREQUENCY):
            if not 0.0 <= getattr(self, name) <= 0.5:
                raise ValueError(f"StyleSpec.{name} must lie in [0, 0.5], got {getattr(self, name)}.")
        if self.blur_radius < 0:
            raise ValueError(f"StyleSpec.blur_radius must be >= 0, got {self.blur_radius}.")

    @classmethod
    def from_dict(cls, params: dict) -> "StyleSpec":
        return cls(**{key: float(value) for key, value in params.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def sample_sites(seed: int, height: int, width: int, n_sites: int) -> np.ndarray:
    """Draw ``n_sites`` distinct pixel positions.

    Returns:
        ndarray: ``(n_sites, 2)`` integer array of ``(row, column)``.
    """
    if n_sites < 1:
        raise ValueError(f"n_sites must be >= 1, got {n_sites}.")
    if height < 8 or width < 8:
        raise ValueError(f"Image dimensions must be >= 8, got {height}x{width}.")
    if n_sites > height * width:
        raise ValueError(f"Cannot place {n_sites} sites on a {height}x{width} grid.")
    rng = np.random.default_rng(seed)
    flat = rng.choice(height * width, size=n_sites, replace=False)
    return np.stack(np.unravel_index(flat, (height, width)), axis=1).astype(np.int64)


def nearest_site(sites: np.ndarray, height: int, width: int) -> np.ndarray:
    """Index of the nearest site for every pixel (Euclidean), ties going to the lowest index."""
    rows, cols = np.mgrid[0:height, 0:width]
    best = np.full((height, width), np.iinfo(np.int64).max, dtype=np.int64)
    cell = np.zeros((height, width), dtype=np.int64)
    for index, (r, c) in enumerate(sites):
        distance = (rows - r) ** 2 + (cols - c) ** 2
        closer = distance < best
        cell[closer] = index
        best[closer] = distance[closer]
    return cell


def cell_boundaries(cell: np.ndarray) -> np.ndarray:
    """Pixels having a 4-neighbour in a different cell."""
    boundary = np.zeros(cell.shape, dtype=bool)
    vertical = cell[1:, :] != cell[:-1, :]
    horizontal = cell[:, 1:] != cell[:, :-1]
    boundary[1:, :] |= vertical
    boundary[:-1, :] |= vertical
    boundary[:, 1:] |= horizontal
    boundary[:, :-1] |= horizontal
    return boundary


def labels_from_sites(sites: np.ndarray, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Instance and label maps of the Voronoi tessellation of ``sites``.

    Grain instances are the 4-connected components of the non-boundary pixels, the same rule predictions are
    extracted with. Each instance lies inside a single cell, and a cell whose interior is cut by its own boundary
    (a sliver narrower than two pixels) holds more than one instance.
    """
    cell = nearest_site(sites, height, width)
    label = (~cell_boundaries(cell)).astype(np.uint8)
    instances = mf_metrics.connected_components(label, connectivity=4)
    return instances, label


def voronoi_labels(seed: int, height: int, width: int, n_sites: int) -> Tuple[np.ndarray, np.ndarray]:
    """Random Voronoi grain structure.

    Args:
        seed (int): Structure seed.
        height (int): Image height, >= 8.
        width (int): Image width, >= 8.
        n_sites (int): Number of Voronoi sites, in [1, height * width].

    Returns:
        ndarray, ndarray: InstanceMap (int32) and LabelMap (uint8, 1 = grain).
    """
    return labels_from_sites(sample_sites(seed, height, width, n_sites), height, width)


def render_style(instances: np.ndarray, style: StyleSpec, seed: int) -> np.ndarray:
    """Render a grain structure as a gray micrograph in the given style.

    Args:
        instances (ndarray): InstanceMap, 0 on boundaries.
        style (StyleSpec): Rendering parameters.
        seed (int): Seed of the jitter, texture and noise draws.

    Returns:
        ndarray: float64 GrayImage in [0, 1].
    """
    rng = np.random.default_rng(seed)
    instances = np.asarray(instances)
    height, width = instances.shape
    n_grains = int(instances.max(initial=0))
    grain = instances > 0

    image = np.full((height, width), style.mean_boundary, dtype=np.float64)
    offsets = np.zeros(n_grains + 1)
    if style.grain_jitter > 0 and n_grains:
        offsets[1:] = rng.uniform(-style.grain_jitter, style.grain_jitter, size=n_grains)
    image[grain] = style.mean_grain + offsets[instances[grain]]

    if style.texture_amplitude > 0 and style.texture_frequency > 0 and n_grains:
        angle = np.zeros(n_grains + 1)
        phase = np.zeros(n_grains + 1)
        angle[1:] = rng.uniform(0.0, np.pi, size=n_grains)
        phase[1:] = rng.uniform(0.0, 2.0 * np.pi, size=n_grains)
        rows, cols = np.mgrid[0:height, 0:width]
        ids = instances[grain]
        projection = cols[grain] * np.cos(angle[ids]) + rows[grain] * np.sin(angle[ids])
        wave = np.sin(2.0 * np.pi * style.texture_frequency * projection + phase[ids])
        image[grain] += style.texture_amplitude * wave

    if style.blur_radius > 0:
        image = ndimage.gaussian_filter(image, sigma=style.blur_radius, mode="reflect")
    if style.noise_std > 0:
        image = image + rng.normal(0.0, style.noise_std, size=image.shape)

    clamped = np.count_nonzero((image < 0) | (image > 1))
    if clamped:
        logger.debug(f"render_style: clamped {clamped} of {image.size} pixels.")
    return np.clip(image, 0.0, 1.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round intensities to the 8 bit grid used on disk."""
    return np.round(np.asarray(image, dtype=np.float64) * 255.0) / 255.0


def dataset_statistics(samples, bins: int = 32) -> dict:
    """Structure and appearance statistics of a list of samples.

    Returns:
        dict: mean grain count, mean boundary fraction and the normalized intensity histogram.
    """
    grain_counts = [int(s.instances.max(initial=0)) for s in samples]
    boundary_fractions = [float(np.mean(s.label == 0)) for s in samples]
    histogram = np.zeros(bins, dtype=np.float64)
    for s in samples:
        histogram += np.histogram(s.image, bins=bins, range=(0.0, 1.0))[0]
    total = histogram.sum()
    return {
        "n_samples": len(samples),
        "mean_grain_count": float(np.mean(grain_counts)) if samples else 0.0,
        "mean_boundary_fraction": float(np.mean(boundary_fractions)) if samples else 0.0,
        "intensity_histogram": histogram / total if total else histogram,
    }


def histogram_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Total variation distance between two normalized histograms, in [0, 1]."""
    return 0.5 * float(np.abs(np.asarray(a) - np.asarray(b)).sum())
