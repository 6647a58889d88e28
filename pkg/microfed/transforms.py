import math
from typing import Optional, Sequence

import numpy as np
from loguru import logger

from microfed.keywords import AugmentationKW, RandomErasingKW

FILL_MODES = ("constant", "noise")

# Aspect ratios of the erased rectangle are drawn log-uniformly in [ASPECT_MIN, 1 / ASPECT_MIN]
ASPECT_MIN = 0.3
MAX_ATTEMPTS = 100


def _check_erasing_params(probability, area_fraction_range, fill, fill_value):
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"Random erasing probability must lie in [0, 1], got {probability}.")
    low, high = area_fraction_range
    if not 0.0 < low <= high <= 0.5:
        raise ValueError(f"Random erasing area fraction range must satisfy 0 < low <= high <= 0.5, "
                         f"got {list(area_fraction_range)}.")
    if fill not in FILL_MODES:
        raise ValueError(f"Unknown fill '{fill}', expected one of {FILL_MODES}.")
    if not 0.0 <= fill_value <= 1.0:
        raise ValueError(f"Fill value must lie in [0, 1], got {fill_value}.")


def random_erasing(image: np.ndarray, seed: int, probability: float = 0.5,
                   area_fraction_range: Sequence[float] = (0.02, 0.2), fill: str = "noise",
                   fill_value: float = 0.0) -> np.ndarray:
    """Overwrite one random axis-aligned rectangle of the image.

    With the given probability a rectangle whose area fraction lies in ``area_fraction_range`` is filled with
    ``fill_value`` (``fill="constant"``) or with uniform noise in [0, 1] (``fill="noise"``). Only images are
    erased; labels are never touched.

    Args:
        image (ndarray): GrayImage.
        seed (int): Seed of every random draw of this call.
        probability (float): Probability of erasing.
        area_fraction_range (list): Lowest and highest erased area fraction, within (0, 0.5].
        fill (str): ``"constant"`` or ``"noise"``.
        fill_value (float): Constant fill intensity.

    Returns:
        ndarray: A new image; the input is not modified.
    """
    _check_erasing_params(probability, area_fraction_range, fill, fill_value)
    image = np.array(image, dtype=np.float64, copy=True)
    rng = np.random.default_rng(seed)
    if rng.random() >= probability:
        return image

    height, width = image.shape
    n_pixels = height * width
    low, high = area_fraction_range
    for _ in range(MAX_ATTEMPTS):
        area = rng.uniform(low, high) * n_pixels
        aspect = math.exp(rng.uniform(math.log(ASPECT_MIN), -math.log(ASPECT_MIN)))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if 1 <= h <= height and 1 <= w <= width and low <= h * w / n_pixels <= high:
            break
    else:
        side = math.ceil(math.sqrt(low * n_pixels))
        if side > min(height, width) or side * side / n_pixels > high:
            logger.debug(f"random_erasing: no rectangle of area fraction in {list(area_fraction_range)} fits a "
                         f"{height}x{width} image.")
            return image
        h = w = side

    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    if fill == "noise":
        image[top:top + h, left:left + w] = rng.uniform(0.0, 1.0, size=(h, w))
    else:
        image[top:top + h, left:left + w] = fill_value
    return image


class RandomErasing(object):
    """Random erasing applied to training images when a minibatch is assembled.

    Args:
        probability (float): Probability of erasing one rectangle.
        area_fraction_range (list): Lowest and highest erased area fraction.
        fill (str): ``"constant"`` or ``"noise"``.
        fill_value (float): Constant fill intensity.
    """

    def __init__(self, probability: float = 0.5, area_fraction_range: Sequence[float] = (0.02, 0.2),
                 fill: str = "noise", fill_value: float = 0.0):
        _check_erasing_params(probability, area_fraction_range, fill, fill_value)
        self.probability = probability
        self.area_fraction_range = tuple(area_fraction_range)
        self.fill = fill
        self.fill_value = fill_value

    def __call__(self, image: np.ndarray, seed: int) -> np.ndarray:
        return random_erasing(image, seed, self.probability, self.area_fraction_range, self.fill, self.fill_value)

    def __repr__(self):
        return (f"RandomErasing(probability={self.probability}, area_fraction_range={self.area_fraction_range}, "
                f"fill={self.fill!r}, fill_value={self.fill_value})")


def get_augmentation(augmentation_params: Optional[dict]) -> Optional[RandomErasing]:
    """Build the training augmentation from the ``augmentation`` config section, or None when disabled."""
    if not augmentation_params:
        return None
    params = augmentation_params.get(AugmentationKW.RANDOM_ERASING)
    if not params or not params.get(RandomErasingKW.APPLIED, False):
        return None
    return RandomErasing(probability=params[RandomErasingKW.PROBABILITY],
                         area_fraction_range=params[RandomErasingKW.AREA_FRACTION_RANGE],
                         fill=params[RandomErasingKW.FILL],
                         fill_value=params[RandomErasingKW.FILL_VALUE])
