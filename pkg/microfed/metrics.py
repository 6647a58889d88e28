from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from sklearn.metrics.cluster import contingency_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

PARTITION_MODES = ("include_boundary", "grains_only")


class MetricManager(object):
    """Computes specified metrics and stores them in a dictionary.

    Args:
        metric_fns (list): List of metric functions taking ``(prediction, ground_truth)``.

    Attributes:
        metric_fns (list): List of metric functions.
        result_dict (dict): Dictionary storing metrics.
        num_samples (int): Number of samples.
    """

    def __init__(self, metric_fns: Sequence[Callable]):
        self.metric_fns = metric_fns
        self.num_samples = 0
        self.result_dict = defaultdict(list)

    def __call__(self, prediction, ground_truth):
        self.num_samples += len(prediction)
        for metric_fn in self.metric_fns:
            for p, gt in zip(prediction, ground_truth):
                res = metric_fn(p, gt)
                dict_key = metric_fn.__name__
                self.result_dict[dict_key].append(res)

    def get_results(self):
        res_dict = {}
        for key, val in self.result_dict.items():
            if np.all(np.isnan(val)):  # if all values are np.nan
                res_dict[key] = None
            else:
                res_dict[key] = np.nanmean(val)
        return res_dict

    def reset(self):
        self.num_samples = 0
        self.result_dict = defaultdict(list)


def _check_same_grid(x: np.ndarray, y: np.ndarray):
    if x.shape != y.shape:
        raise ValueError("Shape mismatch: x and y must have the same shape, got {} and {}.".format(x.shape, y.shape))


def connected_components(label: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Label the grain pixels (value 1) of a binary map into connected instances.

    Ids are dense and assigned in raster-scan order of each component's first pixel; boundary pixels get 0.

    Args:
        label (ndarray): 2D binary map.
        connectivity (int): 4 or 8.

    Returns:
        ndarray: int32 instance map.
    """
    label = np.asarray(label)
    if label.ndim != 2:
        raise ValueError(f"Expected a 2D label map, got shape {label.shape}.")
    if connectivity not in (4, 8):
        raise ValueError(f"Connectivity must be 4 or 8, got {connectivity}.")
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labeled, n_components = ndimage.label(label == 1, structure=structure)
    if n_components == 0:
        return labeled.astype(np.int32)
    flat = labeled.ravel()
    ids, first_index = np.unique(flat[flat > 0], return_index=True)
    mapping = np.zeros(n_components + 1, dtype=np.int32)
    mapping[ids[np.argsort(first_index, kind="stable")]] = np.arange(1, n_components + 1, dtype=np.int32)
    return mapping[labeled]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean pixel sets; 0 when both are empty."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    _check_same_grid(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def pairwise_iou(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """IoU of every (pred instance, gt instance) pair.

    Returns:
        ndarray: ``(n_pred, n_gt)`` matrix; entry ``[p - 1, g - 1]`` belongs to ids ``p`` and ``g``.
    """
    _check_same_grid(pred, gt)
    n_pred, n_gt = int(pred.max(initial=0)), int(gt.max(initial=0))
    joint = np.zeros((n_pred + 1, n_gt + 1), dtype=np.int64)
    np.add.at(joint, (pred.ravel().astype(np.int64), gt.ravel().astype(np.int64)), 1)
    intersection = joint[1:, 1:]
    area_pred = joint[1:, :].sum(axis=1)
    area_gt = joint[:, 1:].sum(axis=0)
    union = area_pred[:, None] + area_gt[None, :] - intersection
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, intersection / np.maximum(union, 1), 0.0)


@dataclass
class MatchResult:
    threshold: float
    tp: int
    fp: int
    fn: int
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)

    @property
    def precision(self) -> float:
        denominator = self.tp + self.fp + self.fn
        return 1.0 if denominator == 0 else self.tp / denominator


def _ranked_candidates(ious: np.ndarray) -> List[Tuple[int, int, float]]:
    pred_idx, gt_idx = np.nonzero(ious > 0)
    candidates = [(int(p) + 1, int(g) + 1, float(ious[p, g])) for p, g in zip(pred_idx, gt_idx)]
    # Highest IoU first, ties broken by lower gt id then lower pred id
    candidates.sort(key=lambda c: (-c[2], c[1], c[0]))
    return candidates


def _greedy_match(candidates, n_pred, n_gt, threshold) -> MatchResult:
    used_pred, used_gt, pairs = set(), set(), []
    for p, g, value in candidates:
        if value <= threshold:
            break
        if p in used_pred or g in used_gt:
            continue
        used_pred.add(p)
        used_gt.add(g)
        pairs.append((p, g, value))
    tp = len(pairs)
    return MatchResult(threshold=threshold, tp=tp, fp=n_pred - tp, fn=n_gt - tp, pairs=pairs)


def match_instances(pred: np.ndarray, gt: np.ndarray, threshold: float) -> MatchResult:
    """Greedy one-to-one matching by descending IoU; a pair is a hit iff IoU > threshold (strict)."""
    ious = pairwise_iou(pred, gt)
    return _greedy_match(_ranked_candidates(ious), ious.shape[0], ious.shape[1], threshold)


def precision_at_thresholds(pred: np.ndarray, gt: np.ndarray,
                            thresholds: Sequence[float] = IOU_THRESHOLDS) -> List[float]:
    """TP / (TP + FP + FN) for each threshold, with both maps empty counting as 1."""
    ious = pairwise_iou(pred, gt)
    candidates = _ranked_candidates(ious)
    return [_greedy_match(candidates, ious.shape[0], ious.shape[1], t).precision for t in thresholds]


def average_precision(pred: np.ndarray, gt: np.ndarray, thresholds: Sequence[float] = IOU_THRESHOLDS) -> float:
    """Mean over thresholds of the matching precision between two instance maps.

    Args:
        pred (ndarray): Predicted instance map (0 = background).
        gt (ndarray): Ground truth instance map.
        thresholds (list): IoU thresholds, 0.50 to 0.95 by 0.05 by default.

    Returns:
        float: AP in [0, 1].
    """
    return float(np.mean(precision_at_thresholds(pred, gt, thresholds)))


@dataclass
class ContingencyTable:
    """Overlap counts between the clusters of two partitions of the same pixels.

    Attributes:
        counts (ndarray): ``r x s`` matrix, ``counts[i, j] = |X_i & Y_j|``.
        row_ids (ndarray): Cluster ids of X in row order.
        col_ids (ndarray): Cluster ids of Y in column order.
    """
    counts: np.ndarray
    row_ids: np.ndarray
    col_ids: np.ndarray

    @property
    def a(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def b(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def cell(self, x_id: int, y_id: int) -> int:
        rows, cols = np.nonzero(self.row_ids == x_id)[0], np.nonzero(self.col_ids == y_id)[0]
        if len(rows) == 0 or len(cols) == 0:
            return 0
        return int(self.counts[rows[0], cols[0]])


def _partition_pixels(x: np.ndarray, y: np.ndarray, mode: str) -> Tuple[np.ndarray, np.ndarray]:
    _check_same_grid(x, y)
    if mode not in PARTITION_MODES:
        raise ValueError(f"Unknown partition mode '{mode}', expected one of {PARTITION_MODES}.")
    x, y = np.asarray(x).ravel(), np.asarray(y).ravel()
    if mode == "grains_only":
        keep = (x > 0) & (y > 0)
        x, y = x[keep], y[keep]
    return x, y


def contingency_table(x: np.ndarray, y: np.ndarray, mode: str = "include_boundary") -> ContingencyTable:
    """Build the contingency table of two instance maps.

    In ``include_boundary`` mode every pixel counts and id 0 is a cluster of its own; in ``grains_only`` mode
    only pixels that are grain in both maps are kept.
    """
    x, y = _partition_pixels(x, y, mode)
    if x.size == 0:
        return ContingencyTable(np.zeros((0, 0), dtype=np.int64), np.zeros(0, dtype=np.int64),
                                np.zeros(0, dtype=np.int64))
    counts = np.asarray(contingency_matrix(x, y), dtype=np.int64)
    return ContingencyTable(counts, np.unique(x), np.unique(y))


def conditional_entropies(x: np.ndarray, y: np.ndarray, mode: str = "include_boundary") -> Tuple[float, float]:
    """Return ``(H(X|Y), H(Y|X))`` in bits."""
    table = contingency_table(x, y, mode)
    n = table.n
    if n == 0:
        return 0.0, 0.0
    counts = table.counts
    rows, cols = np.nonzero(counts)
    n_ij = counts[rows, cols].astype(np.float64)
    p_ij = n_ij / n
    h_x_given_y = float(-np.sum(p_ij * np.log2(n_ij / table.b[cols])))
    h_y_given_x = float(-np.sum(p_ij * np.log2(n_ij / table.a[rows])))
    # -0.0 cleanup
    return abs(h_x_given_y), abs(h_y_given_x)


def variation_of_information(x: np.ndarray, y: np.ndarray, mode: str = "include_boundary") -> float:
    """VI(X, Y) = H(X|Y) + H(Y|X), in bits."""
    h_x_given_y, h_y_given_x = conditional_entropies(x, y, mode)
    return h_x_given_y + h_y_given_x


def _pairs(values) -> int:
    return sum(int(v) * (int(v) - 1) // 2 for v in values)


def adjusted_rand_index(x: np.ndarray, y: np.ndarray, mode: str = "include_boundary") -> float:
    """Chance-corrected Rand index computed from the contingency table.

    All binomials are exact Python integers and the ratio is formed as a ``Fraction``, so the only rounding
    happens in the final conversion to float.

    With fewer than two compared pixels the index is undefined. One pixel, or no grain pixel in either map, counts
    as agreement (1.0); no compared pixel while one of the maps holds grains (e.g. an all-boundary prediction in
    ``grains_only`` mode) counts as 0.0.
    """
    table = contingency_table(x, y, mode)
    n = table.n
    if n == 1:
        return 1.0
    if n == 0:
        return 0.0 if np.any(np.asarray(x) > 0) or np.any(np.asarray(y) > 0) else 1.0
    index = _pairs(table.counts.ravel())
    sum_a = _pairs(table.a)
    sum_b = _pairs(table.b)
    total = n * (n - 1) // 2
    expected = Fraction(sum_a * sum_b, total)
    maximum = Fraction(sum_a + sum_b, 2)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def pair_confusion(x: np.ndarray, y: np.ndarray, mode: str = "include_boundary") -> Dict[str, int]:
    """Count pixel pairs by agreement: same-same, same-diff, diff-same, diff-diff (X first)."""
    table = contingency_table(x, y, mode)
    n = table.n
    same_same = _pairs(table.counts.ravel())
    same_x = _pairs(table.a)
    same_y = _pairs(table.b)
    total = n * (n - 1) // 2
    return {"same_same": same_same, "same_diff": same_x - same_same, "diff_same": same_y - same_same,
            "diff_diff": total - same_x - same_y + same_same}
