from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger
from pathlib import Path
from tqdm import tqdm

from microfed import metrics as mf_metrics
from microfed import models as mf_models
from microfed import utils as mf_utils
from microfed.autodiff import ParamSet
from microfed.loader.dataset import ClientDataset, Sample

GLOBAL_TEST_SET = "global"
SUMMARY_KEYS = ("MAP", "MVI", "ARI")


@dataclass
class MetricsReport:
    """Per-image AP, VI and ARI of one model on one test set.

    Attributes:
        test_set (str): Identifier of the test set, usually the client id.
        image_ids (list): Sample ids, in evaluation order.
        ap (list): Average precision of every image.
        vi (list): Variation of information (bits) of every image.
        ari (list): Adjusted rand index of every image.
        precisions (list): Per-threshold precision of every image.
        over_segmentation (list): H(prediction | ground truth) of every image.
        under_segmentation (list): H(ground truth | prediction) of every image.
        thresholds (list): IoU thresholds of the precisions.
    """
    test_set: str
    image_ids: List[str] = field(default_factory=list)
    ap: List[float] = field(default_factory=list)
    vi: List[float] = field(default_factory=list)
    ari: List[float] = field(default_factory=list)
    precisions: List[List[float]] = field(default_factory=list)
    over_segmentation: List[float] = field(default_factory=list)
    under_segmentation: List[float] = field(default_factory=list)
    thresholds: Sequence[float] = mf_metrics.IOU_THRESHOLDS

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def map(self) -> float:
        return float(np.mean(self.ap))

    @property
    def mvi(self) -> float:
        return float(np.mean(self.vi))

    @property
    def mean_ari(self) -> float:
        return float(np.mean(self.ari))

    def to_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame({"image_id": self.image_ids, "ap": self.ap, "vi": self.vi, "ari": self.ari})
        return df.set_index("image_id")

    def summary(self) -> dict:
        mean_precisions = np.mean(np.asarray(self.precisions, dtype=np.float64), axis=0)
        return {
            "test_set": self.test_set,
            "n_images": self.n_images,
            "MAP": self.map,
            "MVI": self.mvi,
            "ARI": self.mean_ari,
            "precision_per_threshold": {f"{t:.2f}": float(p) for t, p in zip(self.thresholds, mean_precisions)},
            "vi_split": {"over_segmentation": float(np.mean(self.over_segmentation)),
                         "under_segmentation": float(np.mean(self.under_segmentation))},
        }

    def save(self, path_output: Union[str, Path], name: str = None):
        """Write ``<name>.csv`` (one row per image) and ``<name>.json`` (the summary)."""
        path_output = Path(path_output)
        path_output.mkdir(parents=True, exist_ok=True)
        name = name or self.test_set
        self.to_dataframe().to_csv(path_output / f"{name}.csv", float_format="%.12g")
        mf_utils.save_json(self.summary(), path_output / f"{name}.json")


def evaluate_test_set(params: ParamSet, samples: Sequence[Sample], seg_cfg: mf_models.SegmenterConfig,
                      test_set: str = "", partition_mode: str = "include_boundary",
                      thresholds: Sequence[float] = mf_metrics.IOU_THRESHOLDS) -> MetricsReport:
    """Segment every test image and score its instances against the ground truth.

    Args:
        params (ParamSet): Segmenter weights.
        samples (list): Test samples.
        seg_cfg (SegmenterConfig): Segmenter architecture.
        test_set (str): Name reported with the results.
        partition_mode (str): ``include_boundary`` or ``grains_only``, for VI and ARI.
        thresholds (list): IoU thresholds of the average precision.

    Returns:
        MetricsReport
    """
    if not samples:
        raise ValueError(f"Test set '{test_set}' is empty.")
    thresholds = tuple(thresholds)

    def ap(pred, gt):
        return mf_metrics.average_precision(pred, gt, thresholds)

    def vi(pred, gt):
        return mf_metrics.variation_of_information(pred, gt, partition_mode)

    def ari(pred, gt):
        return mf_metrics.adjusted_rand_index(pred, gt, partition_mode)

    metric_mgr = mf_metrics.MetricManager([ap, vi, ari])
    report = MetricsReport(test_set, thresholds=thresholds)
    for sample in tqdm(samples, desc=f"Evaluation {test_set}", leave=False):
        _, pred = mf_models.predict_instances(params, sample.image, seg_cfg)
        metric_mgr([pred], [sample.instances])
        report.image_ids.append(sample.sample_id)
        report.precisions.append(mf_metrics.precision_at_thresholds(pred, sample.instances, thresholds))
        over, under = mf_metrics.conditional_entropies(pred, sample.instances, partition_mode)
        report.over_segmentation.append(over)
        report.under_segmentation.append(under)
    report.ap = [float(v) for v in metric_mgr.result_dict["ap"]]
    report.vi = [float(v) for v in metric_mgr.result_dict["vi"]]
    report.ari = [float(v) for v in metric_mgr.result_dict["ari"]]
    logger.info(f"Test set '{test_set}': MAP {report.map:.4f}, MVI {report.mvi:.4f}, ARI {report.mean_ari:.4f} "
                f"over {report.n_images} images.")
    return report


def average_reports(reports: Sequence[MetricsReport], test_set: str = GLOBAL_TEST_SET) -> dict:
    """Global summary: the mean of the per-client MAP, MVI and ARI."""
    if not reports:
        raise ValueError("average_reports needs at least one report.")
    summary = {"test_set": test_set, "n_images": int(sum(r.n_images for r in reports)),
               "clients": [r.test_set for r in reports]}
    summary["MAP"] = float(np.mean([r.map for r in reports]))
    summary["MVI"] = float(np.mean([r.mvi for r in reports]))
    summary["ARI"] = float(np.mean([r.mean_ari for r in reports]))
    return summary


def evaluate_on_clients(params: ParamSet, datasets: Sequence[ClientDataset], seg_cfg: mf_models.SegmenterConfig,
                        path_output: Union[str, Path], partition_mode: str = "include_boundary",
                        thresholds: Sequence[float] = mf_metrics.IOU_THRESHOLDS) -> Dict[str, dict]:
    """Evaluate one model on each client's test split and on their average.

    Writes ``<client id>.csv``/``.json`` per client and ``global.json`` in ``path_output``.

    Returns:
        dict: Summaries keyed by test set, the global one under ``"global"``.
    """
    reports = []
    for dataset in datasets:
        report = evaluate_test_set(params, dataset.test, seg_cfg, dataset.client_id, partition_mode, thresholds)
        report.save(path_output)
        reports.append(report)
    summaries = {r.test_set: r.summary() for r in reports}
    summaries[GLOBAL_TEST_SET] = average_reports(reports)
    mf_utils.save_json(summaries[GLOBAL_TEST_SET], Path(path_output) / f"{GLOBAL_TEST_SET}.json")
    return summaries
