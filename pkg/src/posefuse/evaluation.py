"""Accuracy and depth-discrepancy metrics plus the PCA feature view.

Accuracy follows the retrieval protocol: aggregate the query, fetch the
best template, and count a hit when the class matches and the angular
error clears the threshold. Seen/unseen rows split the same report by
whether the query's class was in the training set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import AggregatorModel, model_fingerprint
from .errors import ShapeMismatchError
from .geometry import acc_at_threshold, geodesic_distance
from .matching import DEFAULT_DELTA, TemplateGallery, retrieve

DEFAULT_LAMBDA_DEG = 15.0
DEFAULT_VSD_TAU = 0.02  # meters
DEFAULT_VSD_THRESHOLD = 0.3
_DEGENERATE_REL_VAR = 1e-12


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel depth in meters; 0 marks pixels with no surface."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeMismatchError(f"depth image must be HxW, got {v.shape}")
        if not np.all(np.isfinite(v)) or float(v.min()) < 0:
            raise ValueError("depth values must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class EvalRow:
    split: str
    subset: str  # "seen" | "unseen" | "all"
    n_samples: int
    accuracy: float


@dataclass(frozen=True)
class SampleResult:
    index: int
    gt_class_id: int
    predicted_class_id: int
    template_id: int
    score: float
    angle_error: float  # normalized geodesic distance in [0, 1]
    correct: int


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    samples: tuple[SampleResult, ...]
    config: dict
    model_fingerprint: str


def evaluate_acc(dataset, gallery: TemplateGallery, model: AggregatorModel,
                 delta: float = DEFAULT_DELTA,
                 lambda_deg: float = DEFAULT_LAMBDA_DEG,
                 seen_classes=None, split: str = "test") -> EvalReport:
    """Score every sample by retrieval and report exact mean accuracies.

    With seen_classes given, rows for the seen and unseen subsets are
    added next to the overall row; subsets with no samples are omitted.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset must be non-empty")
    fingerprint = model_fingerprint(model)
    seen = None if seen_classes is None else {int(c) for c in seen_classes}
    samples = []
    for index, sample in enumerate(dataset):
        feats = model.aggregate(sample.query_stack)
        result = retrieve(feats, gallery, delta, expect_fingerprint=fingerprint)
        correct = acc_at_threshold(result.class_label, result.pose.rotation,
                                   sample.gt_class, sample.gt_pose.rotation,
                                   lambda_deg)
        samples.append(SampleResult(
            index, sample.gt_class.id, result.class_label.id,
            result.template_id, result.score,
            geodesic_distance(result.pose.rotation, sample.gt_pose.rotation),
            correct))

    def row(subset: str, keep) -> EvalRow | None:
        picked = [s for s in samples if keep(s)]
        if not picked:
            return None
        hits = sum(s.correct for s in picked)
        return EvalRow(split, subset, len(picked), hits / len(picked))

    rows = [row("all", lambda s: True)]
    if seen is not None:
        rows.append(row("seen", lambda s: s.gt_class_id in seen))
        rows.append(row("unseen", lambda s: s.gt_class_id not in seen))
    rows = tuple(r for r in rows if r is not None)
    return EvalReport(rows, tuple(samples),
                      {"delta": delta, "lambda_deg": lambda_deg, "split": split},
                      fingerprint)


def _depth_values(depth) -> np.ndarray:
    if isinstance(depth, DepthImage):
        return depth.values
    return DepthImage(np.asarray(depth)).values


def vsd_error(d_est, d_gt, tau: float = DEFAULT_VSD_TAU) -> float:
    """1 minus the fraction of jointly-valid pixels agreeing within tau,
    over the union of valid pixels; 0 when both depth maps are empty."""
    est = _depth_values(d_est)
    gt = _depth_values(d_gt)
    if est.shape != gt.shape:
        raise ShapeMismatchError(
            f"depth images must share a shape, got {est.shape} vs {gt.shape}")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    valid_est = est > 0
    valid_gt = gt > 0
    union = int(np.count_nonzero(valid_est | valid_gt))
    if union == 0:
        return 0.0
    both = valid_est & valid_gt
    agree = int(np.count_nonzero(both & (np.abs(est - gt) < tau)))
    return 1.0 - agree / union


def vsd_recall(errors, threshold: float = DEFAULT_VSD_THRESHOLD) -> float:
    """Fraction of errors strictly below the threshold."""
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        raise ValueError("errors must be non-empty")
    if errors.min() < 0 or errors.max() > 1:
        raise ValueError("errors must lie in [0, 1]")
    return int(np.count_nonzero(errors < threshold)) / errors.size


def principal_components(feature_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and sign-fixed eigenvectors (columns) of
    the cell covariance of a C x S x S map."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 3:
        raise ShapeMismatchError(f"expected CxSxS, got {fmap.shape}")
    c = fmap.shape[0]
    cells = fmap.reshape(c, -1).T  # (S*S, C) cells as samples
    centered = cells - cells.mean(axis=0)
    cov = centered.T @ centered / max(cells.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    for k in range(eigvecs.shape[1]):
        # sign rule: the largest-magnitude loading points positive
        pivot = np.argmax(np.abs(eigvecs[:, k]))
        if eigvecs[pivot, k] < 0:
            eigvecs[:, k] = -eigvecs[:, k]
    return eigvals, eigvecs


def pca_visualize(feature) -> np.ndarray:
    """Map the top-3 principal components of the cells to RGB in [0, 1].

    Components with (near-)zero variance render as flat 0.5 instead of
    erroring, so constant or low-rank features stay visualizable.
    """
    fmap = np.asarray(getattr(feature, "map", feature), dtype=np.float64)
    if fmap.ndim != 3 or fmap.shape[0] < 3:
        raise ShapeMismatchError(
            f"need at least 3 channels of a CxSxS map, got {fmap.shape}")
    _, h, w = fmap.shape
    eigvals, eigvecs = principal_components(fmap)
    scale = max(float(eigvals[0]), 0.0)
    cells = fmap.reshape(fmap.shape[0], -1).T
    centered = cells - cells.mean(axis=0)
    image = np.full((h * w, 3), 0.5)
    for k in range(3):
        if eigvals[k] <= _DEGENERATE_REL_VAR * scale or eigvals[k] <= 0:
            continue
        coords = centered @ eigvecs[:, k]
        lo, hi = float(coords.min()), float(coords.max())
        if hi - lo < 1e-30:
            continue
        image[:, k] = (coords - lo) / (hi - lo)
    return image.reshape(h, w, 3)


# --- report serialization ---------------------------------------------------

def write_report_text(report: EvalReport, path: str) -> None:
    """Key/value header plus one fixed-order line per row."""
    lines = [f"model_fingerprint {report.model_fingerprint}"]
    for key in sorted(report.config):
        lines.append(f"{key} {report.config[key]!r}")
    lines.append("split subset n_samples accuracy")
    for row in report.rows:
        lines.append(f"{row.split} {row.subset} {row.n_samples} {row.accuracy!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report_csv(report: EvalReport, path: str) -> None:
    """split,seen,unseen table; blank cells where a subset has no row."""
    by_split: dict[str, dict[str, float]] = {}
    for row in report.rows:
        by_split.setdefault(row.split, {})[row.subset] = row.accuracy
    lines = ["split,seen,unseen"]
    for split in sorted(by_split):
        cells = by_split[split]
        seen = repr(cells["seen"]) if "seen" in cells else ""
        unseen = repr(cells["unseen"]) if "unseen" in cells else ""
        lines.append(f"{split},{seen},{unseen}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
