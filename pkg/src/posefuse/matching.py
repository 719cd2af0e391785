"""Masked cosine similarity and template retrieval.

A gallery caches one aggregated feature map per rendered template. A
query is scored against every template with a per-cell cosine that is
filtered by the template's mask and a threshold, then averaged; the
best-scoring template lends the query its class and pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregatedFeature, AggregatorModel, model_fingerprint
from .blobio import load_array_map, read_json, save_arrays, write_json
from .errors import ManifestError, ShapeMismatchError, StaleGalleryError
from .geometry import ClassLabel, Pose, Rotation3

GALLERY_VERSION = 1
DEFAULT_DELTA = 0.2
SENTINEL_SCORE = -1.0
_NORM_EPS = 1e-12


def _as_map(feature) -> np.ndarray:
    if isinstance(feature, AggregatedFeature):
        return feature.map
    return np.asarray(feature)


def masked_similarity(query, tmpl, mask: np.ndarray, delta: float = DEFAULT_DELTA) -> float:
    """Mean per-cell cosine over masked cells whose cosine clears delta.

    Cosines are taken over the channel axis in double precision; a cell
    where either descriptor has norm below 1e-12 counts as cosine 0.
    Returns -1 when no cell survives, which is strictly below any
    achievable mean, so empty matches never win retrieval.
    """
    q = _as_map(query).astype(np.float64, copy=False)
    t = _as_map(tmpl).astype(np.float64, copy=False)
    mask = np.asarray(mask)
    if q.ndim != 3 or q.shape != t.shape:
        raise ShapeMismatchError(
            f"query and template must share CxSxS shape, got {q.shape} vs {t.shape}")
    if mask.shape != q.shape[1:] or mask.dtype != bool:
        raise ShapeMismatchError(
            f"mask must be boolean with shape {q.shape[1:]}, got {mask.dtype} {mask.shape}")
    if not mask.any():
        raise ValueError("mask has no true cell")
    if not -1.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [-1, 1], got {delta}")
    num = np.sum(q * t, axis=0)
    qn = np.sqrt(np.sum(q * q, axis=0))
    tn = np.sqrt(np.sum(t * t, axis=0))
    valid = (qn >= _NORM_EPS) & (tn >= _NORM_EPS)
    cos = np.zeros(num.shape)
    np.divide(num, qn * tn, out=cos, where=valid)
    keep = mask & (cos >= delta)
    if not keep.any():
        return SENTINEL_SCORE
    return float(np.mean(cos[keep]))


def downsample_mask(mask: np.ndarray, target: int) -> np.ndarray:
    """Max-pool a full-resolution boolean mask to target x target: an
    output cell is true when any pixel it covers is true."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != bool:
        raise ShapeMismatchError(f"mask must be 2D boolean, got {mask.dtype} {mask.shape}")
    h, w = mask.shape
    if target < 1 or h < 1 or w < 1:
        raise ValueError("mask and target must be non-empty")
    if (h, w) == (target, target):
        return mask.copy()
    out = np.zeros((target, target), dtype=bool)
    for u in range(target):
        r0, r1 = (u * h) // target, -((-(u + 1) * h) // target)
        for v in range(target):
            c0, c1 = (v * w) // target, -((-(v + 1) * w) // target)
            out[u, v] = mask[r0:r1, c0:c1].any()
    return out


@dataclass(frozen=True)
class Template:
    """One gallery entry; `stack` keeps the source features when the
    gallery must be re-aggregated under updated model parameters."""

    id: int
    class_label: ClassLabel
    pose: Pose
    mask: np.ndarray
    features: AggregatedFeature
    source: str = ""
    stack: object = None

    def __post_init__(self):
        if self.id < 0:
            raise ValueError("template id must be non-negative")
        mask = np.asarray(self.mask)
        fmap = self.features.map
        if mask.dtype != bool or mask.shape != fmap.shape[1:]:
            raise ShapeMismatchError(
                f"template {self.id}: mask {mask.dtype} {mask.shape} does not match "
                f"feature map {fmap.shape}")
        if not mask.any():
            raise ValueError(f"template {self.id}: mask has no true cell")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class TemplateGallery:
    templates: tuple[Template, ...]
    model_fingerprint: str

    def __post_init__(self):
        templates = tuple(self.templates)
        if not templates:
            raise ValueError("gallery must hold at least one template")
        ids = [t.id for t in templates]
        if len(set(ids)) != len(ids):
            raise ValueError("template ids must be unique")
        shape = templates[0].features.map.shape
        for t in templates:
            if t.features.map.shape != shape:
                raise ShapeMismatchError(
                    f"template {t.id} features shaped {t.features.map.shape}, "
                    f"gallery uses {shape}")
        object.__setattr__(self, "templates", templates)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.templates[0].features.map.shape

    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted({t.class_label.id for t in self.templates}))

    def by_class(self, class_id: int) -> list[Template]:
        return [t for t in self.templates if t.class_label.id == class_id]

    def has_stacks(self) -> bool:
        return all(t.stack is not None for t in self.templates)


@dataclass(frozen=True)
class MatchResult:
    template_id: int
    score: float
    class_label: ClassLabel
    pose: Pose


def retrieve(query, gallery: TemplateGallery, delta: float = DEFAULT_DELTA,
             expect_fingerprint: str | None = None) -> MatchResult:
    """Best-scoring template under masked_similarity; ties go to the
    lowest template id. An expected fingerprint guards against scoring a
    query from one model against features cached from another."""
    if expect_fingerprint is not None and expect_fingerprint != gallery.model_fingerprint:
        raise StaleGalleryError(
            f"gallery features were cached under fingerprint "
            f"{gallery.model_fingerprint[:12]}..., query model is "
            f"{expect_fingerprint[:12]}...")
    qmap = _as_map(query)
    if qmap.shape != gallery.feature_shape:
        raise ShapeMismatchError(
            f"query shaped {qmap.shape}, gallery features are {gallery.feature_shape}")
    best = None
    best_score = -np.inf
    for tmpl in sorted(gallery.templates, key=lambda t: t.id):
        score = masked_similarity(qmap, tmpl.features, tmpl.mask, delta)
        if score > best_score:
            best, best_score = tmpl, score
    return MatchResult(best.id, best_score, best.class_label, best.pose)


def build_gallery(templates_meta, model: AggregatorModel) -> TemplateGallery:
    """Aggregate every template stack once under the given model.

    templates_meta entries are (class_label, pose, mask, stack) or
    (class_label, pose, mask, stack, source); masks must already be at
    the model's output resolution (see downsample_mask).
    """
    meta = list(templates_meta)
    if not meta:
        raise ValueError("gallery must hold at least one template")
    templates = []
    for idx, entry in enumerate(meta):
        if len(entry) == 4:
            class_label, pose, mask, stack = entry
            source = ""
        elif len(entry) == 5:
            class_label, pose, mask, stack, source = entry
        else:
            raise ValueError(
                f"template {idx}: expected (class, pose, mask, stack[, source])")
        try:
            features = model.aggregate(stack)
        except ShapeMismatchError as exc:
            raise ShapeMismatchError(
                f"template {idx} ({source or 'unnamed'}): {exc}") from exc
        templates.append(Template(idx, class_label, pose, np.asarray(mask),
                                  features, source, stack))
    return TemplateGallery(tuple(templates), model_fingerprint(model))


# --- persistence ------------------------------------------------------------

def _encode_rle(mask: np.ndarray) -> list[int]:
    # run lengths over the row-major flattening, first run counts False
    flat = mask.reshape(-1)
    runs = []
    current, count = False, 0
    for v in flat:
        if bool(v) == current:
            count += 1
        else:
            runs.append(count)
            current, count = bool(v), 1
    runs.append(count)
    return runs


def _decode_rle(runs, shape) -> np.ndarray:
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=bool)
    pos, value = 0, False
    for run in runs:
        run = int(run)
        if run < 0 or pos + run > total:
            raise ManifestError(f"mask run-length data does not fit shape {shape}")
        flat[pos:pos + run] = value
        pos += run
        value = not value
    if pos != total:
        raise ManifestError(f"mask run-length data does not fit shape {shape}")
    return flat.reshape(shape)


def _blob_name(template_id: int) -> str:
    return f"template_{template_id:06d}"


def save_gallery(gallery: TemplateGallery, dirpath: str) -> None:
    """Write gallery.json plus one float32 feature blob per template.

    Source stacks are not persisted; a loaded gallery supports retrieval
    but not re-aggregation. Missing translations are stored as zeros.
    """
    entries = []
    arrays = []
    for t in sorted(gallery.templates, key=lambda t: t.id):
        fmap = t.features.map
        if fmap.dtype != np.float32:
            raise ShapeMismatchError(
                f"template {t.id}: persisted features must be float32, got {fmap.dtype}")
        translation = (t.pose.translation if t.pose.translation is not None
                       else np.zeros(3))
        entries.append({
            "id": t.id,
            "class_id": t.class_label.id,
            "class_name": t.class_label.name,
            "rotation": [float(v) for v in t.pose.rotation.as_flat()],
            "translation": [float(v) for v in translation],
            "mask_shape": list(t.mask.shape),
            "mask_rle": _encode_rle(t.mask),
            "source": t.source,
        })
        arrays.append((_blob_name(t.id), fmap))
    save_arrays(dirpath, {"version": GALLERY_VERSION}, arrays)
    write_json(f"{dirpath}/gallery.json", {
        "version": GALLERY_VERSION,
        "model_fingerprint": gallery.model_fingerprint,
        "templates": entries,
    })


def load_gallery(dirpath: str) -> TemplateGallery:
    payload = read_json(f"{dirpath}/gallery.json")
    if payload.get("version") != GALLERY_VERSION:
        raise ManifestError(
            f"gallery {dirpath} has version {payload.get('version')!r}, "
            f"expected {GALLERY_VERSION}")
    fingerprint = payload.get("model_fingerprint")
    entries = payload.get("templates")
    if not isinstance(fingerprint, str) or not isinstance(entries, list):
        raise ManifestError(f"gallery {dirpath} is missing fingerprint or templates")
    _, blobs = load_array_map(dirpath)
    templates = []
    for entry in entries:
        try:
            tid = int(entry["id"])
            label = ClassLabel(int(entry["class_id"]), str(entry["class_name"]))
            rotation = Rotation3.from_flat(entry["rotation"])
            translation = np.asarray(entry["translation"], dtype=np.float64)
            mask = _decode_rle(entry["mask_rle"], tuple(entry["mask_shape"]))
            source = str(entry.get("source", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"gallery {dirpath}: malformed template entry: {exc}") from exc
        name = _blob_name(tid)
        if name not in blobs:
            raise ManifestError(f"gallery {dirpath}: no feature blob for template {tid}")
        features = AggregatedFeature(blobs[name])
        templates.append(Template(tid, label, Pose(rotation, translation), mask,
                                  features, source))
    return TemplateGallery(tuple(templates), fingerprint)
