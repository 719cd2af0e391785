"""On-disk dataset layout and the synthetic-world generator.

A dataset directory holds one dataset.json describing classes (with
seen/unseen membership), template poses, and query samples. Synthetic
samples are regenerated on demand from recorded seeds, so the tree
stays small and byte-stable; precomputed feature fixtures are referenced
by relative path instead.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .blobio import read_json, write_json
from .errors import ManifestError
from .features import FeatureStack, fixture_load, synthetic_extract
from .geometry import (ClassLabel, Pose, Rotation3, from_axis_angle,
                       sample_viewsphere, viewsphere_candidate_counts)
from .training import TrainSample

DATASET_VERSION = 1
SPLITS = ("train", "test")
_DATA_TAG = 0xDA7A  # namespace for dataset seed sequences


@dataclass(frozen=True)
class TemplateRecord:
    class_id: int
    rotation: Rotation3
    source: str = ""
    fixture: str | None = None


@dataclass(frozen=True)
class SampleRecord:
    split: str
    class_id: int
    rotation: Rotation3
    feature_seed: int = 0
    occlusion: tuple[float, float, float, float] | None = None  # normalized r0,c0,r1,c1
    fixture: str | None = None
    translation: tuple[float, float, float] | None = None
    bbox: tuple[float, float, float, float] | None = None


@dataclass(frozen=True)
class DatasetLayout:
    root: str
    provider_kind: str
    layer_spec: tuple[tuple[int, int, int], ...]
    noise_level: float
    classes: tuple[ClassLabel, ...]
    seen_class_ids: frozenset
    templates: tuple[TemplateRecord, ...]
    samples: tuple[SampleRecord, ...]

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ManifestError("class ids must be unique")
        known = set(ids)
        if not self.seen_class_ids <= known:
            raise ManifestError("seen classes must be declared classes")
        for t in self.templates:
            if t.class_id not in known:
                raise ManifestError(f"template references unknown class {t.class_id}")
        for s in self.samples:
            if s.split not in SPLITS:
                raise ManifestError(f"sample split {s.split!r} not in {SPLITS}")
            if s.class_id not in known:
                raise ManifestError(f"sample references unknown class {s.class_id}")
            if s.split == "train" and s.class_id not in self.seen_class_ids:
                raise ManifestError(
                    f"train split contains unseen class {s.class_id}; the class "
                    f"groups must not overlap")

    def class_label(self, class_id: int) -> ClassLabel:
        for c in self.classes:
            if c.id == class_id:
                return c
        raise KeyError(class_id)

    def split_samples(self, split: str) -> list[SampleRecord]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        return [s for s in self.samples if s.split == split]

    def unseen_class_ids(self) -> frozenset:
        return frozenset(c.id for c in self.classes) - self.seen_class_ids


def _apply_occlusion(stack: FeatureStack, rect) -> FeatureStack:
    # zero every feature cell inside the normalized rectangle, per layer
    r0, c0, r1, c1 = rect
    layers = []
    for name, arr in stack.layers:
        _, h, w = arr.shape
        out = arr.copy()
        out[:, int(r0 * h):max(int(r0 * h) + 1, math.ceil(r1 * h)),
            int(c0 * w):max(int(c0 * w) + 1, math.ceil(c1 * w))] = 0.0
        layers.append((name, out))
    return FeatureStack(layers, timestep=stack.timestep)


def sample_stack(layout: DatasetLayout, record: SampleRecord) -> FeatureStack:
    if record.fixture is not None:
        stack = fixture_load(os.path.join(layout.root, record.fixture))
    else:
        stack = synthetic_extract(record.class_id, record.rotation,
                                  layout.layer_spec, layout.noise_level,
                                  record.feature_seed)
    if record.occlusion is not None:
        stack = _apply_occlusion(stack, record.occlusion)
    return stack


def make_train_samples(layout: DatasetLayout, split: str) -> list[TrainSample]:
    samples = []
    for record in layout.split_samples(split):
        translation = (np.asarray(record.translation)
                       if record.translation is not None else None)
        samples.append(TrainSample(sample_stack(layout, record),
                                   layout.class_label(record.class_id),
                                   Pose(record.rotation, translation)))
    return samples


def template_meta(layout: DatasetLayout, resolution: int) -> list[tuple]:
    """Gallery-build input: templates rendered clean (no query noise),
    with full masks at the model's output resolution."""
    meta = []
    mask = np.ones((resolution, resolution), dtype=bool)
    for record in layout.templates:
        if record.fixture is not None:
            stack = fixture_load(os.path.join(layout.root, record.fixture))
        else:
            stack = synthetic_extract(record.class_id, record.rotation,
                                      layout.layer_spec, 0.0, 0)
        meta.append((layout.class_label(record.class_id), Pose(record.rotation),
                     mask, stack, record.source))
    return meta


# --- persistence ------------------------------------------------------------

def _rotation_list(rotation: Rotation3) -> list[float]:
    return [float(v) for v in rotation.as_flat()]


def save_dataset(layout: DatasetLayout, root: str | None = None) -> None:
    root = layout.root if root is None else root
    os.makedirs(root, exist_ok=True)
    payload = {
        "version": DATASET_VERSION,
        "provider": {
            "kind": layout.provider_kind,
            "layer_spec": [list(s) for s in layout.layer_spec],
            "noise_level": layout.noise_level,
        },
        "classes": [{"id": c.id, "name": c.name, "seen": c.id in layout.seen_class_ids}
                    for c in layout.classes],
        "templates": [{
            "class_id": t.class_id,
            "rotation": _rotation_list(t.rotation),
            "source": t.source,
            "fixture": t.fixture,
        } for t in layout.templates],
        "samples": [{
            "split": s.split,
            "class_id": s.class_id,
            "rotation": _rotation_list(s.rotation),
            "feature_seed": s.feature_seed,
            "occlusion": list(s.occlusion) if s.occlusion is not None else None,
            "fixture": s.fixture,
            "translation": list(s.translation) if s.translation is not None else None,
            "bbox": list(s.bbox) if s.bbox is not None else None,
        } for s in layout.samples],
    }
    write_json(os.path.join(root, "dataset.json"), payload)


def load_dataset(root: str) -> DatasetLayout:
    payload = read_json(os.path.join(root, "dataset.json"))
    if payload.get("version") != DATASET_VERSION:
        raise ManifestError(
            f"dataset {root} has version {payload.get('version')!r}, "
            f"expected {DATASET_VERSION}")
    try:
        provider = payload["provider"]
        kind = str(provider["kind"])
        layer_spec = tuple(tuple(int(v) for v in s) for s in provider["layer_spec"])
        noise_level = float(provider["noise_level"])
        classes = tuple(ClassLabel(int(c["id"]), str(c["name"]))
                        for c in payload["classes"])
        seen = frozenset(int(c["id"]) for c in payload["classes"] if c["seen"])
        templates = tuple(TemplateRecord(
            int(t["class_id"]), Rotation3.from_flat(t["rotation"]),
            str(t.get("source", "")), t.get("fixture"),
        ) for t in payload["templates"])
        samples = tuple(SampleRecord(
            str(s["split"]), int(s["class_id"]), Rotation3.from_flat(s["rotation"]),
            int(s.get("feature_seed", 0)),
            tuple(s["occlusion"]) if s.get("occlusion") is not None else None,
            s.get("fixture"),
            tuple(s["translation"]) if s.get("translation") is not None else None,
            tuple(s["bbox"]) if s.get("bbox") is not None else None,
        ) for s in payload["samples"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed dataset.json in {root}: {exc}") from exc
    return DatasetLayout(root, kind, layer_spec, noise_level, classes, seen,
                         templates, samples)


# --- synthetic world --------------------------------------------------------

DEFAULT_LAYER_SPEC = ((12, 8, 8), (16, 16, 16), (20, 32, 32))


def _derived_seed(*key: int) -> int:
    ss = np.random.SeedSequence([_DATA_TAG, *key])
    return int(ss.generate_state(1, np.uint64)[0])


def _template_rotations(count: int) -> list[Rotation3]:
    # smallest achievable viewsphere size >= count, evenly subsampled so
    # the template count is exactly what was asked for
    candidates = [n for _, n in viewsphere_candidate_counts(upper_hemisphere_only=True)]
    feasible = [n for n in candidates if n >= count]
    if not feasible:
        raise ValueError(f"templates_per_class {count} exceeds the largest "
                         f"supported viewsphere ({max(candidates)})")
    views = sample_viewsphere(min(feasible))
    if len(views) == count:
        return views
    picks = (np.arange(count) * len(views)) // count
    return [views[int(i)] for i in picks]


def _perturbed_rotation(base: Rotation3, angle_rad: float,
                        rng: np.random.Generator) -> Rotation3:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return Rotation3(from_axis_angle(axis, angle_rad).m @ base.m)


def generate_synthetic_dataset(root: str, classes: int, templates_per_class: int,
                               queries_per_class: int, noise: float, seed: int,
                               perturb_deg: float = 5.0, unseen_classes: int = 1,
                               layer_spec=DEFAULT_LAYER_SPEC,
                               occlude: bool = False) -> DatasetLayout:
    """Deterministic desk-scale world: per class, viewsphere template
    poses plus train/test queries perturbed off a random template by a
    fixed angle. Seen classes get train and test queries; unseen classes
    get test queries only. With occlude set, each query's features lose
    a seeded rectangle covering about a quarter of the area.
    """
    if classes < 1 or templates_per_class < 1 or queries_per_class < 1:
        raise ValueError("classes, templates_per_class, queries_per_class must be >= 1")
    if not 0 <= unseen_classes < classes:
        raise ValueError("unseen_classes must leave at least one seen class")
    if noise < 0 or perturb_deg < 0:
        raise ValueError("noise and perturb_deg must be >= 0")
    layer_spec = tuple(tuple(int(v) for v in s) for s in layer_spec)
    class_labels = tuple(ClassLabel(c, f"class_{c:03d}") for c in range(classes))
    seen = frozenset(range(classes - unseen_classes))
    base_rotations = _template_rotations(templates_per_class)
    templates = tuple(
        TemplateRecord(c, rot, f"template:c{c}:v{k}")
        for c in range(classes)
        for k, rot in enumerate(base_rotations)
    )
    angle = math.radians(perturb_deg)
    samples = []
    for c in range(classes):
        for split in SPLITS:
            if split == "train" and c not in seen:
                continue
            for j in range(queries_per_class):
                rng = np.random.default_rng(
                    [_DATA_TAG, seed, c, SPLITS.index(split), j])
                base = base_rotations[int(rng.integers(len(base_rotations)))]
                rotation = _perturbed_rotation(base, angle, rng)
                occlusion = None
                if occlude:
                    r0 = float(rng.uniform(0.0, 0.5))
                    c0 = float(rng.uniform(0.0, 0.5))
                    occlusion = (r0, c0, r0 + 0.5, c0 + 0.5)
                samples.append(SampleRecord(
                    split, c, rotation,
                    _derived_seed(seed, 1, c, SPLITS.index(split), j),
                    occlusion))
    layout = DatasetLayout(root, "synthetic", layer_spec, float(noise),
                           class_labels, seen, templates, tuple(samples))
    save_dataset(layout)
    return layout
