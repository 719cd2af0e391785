"""Contrastive training of the fusion networks with a frozen provider.

Each query is paired with the gallery template nearest its ground-truth
pose (the positive) and a seeded sample of genuinely-wrong templates
(the negatives); masked-similarity scores feed an InfoNCE objective.
Only the fusion parameters move; feature providers are never touched.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .aggregation import (AggregatorModel, ModelConfig, config_from_payload,
                          _config_payload, load_model, save_model)
from .blobio import load_array_map, read_json, save_arrays, write_json
from .errors import (CheckpointVersionError, InsufficientNegativesError,
                     LossDivergedError, ManifestError, ShapeMismatchError)
from .features import FeatureStack
from .geometry import ClassLabel, Pose, geodesic_distance
from .matching import Template, TemplateGallery, build_gallery

CHECKPOINT_VERSION = 1
NEGATIVE_POSE_MARGIN = 15.0 / 180.0  # same-class templates closer than this
                                     # are neither positives nor negatives
_TRAIN_TAG = 0x7A41  # namespace for training seed sequences
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class TrainSample:
    query_stack: FeatureStack
    gt_class: ClassLabel
    gt_pose: Pose


@dataclass(frozen=True)
class PairBatch:
    """One query with its positive template and M-1 negatives."""

    query: TrainSample
    positive: Template
    negatives: tuple[Template, ...]

    def __post_init__(self):
        if self.positive.class_label.id != self.query.gt_class.id:
            raise ValueError("positive template must share the query's class")
        ids = [self.positive.id] + [t.id for t in self.negatives]
        if len(set(ids)) != len(ids):
            raise ValueError("pair templates must have distinct ids")
        object.__setattr__(self, "negatives", tuple(self.negatives))


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    epochs: int = 20
    learning_rate: float = 1e-3
    tau: float = 0.1
    m: int = 8  # templates per query: 1 positive + m-1 negatives
    delta: float = 0.2
    seed: int = 0
    batch_size: int = 8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.m < 2:
            raise ValueError("m must be >= 2 (at least one negative)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not -1.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [-1, 1]")

    @property
    def arch(self) -> str:
        return self.model.arch


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to resume: params, optimizer moments, config,
    completed-epoch count, and the per-batch loss trace."""

    model: AggregatorModel
    optimizer_state: dict
    config: TrainConfig
    epoch: int
    loss_history: tuple[tuple[int, int, float], ...]


def build_pairs(sample: TrainSample, gallery: TemplateGallery, m: int,
                seed: int) -> PairBatch:
    """Positive: same-class template nearest the ground-truth pose (ties
    to the lowest id). Negatives: m-1 drawn without replacement from
    same-class templates farther than the pose margin plus every
    other-class template."""
    if m < 2:
        raise ValueError("m must be >= 2")
    same = sorted(gallery.by_class(sample.gt_class.id), key=lambda t: t.id)
    if not same:
        raise InsufficientNegativesError(
            f"gallery holds no template of class {sample.gt_class.id}")
    positive = None
    best = math.inf
    for tmpl in same:
        d = geodesic_distance(tmpl.pose.rotation, sample.gt_pose.rotation)
        if d < best:
            positive, best = tmpl, d
    pool = [t for t in sorted(gallery.templates, key=lambda t: t.id)
            if t.id != positive.id
            and (t.class_label.id != sample.gt_class.id
                 or geodesic_distance(t.pose.rotation, sample.gt_pose.rotation)
                 > NEGATIVE_POSE_MARGIN)]
    if len(pool) < m - 1:
        raise InsufficientNegativesError(
            f"need {m - 1} negatives, pool has {len(pool)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=m - 1, replace=False)
    return PairBatch(sample, positive, tuple(pool[i] for i in picks))


def infonce_loss(pos_score: float, neg_scores, tau: float) -> float:
    """-log softmax probability of the positive among all scores at
    temperature tau, computed with max-subtraction."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    scores = np.asarray([pos_score, *neg_scores], dtype=np.float64) / tau
    peak = scores.max()
    return float(peak - scores[0] + math.log(np.exp(scores - peak).sum()))


def infonce_grad(pos_score: float, neg_scores, tau: float
                 ) -> tuple[float, np.ndarray]:
    """Exact gradient of infonce_loss w.r.t. (pos_score, neg_scores)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    scores = np.asarray([pos_score, *neg_scores], dtype=np.float64) / tau
    peak = scores.max()
    p = np.exp(scores - peak)
    p /= p.sum()
    return float((p[0] - 1.0) / tau), p[1:] / tau


def _masked_similarity_torch(query: torch.Tensor, tmpl: torch.Tensor,
                             mask: torch.Tensor, delta: float) -> torch.Tensor:
    # query/tmpl: (B, C, S, S); mask: (B, S, S) bool -> scores (B,)
    num = (query * tmpl).sum(dim=1)
    qn = (query * query).sum(dim=1).sqrt()
    tn = (tmpl * tmpl).sum(dim=1).sqrt()
    valid = (qn >= _NORM_EPS) & (tn >= _NORM_EPS)
    cos = torch.where(valid, num / (qn * tn).clamp_min(1e-24),
                      torch.zeros_like(num))
    keep = mask & (cos >= delta)
    count = keep.sum(dim=(-2, -1))
    total = (cos * keep).sum(dim=(-2, -1))
    empty = torch.full_like(total, -1.0)
    return torch.where(count > 0, total / count.clamp_min(1), empty)


def _infonce_torch(pos: torch.Tensor, negs: torch.Tensor, tau: float) -> torch.Tensor:
    # pos: (B,), negs: (B, m-1) -> per-sample losses (B,)
    logits = torch.cat([pos[:, None], negs], dim=1) / tau
    return torch.logsumexp(logits, dim=1) - logits[:, 0]


def _derived_seed(base_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence([_TRAIN_TAG, base_seed, *key])
    return int(ss.generate_state(1, np.uint64)[0])


def _stacks_to_layer_tensors(stacks, layer_spec, np_dtype):
    # one (B, C_i, H_i, W_i) tensor per layer, batch over the stacks
    tensors = []
    for i in range(len(layer_spec)):
        arrs = [np.ascontiguousarray(s.layers[i][1], dtype=np_dtype) for s in stacks]
        tensors.append(torch.from_numpy(np.stack(arrs)))
    return tensors


def _batch_loss(model: AggregatorModel, pairs: list[PairBatch],
                config: TrainConfig) -> torch.Tensor:
    spec = model.config.layer_spec
    batch = len(pairs)
    m = config.m
    for pair in pairs:
        if pair.query.query_stack.layer_spec != spec:
            raise ShapeMismatchError(
                f"query stack spec {pair.query.query_stack.layer_spec} does not "
                f"match model {spec}")
        if pair.positive.stack is None or any(t.stack is None for t in pair.negatives):
            raise ValueError("pair templates carry no source stacks; rebuild the "
                             "gallery from raw features")
    query_feats = model.forward(_stacks_to_layer_tensors(
        [p.query.query_stack for p in pairs], spec, model.np_dtype))
    tmpl_stacks = []
    masks = []
    for pair in pairs:
        for tmpl in (pair.positive, *pair.negatives):
            tmpl_stacks.append(tmpl.stack)
            masks.append(tmpl.mask)
    tmpl_feats = model.forward(_stacks_to_layer_tensors(tmpl_stacks, spec, model.np_dtype))
    c, s = model.config.channels, model.config.resolution
    tmpl_feats = tmpl_feats.reshape(batch, m, c, s, s)
    query_rep = query_feats[:, None].expand(batch, m, c, s, s)
    mask_t = torch.from_numpy(np.stack(masks).reshape(batch * m, s, s))
    scores = _masked_similarity_torch(
        query_rep.reshape(batch * m, c, s, s),
        tmpl_feats.reshape(batch * m, c, s, s),
        mask_t, config.delta).reshape(batch, m)
    losses = _infonce_torch(scores[:, 0], scores[:, 1:], config.tau)
    return losses.mean()


def train(dataset, gallery: TemplateGallery, config: TrainConfig,
          resume_from: Checkpoint | None = None) -> Checkpoint:
    """Run the contrastive loop; deterministic per (dataset, gallery, config).

    Gallery features are refreshed from the current parameters at each
    epoch boundary; pair features are recomputed live inside each batch
    so gradients reach both the query and the template branches. A
    non-finite loss aborts with the last completed batch's state
    attached to the error.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if not gallery.has_stacks():
        raise ValueError("training needs a gallery built with source stacks")
    meta = [(t.class_label, t.pose, t.mask, t.stack, t.source)
            for t in sorted(gallery.templates, key=lambda t: t.id)]
    if resume_from is not None:
        # everything but the epoch horizon must match for the continued
        # run to reproduce the uninterrupted one
        theirs = _train_config_payload(resume_from.config)
        ours = _train_config_payload(config)
        theirs.pop("epochs"), ours.pop("epochs")
        if theirs != ours:
            raise ValueError("resume config does not match the checkpoint's config")
        model = resume_from.model
        start_epoch = resume_from.epoch
        if start_epoch > config.epochs:
            raise ValueError(
                f"checkpoint already at epoch {start_epoch}, config wants {config.epochs}")
        history = list(resume_from.loss_history)
    else:
        model = AggregatorModel(config.model)
        start_epoch = 0
        history = []
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    if resume_from is not None:
        moments = resume_from.optimizer_state.get("state") or {}
        if moments:
            # graft saved moments onto a freshly constructed optimizer so
            # the hyperparameter groups always match this torch version
            base = optimizer.state_dict()
            optimizer.load_state_dict(
                {"state": moments, "param_groups": base["param_groups"]})

    for epoch in range(start_epoch, config.epochs):
        epoch_gallery = build_gallery(meta, model)
        order = np.random.default_rng(
            [_TRAIN_TAG, config.seed, 1, epoch]).permutation(len(dataset))
        n_batches = (len(dataset) + config.batch_size - 1) // config.batch_size
        for batch_idx in range(n_batches):
            chunk = order[batch_idx * config.batch_size:
                          (batch_idx + 1) * config.batch_size]
            pairs = [
                build_pairs(dataset[i], epoch_gallery, config.m,
                            _derived_seed(config.seed, 2, epoch, int(i)))
                for i in chunk
            ]
            loss = _batch_loss(model, pairs, config)
            value = float(loss.detach())
            if not math.isfinite(value):
                last_good = Checkpoint(model, _clone_optimizer_state(optimizer),
                                       config, epoch, tuple(history))
                raise LossDivergedError(
                    f"non-finite loss {value} at epoch {epoch} batch {batch_idx}",
                    checkpoint=last_good)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append((epoch, batch_idx, value))
    return Checkpoint(model, _clone_optimizer_state(optimizer), config,
                      config.epochs, tuple(history))


def _clone_optimizer_state(optimizer) -> dict:
    # only the per-parameter moments are kept; hyperparameter groups are
    # reconstructed from the config when the state is reloaded
    cloned = {}
    for idx, entry in optimizer.state_dict()["state"].items():
        cloned[idx] = {
            k: (v.detach().clone() if isinstance(v, torch.Tensor) else v)
            for k, v in entry.items()
        }
    return {"state": cloned}


def _train_config_payload(config: TrainConfig) -> dict:
    return {
        "model": _config_payload(config.model),
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "tau": config.tau,
        "M": config.m,
        "delta": config.delta,
        "seed": config.seed,
        "batch_size": config.batch_size,
    }


def _train_config_from_payload(payload: dict) -> TrainConfig:
    try:
        return TrainConfig(
            model=config_from_payload(payload["model"]),
            epochs=int(payload["epochs"]),
            learning_rate=float(payload["learning_rate"]),
            tau=float(payload["tau"]),
            m=int(payload["M"]),
            delta=float(payload["delta"]),
            seed=int(payload["seed"]),
            batch_size=int(payload["batch_size"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed training config: {exc}") from exc


def checkpoint_save(checkpoint: Checkpoint, dirpath: str) -> None:
    """Directory layout: model.json + parameter container at the root,
    optimizer moments under optim/, state.json, loss_history.csv."""
    save_model(checkpoint.model, dirpath)
    names = [name for name, _ in checkpoint.model.named_parameters()]
    arrays = []
    for idx, entry in checkpoint.optimizer_state.get("state", {}).items():
        name = names[int(idx)]
        for key in ("step", "exp_avg", "exp_avg_sq"):
            value = entry[key]
            arr = value.detach().numpy() if isinstance(value, torch.Tensor) \
                else np.asarray(value)
            arrays.append((f"{name}.{key}", arr.astype(np.float32)))
    save_arrays(os.path.join(dirpath, "optim"), {"version": CHECKPOINT_VERSION}, arrays)
    write_json(os.path.join(dirpath, "state.json"), {
        "version": CHECKPOINT_VERSION,
        "epoch": checkpoint.epoch,
        "train_config": _train_config_payload(checkpoint.config),
    })
    with open(os.path.join(dirpath, "loss_history.csv"), "w", encoding="utf-8") as fh:
        for epoch, batch, value in checkpoint.loss_history:
            fh.write(f"{epoch},{batch},{value!r}\n")


def checkpoint_load(dirpath: str) -> Checkpoint:
    state_payload = read_json(os.path.join(dirpath, "state.json"))
    if state_payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {dirpath} has version {state_payload.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}")
    config = _train_config_from_payload(state_payload.get("train_config", {}))
    model = load_model(dirpath)
    if model.config != config.model:
        raise ManifestError(
            f"checkpoint {dirpath}: model.json disagrees with the training "
            f"config's model section")
    epoch = state_payload.get("epoch")
    if not isinstance(epoch, int) or epoch < 0:
        raise ManifestError(f"checkpoint {dirpath} has invalid epoch {epoch!r}")

    names = [name for name, _ in model.named_parameters()]
    _, blobs = load_array_map(os.path.join(dirpath, "optim"))
    opt_state: dict = {"state": {}}
    if blobs:
        for idx, name in enumerate(names):
            entry = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                blob_name = f"{name}.{key}"
                if blob_name not in blobs:
                    raise ManifestError(
                        f"checkpoint {dirpath}: optimizer blob '{blob_name}' missing")
                entry[key] = torch.from_numpy(blobs[blob_name].copy())
            opt_state["state"][idx] = entry

    history = []
    history_path = os.path.join(dirpath, "loss_history.csv")
    if os.path.isfile(history_path):
        with open(history_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                epoch_s, batch_s, value_s = line.split(",")
                history.append((int(epoch_s), int(batch_s), float(value_s)))
    return Checkpoint(model, opt_state, config, epoch, tuple(history))
