"""Trainable networks that fuse a multi-layer FeatureStack into one map.

Three variants share the same contract (stack in, C x S x S map out,
exact gradients): a vanilla sum of per-layer 3x3 convolutions, a
nonlinear sum of bottleneck blocks, and a context-weighted sum whose
per-layer weights come from pooled activations through a small MLP.

Parameters live in a torch module; the public API speaks numpy. Models
are immutable during forward/backward, so concurrent forwards on a
shared model are safe; updates need exclusive access.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blobio import load_array_map, read_json, save_arrays, write_json
from .errors import CheckpointVersionError, ManifestError, ShapeMismatchError
from .features import FeatureStack

MODEL_VERSION = 1
ARCHS = ("va", "na", "cwa")
_INIT_TAG = 0xA99  # namespace for parameter-init seed sequences
_TORCH_DTYPES = {np.float32: torch.float32, np.float64: torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; c_mid/hidden of 0 select the defaults
    (channels // 2 and n * channels // 2)."""

    arch: str
    layer_spec: tuple[tuple[int, int, int], ...]
    channels: int = 128
    resolution: int = 32
    c_mid: int = 0
    hidden: int = 0
    seed: int = 0

    def __post_init__(self):
        arch = str(self.arch).lower()
        if arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        spec = tuple(tuple(int(v) for v in s) for s in self.layer_spec)
        if not spec:
            raise ValueError("layer_spec must be non-empty")
        for s in spec:
            if len(s) != 3 or min(s) < 1:
                raise ValueError(f"layer spec entries must be (C, H, W) >= 1, got {s}")
        if self.channels < 1 or self.resolution < 1:
            raise ValueError("channels and resolution must be >= 1")
        c_mid = int(self.c_mid) if self.c_mid else max(1, self.channels // 2)
        hidden = int(self.hidden) if self.hidden else max(1, len(spec) * self.channels // 2)
        if c_mid < 1 or hidden < 1:
            raise ValueError("c_mid and hidden must be >= 1")
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "layer_spec", spec)
        object.__setattr__(self, "c_mid", c_mid)
        object.__setattr__(self, "hidden", hidden)

    @property
    def n(self) -> int:
        return len(self.layer_spec)


@dataclass(frozen=True)
class AggregatedFeature:
    """Fused descriptor map, C x S x S."""

    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map)
        if m.ndim != 3:
            raise ShapeMismatchError(f"aggregated feature must be CxSxS, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("aggregated feature contains non-finite values")
        object.__setattr__(self, "map", m)


def upsample(feature_map: np.ndarray, target: int) -> np.ndarray:
    """Bilinear, corner-aligned resize of a C x H x W map to C x target x target.

    Same-size inputs come back as an untouched copy.
    """
    arr = np.asarray(feature_map)
    if arr.ndim != 3 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ShapeMismatchError(f"expected CxHxW with H, W >= 1, got {arr.shape}")
    if target < 1:
        raise ValueError("target resolution must be >= 1")
    if arr.shape[1] == target and arr.shape[2] == target:
        return arr.copy()
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    with torch.no_grad():
        t = torch.from_numpy(np.ascontiguousarray(arr))[None]
        out = F.interpolate(t, size=(target, target), mode="bilinear",
                            align_corners=True)[0]
    return out.numpy()


def _up(x: torch.Tensor, target: int) -> torch.Tensor:
    if x.shape[-2] == target and x.shape[-1] == target:
        return x
    return F.interpolate(x, size=(target, target), mode="bilinear",
                         align_corners=True)


class _Bottleneck(nn.Module):
    """skip(x) + conv3(relu(conv2(relu(conv1(x))))); conv3 starts at zero
    so a fresh block computes exactly its skip projection."""

    def __init__(self, c_in: int, c_mid: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_mid, 1)
        self.conv2 = nn.Conv2d(c_mid, c_mid, 3, padding=1)
        self.conv3 = nn.Conv2d(c_mid, c_out, 1)
        self.skip = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        # x: (B, c_in, S, S)
        return self.skip(x) + self.conv3(F.relu(self.conv2(F.relu(self.conv1(x)))))


class _ContextMLP(nn.Module):
    """Two affine maps with a ReLU between; fc2 starts at zero so fresh
    weights are uniform after the softmax."""

    def __init__(self, n: int, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(n * channels, hidden)
        self.fc2 = nn.Linear(hidden, n)

    def forward(self, ctx):
        # ctx: (B, n*C) -> logits (B, n)
        return self.fc2(F.relu(self.fc1(ctx)))


def _zero_init_target(name: str) -> bool:
    head = name.rsplit(".", 1)[0]
    return head.endswith("conv3") or head.endswith("fc2")


class AggregatorModel(nn.Module):
    """One of the three fusion networks, parameterized by ModelConfig.

    forward() is the torch path and takes per-layer batched tensors;
    aggregate() is the numpy path for a single FeatureStack.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        super().__init__()
        if dtype not in _TORCH_DTYPES:
            raise ValueError("model dtype must be float32 or float64")
        self.config = config
        self.np_dtype = np.dtype(dtype)
        c, c_mid = config.channels, config.c_mid
        if config.arch == "va":
            self.extractors = nn.ModuleList(
                nn.Conv2d(ci, c, 3, padding=1) for ci, _, _ in config.layer_spec)
        else:
            self.extractors = nn.ModuleList(
                _Bottleneck(ci, c_mid, c) for ci, _, _ in config.layer_spec)
        if config.arch == "cwa":
            self.mlp = _ContextMLP(config.n, c, config.hidden)
        self.to(_TORCH_DTYPES[dtype])
        self._seeded_init()

    def _seeded_init(self):
        # fan-in-scaled uniform for every conv/linear, in registration
        # order, except the designated zero-start layers
        rng = np.random.default_rng([_INIT_TAG, self.config.seed])
        with torch.no_grad():
            for name, mod in self.named_modules():
                if not isinstance(mod, (nn.Conv2d, nn.Linear)):
                    continue
                if _zero_init_target(f"{name}.weight"):
                    mod.weight.zero_()
                    mod.bias.zero_()
                    continue
                fan_in = mod.weight[0].numel()
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=tuple(mod.weight.shape))
                b = rng.uniform(-bound, bound, size=tuple(mod.bias.shape))
                mod.weight.copy_(torch.from_numpy(w))
                mod.bias.copy_(torch.from_numpy(b))

    def _check_layers(self, layers):
        spec = self.config.layer_spec
        if len(layers) != len(spec):
            raise ShapeMismatchError(
                f"model expects {len(spec)} layers, got {len(layers)}")
        batch = layers[0].shape[0]
        for x, want in zip(layers, spec):
            if x.ndim != 4 or tuple(x.shape[1:]) != want or x.shape[0] != batch:
                raise ShapeMismatchError(
                    f"layer batch shaped {tuple(x.shape)}, expected ({batch}, {want[0]}, "
                    f"{want[1]}, {want[2]})")

    def forward(self, layers: list[torch.Tensor]) -> torch.Tensor:
        # layers[i]: (B, C_i, H_i, W_i) -> (B, C, S, S)
        self._check_layers(layers)
        s = self.config.resolution
        ups = [_up(x, s) for x in layers]
        if self.config.arch == "va":
            out = self.extractors[0](ups[0])
            for ext, x in zip(self.extractors[1:], ups[1:]):
                out = out + ext(x)
            return out
        h = [ext(x) for ext, x in zip(self.extractors, ups)]  # n x (B, C, S, S)
        if self.config.arch == "na":
            out = h[0]
            for hi in h[1:]:
                out = out + hi
            return out
        pooled = torch.cat([hi.mean(dim=(2, 3)) for hi in h], dim=1)  # (B, n*C)
        weights = torch.softmax(self.mlp(pooled), dim=1)  # (B, n)
        stacked = torch.stack(h, dim=1)  # (B, n, C, S, S)
        return (weights[:, :, None, None, None] * stacked).sum(dim=1)

    def _stack_to_tensors(self, stack: FeatureStack, requires_grad=False):
        if stack.layer_spec != self.config.layer_spec:
            raise ShapeMismatchError(
                f"stack layer spec {stack.layer_spec} does not match model "
                f"{self.config.layer_spec}")
        out = []
        for _, arr in stack.layers:
            t = torch.from_numpy(np.ascontiguousarray(arr, dtype=self.np_dtype))[None]
            t.requires_grad_(requires_grad)
            out.append(t)
        return out

    def aggregate(self, stack: FeatureStack) -> AggregatedFeature:
        with torch.no_grad():
            out = self.forward(self._stack_to_tensors(stack))[0]
        return AggregatedFeature(out.numpy())


def forward_va(model: AggregatorModel, stack: FeatureStack) -> AggregatedFeature:
    if model.config.arch != "va":
        raise ValueError(f"model arch is {model.config.arch!r}, not 'va'")
    return model.aggregate(stack)


def forward_na(model: AggregatorModel, stack: FeatureStack) -> AggregatedFeature:
    if model.config.arch != "na":
        raise ValueError(f"model arch is {model.config.arch!r}, not 'na'")
    return model.aggregate(stack)


def forward_cwa(model: AggregatorModel, stack: FeatureStack) -> AggregatedFeature:
    if model.config.arch != "cwa":
        raise ValueError(f"model arch is {model.config.arch!r}, not 'cwa'")
    return model.aggregate(stack)


def context_weights(model: AggregatorModel, pooled) -> np.ndarray:
    """Softmax layer weights from n pooled C-vectors (cwa models only)."""
    if model.config.arch != "cwa":
        raise ValueError("context weights are only defined for the cwa arch")
    vecs = [np.asarray(v, dtype=model.np_dtype) for v in pooled]
    if len(vecs) != model.config.n:
        raise ShapeMismatchError(
            f"expected {model.config.n} pooled vectors, got {len(vecs)}")
    for v in vecs:
        if v.shape != (model.config.channels,):
            raise ShapeMismatchError(
                f"pooled vectors must have shape ({model.config.channels},), got {v.shape}")
    ctx = torch.from_numpy(np.concatenate(vecs))[None]
    with torch.no_grad():
        w = torch.softmax(model.mlp(ctx), dim=1)[0]
    return w.numpy()


def backward(model: AggregatorModel, stack: FeatureStack, upstream_gradient: np.ndarray
             ) -> tuple[dict[str, np.ndarray], list[np.ndarray]]:
    """Exact gradients of sum(forward * upstream) for every parameter and input."""
    up = np.asarray(upstream_gradient)
    c, s = model.config.channels, model.config.resolution
    if up.shape != (c, s, s):
        raise ShapeMismatchError(
            f"upstream gradient must be ({c}, {s}, {s}), got {up.shape}")
    inputs = model._stack_to_tensors(stack, requires_grad=True)
    out = model.forward(inputs)[0]
    loss = (out * torch.from_numpy(np.ascontiguousarray(up, dtype=model.np_dtype))).sum()
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, list(params) + inputs)
    param_grads = {name: g.numpy().copy() for name, g in zip(names, grads)}
    input_grads = [g[0].numpy().copy() for g in grads[len(params):]]
    return param_grads, input_grads


def count_params(model: AggregatorModel) -> int:
    return sum(p.numel() for p in model.parameters())


def _config_payload(config: ModelConfig) -> dict:
    return {
        "arch": config.arch,
        "n": config.n,
        "C": config.channels,
        "S": config.resolution,
        "C_mid": config.c_mid,
        "hidden": config.hidden,
        "layer_spec": [list(s) for s in config.layer_spec],
        "seed": config.seed,
        "version": MODEL_VERSION,
    }


def config_from_payload(payload: dict) -> ModelConfig:
    version = payload.get("version")
    if version != MODEL_VERSION:
        raise CheckpointVersionError(
            f"model config version {version!r} not supported (expected {MODEL_VERSION})")
    try:
        config = ModelConfig(
            arch=payload["arch"],
            layer_spec=tuple(tuple(s) for s in payload["layer_spec"]),
            channels=int(payload["C"]),
            resolution=int(payload["S"]),
            c_mid=int(payload["C_mid"]),
            hidden=int(payload["hidden"]),
            seed=int(payload["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed model config: {exc}") from exc
    if config.n != payload.get("n"):
        raise ManifestError(
            f"model config declares n={payload.get('n')} but lists "
            f"{config.n} layer specs")
    return config


def model_fingerprint(model: AggregatorModel) -> str:
    """Hash of the configuration and current parameter values (as float32)."""
    digest = hashlib.sha256()
    digest.update(json.dumps(_config_payload(model.config), sort_keys=True).encode())
    for name, p in model.named_parameters():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(
            p.detach().numpy().astype(np.float32)).tobytes())
    return digest.hexdigest()


def save_model(model: AggregatorModel, dirpath: str) -> None:
    """Write model.json plus a float32 parameter container."""
    arrays = [(name, p.detach().numpy().astype(np.float32))
              for name, p in model.named_parameters()]
    save_arrays(dirpath, {"version": MODEL_VERSION}, arrays)
    write_json(os.path.join(dirpath, "model.json"), _config_payload(model.config))


def load_model(dirpath: str, dtype=np.float32) -> AggregatorModel:
    config = config_from_payload(read_json(os.path.join(dirpath, "model.json")))
    model = AggregatorModel(config, dtype=dtype)
    _, blobs = load_array_map(dirpath)
    expected = dict(model.named_parameters())
    if set(blobs) != set(expected):
        missing = sorted(set(expected) - set(blobs))
        extra = sorted(set(blobs) - set(expected))
        raise ManifestError(
            f"parameter container mismatch in {dirpath}: missing {missing}, "
            f"unexpected {extra}")
    with torch.no_grad():
        for name, param in expected.items():
            arr = blobs[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise ShapeMismatchError(
                    f"parameter '{name}' shaped {arr.shape}, expected "
                    f"{tuple(param.shape)}")
            param.copy_(torch.from_numpy(arr))
    return model
