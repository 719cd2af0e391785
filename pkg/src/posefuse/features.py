"""Feature providers, forward-noising, and the feature fixture format.

A provider maps an input (image, synthetic descriptor, or saved fixture)
to an ordered stack of per-layer feature maps. The diffusion-backbone
adapter is one provider behind the same contract; desk-scale work uses
the synthetic generator or saved fixtures instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blobio import load_arrays, save_arrays
from .errors import BackboneUnavailableError, ManifestError, ShapeMismatchError
from .geometry import Rotation3, random_rotation

FIXTURE_VERSION = 1

# Synthetic-world signal design, indexed by layer (clamped at the last
# entry for deeper stacks). Each layer's channels split into a loud
# class-generic block driven by a basis shared across classes and a quiet
# class-specific block; early layers are mostly generic, deep layers carry
# the class identity. Query noise adds a distractor term at a random pose
# confined to the generic block, so a model that mixes channels
# indiscriminately retrieves the distractor's pose while one that learns
# to suppress the generic block stays clean, for unseen classes too.
_SYNTH_LAYER_AMPLITUDE = (2.0, 1.5, 1.0)   # generic-block gain over the class block
_SYNTH_GENERIC_FRACTION = (0.8, 0.7, 0.5)  # share of channels in the generic block
# Per-layer (distractor_gain, white_gain); both scale with noise_level.
_SYNTH_NOISE_PROFILE = ((40.0, 2.0), (40.0, 1.0), (40.0, 0.5))
_SYNTH_TAG = 0x705E  # namespace for the generator's seed sequences


def _synth_profile(values, layer_index: int):
    return values[min(layer_index, len(values) - 1)]


def _synth_generic_channels(channels: int, layer_index: int) -> int:
    if channels < 2:
        return 0  # single-channel layers stay class-specific
    fraction = _synth_profile(_SYNTH_GENERIC_FRACTION, layer_index)
    return min(channels - 1, max(1, int(round(fraction * channels))))


@dataclass(frozen=True)
class ImagePatch:
    """Square RGB image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] != px.shape[1]:
            raise ShapeMismatchError(f"image must be HxWx3 with H == W, got {px.shape}")
        if px.size and (float(px.min()) < 0.0 or float(px.max()) > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


@dataclass
class FeatureStack:
    """Ordered per-layer feature maps plus the timestep they were taken at."""

    layers: list[tuple[str, np.ndarray]]
    timestep: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("feature stack needs at least one layer")
        for name, arr in self.layers:
            if np.asarray(arr).ndim != 3:
                raise ShapeMismatchError(f"layer '{name}' must be CxHxW, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"layer '{name}' contains non-finite values")

    @property
    def layer_spec(self) -> tuple[tuple[int, int, int], ...]:
        return tuple(tuple(arr.shape) for _, arr in self.layers)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.layers)

    def maps(self) -> list[np.ndarray]:
        return [arr for _, arr in self.layers]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention coefficients, index 0 (clean) through T."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 2:
            raise ValueError("schedule needs alpha_bar[0..T]")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be non-increasing")
        if ab[0] <= 0.99 or float(ab.min()) <= 0.0 or float(ab.max()) > 1.0:
            raise ValueError("alpha_bar values must lie in (0, 1] with alpha_bar[0] > 0.99")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def total_steps(self) -> int:
        return len(self.alpha_bar) - 1


def default_schedule(total_steps: int = 1000, beta_start: float = 0.00085,
                     beta_end: float = 0.012) -> NoiseSchedule:
    """Linear-beta schedule; index 0 holds alpha_bar = 1 (no noise)."""
    betas = np.linspace(beta_start, beta_end, total_steps)
    alpha_bar = np.empty(total_steps + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - betas)
    return NoiseSchedule(alpha_bar)


def ddim_noise(x0: np.ndarray, t: int, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """Closed-form forward noising: sqrt(a)*x0 + sqrt(1-a)*eps at step t.

    t = 0 bypasses noising entirely and returns the input values untouched.
    """
    x0 = np.asarray(x0)
    if not 0 <= t <= schedule.total_steps:
        raise ValueError(f"timestep {t} outside schedule [0, {schedule.total_steps}]")
    if t == 0:
        return x0.copy()
    a = float(schedule.alpha_bar[t])
    eps = np.random.default_rng(seed).standard_normal(x0.shape)
    out = np.sqrt(a) * x0.astype(np.float64) + np.sqrt(1.0 - a) * eps
    return out.astype(x0.dtype, copy=False)


# --- synthetic generator --------------------------------------------------

def _synth_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([_SYNTH_TAG, *key])


def _synth_generic_signal(pose_coeffs: np.ndarray, layer_index: int, shape) -> np.ndarray:
    # class-shared basis on the generic channel block, zero elsewhere
    c, h, w = shape
    n_generic = _synth_generic_channels(c, layer_index)
    out = np.zeros((c, h, w))
    if n_generic:
        basis = _synth_rng(4, layer_index).standard_normal((9, n_generic, h, w))
        amplitude = _synth_profile(_SYNTH_LAYER_AMPLITUDE, layer_index)
        out[:n_generic] = (amplitude / np.sqrt(3.0)
                           * np.tensordot(pose_coeffs, basis, axes=(0, 0)))
    return out


def _synth_class_signal(class_id: int, pose_coeffs: np.ndarray, layer_index: int,
                        shape) -> np.ndarray:
    # per-class basis on the remaining channels, zero on the generic block
    c, h, w = shape
    n_generic = _synth_generic_channels(c, layer_index)
    out = np.zeros((c, h, w))
    if n_generic < c:
        basis = _synth_rng(1, class_id, layer_index).standard_normal(
            (9, c - n_generic, h, w))
        out[n_generic:] = np.tensordot(pose_coeffs, basis, axes=(0, 0)) / np.sqrt(3.0)
    return out


def synthetic_extract(class_id: int, pose: Rotation3, layer_spec,
                      noise_level: float = 0.0, seed: int = 0) -> FeatureStack:
    """Deterministic stand-in for a heavy feature backbone.

    Each layer is a fixed random basis modulated by the nine rotation
    matrix entries, so maps vary smoothly with pose and distinctly with
    class. `noise_level` scales two corruptions drawn from `seed`: a
    distractor copy of the class-generic signal at a random pose
    (coherent across layers, like a second object in view) and white
    noise. Clean extraction (noise 0) ignores the seed entirely.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    layer_spec = tuple(tuple(int(v) for v in s) for s in layer_spec)
    if not layer_spec:
        raise ValueError("layer_spec must be non-empty")
    coeffs = pose.m.reshape(9)
    if noise_level > 0:
        sample_rng = _synth_rng(5, seed)
        distractor_strength = float(sample_rng.standard_normal())
        distractor_pose = random_rotation(int(sample_rng.integers(2 ** 62)))
        distractor_coeffs = distractor_pose.m.reshape(9)
    layers = []
    for i, shape in enumerate(layer_spec):
        m = (_synth_generic_signal(coeffs, i, shape)
             + _synth_class_signal(class_id, coeffs, i, shape))
        if noise_level > 0:
            distractor_gain, white_gain = _synth_profile(_SYNTH_NOISE_PROFILE, i)
            white_rng = _synth_rng(3, seed, i)
            m = (m
                 + noise_level * distractor_gain * distractor_strength
                 * _synth_generic_signal(distractor_coeffs, i, shape)
                 + noise_level * white_gain * white_rng.standard_normal(shape))
        layers.append((f"layer_{i}", m.astype(np.float32)))
    return FeatureStack(layers, timestep=0)


# --- providers ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDescriptor:
    """What the synthetic provider consumes instead of pixels."""

    class_id: int
    pose: Rotation3


class SyntheticFeatureProvider:
    """Provider wrapping the synthetic generator.

    Read-only after construction; extract() may be called concurrently.
    With `noise_at_timestep` set, a timestep > 0 additionally runs the
    forward-noising map over every layer; otherwise the timestep is only
    recorded in the output stack.
    """

    def __init__(self, layer_spec, noise_level: float = 0.0,
                 schedule: NoiseSchedule | None = None,
                 noise_at_timestep: bool = True):
        self.layer_spec = tuple(tuple(int(v) for v in s) for s in layer_spec)
        self.layer_names = tuple(f"layer_{i}" for i in range(len(self.layer_spec)))
        self.noise_level = float(noise_level)
        self.schedule = schedule if schedule is not None else default_schedule()
        self.noise_at_timestep = noise_at_timestep

    def extract(self, source: SyntheticDescriptor, timestep: int = 0,
                seed: int = 0) -> FeatureStack:
        stack = synthetic_extract(source.class_id, source.pose, self.layer_spec,
                                  self.noise_level, seed)
        if timestep == 0:
            return stack
        if not 0 <= timestep <= self.schedule.total_steps:
            raise ValueError(f"timestep {timestep} outside provider schedule")
        if not self.noise_at_timestep:
            return FeatureStack(stack.layers, timestep=timestep)
        noised = [
            (name, ddim_noise(arr, timestep, self.schedule, seed + 1 + i))
            for i, (name, arr) in enumerate(stack.layers)
        ]
        return FeatureStack(noised, timestep=timestep)


class FixtureFeatureProvider:
    """Provider that replays stacks saved with fixture_save()."""

    def __init__(self, layer_spec=None):
        self.layer_spec = (tuple(tuple(int(v) for v in s) for s in layer_spec)
                           if layer_spec is not None else None)

    def extract(self, source: str, timestep: int = 0, seed: int = 0) -> FeatureStack:
        stack = fixture_load(source)
        if self.layer_spec is not None and stack.layer_spec != self.layer_spec:
            raise ShapeMismatchError(
                f"fixture {source} has layer spec {stack.layer_spec}, "
                f"expected {self.layer_spec}")
        return stack


class DiffusionBackboneProvider:
    """Adapter for a text-to-image diffusion backbone.

    The backbone itself is injected as a callable
    `backbone(pixels, timestep, prompt) -> [(layer_name, map), ...]` which
    is invoked exactly once per extraction with an empty (unconditioned)
    prompt. Layer enumeration is whatever the injected backbone declares
    via `layer_names`/`layer_spec`. When `noise_at_timestep` is set, the
    input image is forward-noised before the call for timesteps > 0.
    """

    def __init__(self, layer_names, layer_spec, backbone=None,
                 schedule: NoiseSchedule | None = None,
                 noise_at_timestep: bool = True):
        self.layer_names = tuple(layer_names)
        self.layer_spec = tuple(tuple(int(v) for v in s) for s in layer_spec)
        if len(self.layer_names) != len(self.layer_spec):
            raise ValueError("layer_names and layer_spec must align")
        self._backbone = backbone
        self.schedule = schedule if schedule is not None else default_schedule()
        self.noise_at_timestep = noise_at_timestep

    def extract(self, source: ImagePatch, timestep: int = 0, seed: int = 0) -> FeatureStack:
        if self._backbone is None:
            raise BackboneUnavailableError(
                "no diffusion backbone configured; install one and pass its "
                "runner callable, or use the synthetic/fixture providers")
        if not 0 <= timestep <= self.schedule.total_steps:
            raise ValueError(f"timestep {timestep} outside provider schedule")
        pixels = source.pixels
        if timestep > 0 and self.noise_at_timestep:
            pixels = ddim_noise(pixels, timestep, self.schedule, seed)
        raw = list(self._backbone(pixels, timestep, ""))
        if len(raw) != len(self.layer_names):
            raise ShapeMismatchError(
                f"backbone returned {len(raw)} layers, declared {len(self.layer_names)}")
        layers = []
        for (name, spec), (got_name, arr) in zip(
                zip(self.layer_names, self.layer_spec), raw):
            arr = np.asarray(arr, dtype=np.float32)
            if tuple(arr.shape) != spec:
                raise ShapeMismatchError(
                    f"backbone layer '{got_name}' returned shape {arr.shape}, "
                    f"declared {spec}")
            layers.append((name, arr))
        return FeatureStack(layers, timestep=timestep)


# --- fixtures ---------------------------------------------------------------

def fixture_save(stack: FeatureStack, dirpath: str) -> dict:
    """Persist a stack as manifest.json + one raw f32le blob per layer."""
    arrays = []
    for name, arr in stack.layers:
        if arr.dtype != np.float32:
            raise ShapeMismatchError(
                f"fixture layers must be float32, layer '{name}' is {arr.dtype}")
        arrays.append((name, arr))
    return save_arrays(dirpath, {"version": FIXTURE_VERSION, "timestep": stack.timestep},
                       arrays)


def fixture_load(dirpath: str) -> FeatureStack:
    manifest, arrays = load_arrays(dirpath)
    if manifest.get("version") != FIXTURE_VERSION:
        raise ManifestError(
            f"fixture {dirpath} has version {manifest.get('version')!r}, "
            f"expected {FIXTURE_VERSION}")
    timestep = manifest.get("timestep")
    if not isinstance(timestep, int) or timestep < 0:
        raise ManifestError(f"fixture {dirpath} has invalid timestep {timestep!r}")
    return FeatureStack(list(arrays), timestep=timestep)
