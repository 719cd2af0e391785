"""Template-based object pose estimation on fused multi-layer features.

Feature stacks from a (real or synthetic) diffusion backbone are fused
into one descriptor map by a small seeded network, scored against a
template gallery with masked cosine similarity, and the best template's
class and pose are returned. Everything downstream of a seed is
deterministic, including training.
"""

from .aggregation import (AggregatedFeature, AggregatorModel, ModelConfig, backward,
                          context_weights, count_params, forward_cwa, forward_na,
                          forward_va, load_model, model_fingerprint, save_model,
                          upsample)
from .errors import (BackboneUnavailableError, CheckpointVersionError,
                     InsufficientNegativesError, LossDivergedError, ManifestError,
                     MissingBlobError, PosefuseError, ShapeMismatchError,
                     StaleGalleryError)
from .evaluation import (DepthImage, EvalReport, EvalRow, SampleResult, evaluate_acc,
                         pca_visualize, principal_components, vsd_error, vsd_recall,
                         write_report_csv, write_report_text)
from .features import (DiffusionBackboneProvider, FeatureStack, FixtureFeatureProvider,
                       ImagePatch, NoiseSchedule, SyntheticDescriptor,
                       SyntheticFeatureProvider, ddim_noise, default_schedule,
                       fixture_load, fixture_save, synthetic_extract)
from .geometry import (ClassLabel, Pose, Rotation3, acc_at_threshold, compose,
                       estimate_translation, from_axis_angle, geodesic_distance,
                       inverse, random_rotation, sample_viewsphere,
                       viewsphere_candidate_counts, viewsphere_level)
from .matching import (MatchResult, Template, TemplateGallery, build_gallery,
                       downsample_mask, load_gallery, masked_similarity, retrieve,
                       save_gallery)
from .training import (Checkpoint, PairBatch, TrainConfig, TrainSample, build_pairs,
                       checkpoint_load, checkpoint_save, infonce_grad, infonce_loss,
                       train)

__version__ = "0.1.0"

__all__ = [
    "AggregatedFeature", "AggregatorModel", "BackboneUnavailableError", "Checkpoint",
    "CheckpointVersionError", "ClassLabel", "DepthImage", "DiffusionBackboneProvider",
    "EvalReport", "EvalRow", "FeatureStack", "FixtureFeatureProvider", "ImagePatch",
    "InsufficientNegativesError", "LossDivergedError", "ManifestError", "MatchResult",
    "MissingBlobError", "ModelConfig", "NoiseSchedule", "PairBatch", "Pose",
    "PosefuseError", "Rotation3", "SampleResult", "ShapeMismatchError",
    "StaleGalleryError", "SyntheticDescriptor", "SyntheticFeatureProvider", "Template",
    "TemplateGallery", "TrainConfig", "TrainSample", "acc_at_threshold", "backward",
    "build_gallery", "build_pairs", "checkpoint_load", "checkpoint_save", "compose",
    "context_weights", "count_params", "ddim_noise", "default_schedule",
    "downsample_mask", "estimate_translation", "evaluate_acc", "fixture_load",
    "fixture_save", "forward_cwa", "forward_na", "forward_va", "from_axis_angle",
    "geodesic_distance", "infonce_grad", "infonce_loss", "inverse", "load_gallery",
    "load_model", "masked_similarity", "model_fingerprint", "pca_visualize",
    "principal_components", "random_rotation", "retrieve", "sample_viewsphere",
    "save_gallery", "save_model", "synthetic_extract", "train", "upsample",
    "viewsphere_candidate_counts", "viewsphere_level", "vsd_error", "vsd_recall",
    "write_report_csv", "write_report_text",
]
