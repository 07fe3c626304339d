"""Few-shot domain adaptation by learning a latent sampler for a frozen generator.

Stage 1 inverts target images into the generator's latent space, stage 2
trains a small diffusion model on those latents with a geometry-preserving
objective, and stage 3 samples new latents and evaluates the decoded images.
"""
from .config import DiffusionConfig, ExperimentConfig, MetricConfig, TargetConfig
from .errors import (ArtifactIncompatibleError, ConfigurationError, DimensionError, FrozenContractError,
                     FrozenError, GeoAdaptError, InsufficientDataError, InsufficientRankError,
                     OptimizationError, TrainingError, ValidationError)
from .generator import GeneratorSpec, ShiftSpec, SyntheticGenerator, generate, make_target_shift, sample_prior
from .inversion import InversionConfig, InversionResult, invert, invert_batch, reconstruction_report
from .losses import FeatureExtractor, LossContext, LossWeights, geometric_loss, tangent_space, total_loss
from .metrics import MetricReport, evaluate, evaluate_features, fid, inception_score
from .sampler import DiffusionSchedule, LatentSampler, NormalizationStats, fit_normalization

__version__ = "0.1.0"
