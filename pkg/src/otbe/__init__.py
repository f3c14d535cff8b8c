"""Invariant linear feature extraction with Gaussian optimal-transport barycenters."""

__version__ = "0.1.0"

from .barycenter import (
    apply_categorical_map,
    apply_map,
    categorical_dispersion,
    fit_categorical_map,
    fit_continuous_map,
    gaussian_barycenter_cov,
    multi_correlation,
)
from .errors import (
    ClassTooSmall,
    ConvergenceFailure,
    InsufficientSamples,
    InvalidConfig,
    InvalidData,
    InvalidParameter,
    OTBEError,
    SingularCovariance,
    UnknownClass,
)
from .extractor import ExtractorConfig, FeatureModel, fit, lambda_path, transform
from .heads import (
    conditional_correlation,
    fit_anchor_baseline,
    fit_centroid_classifier,
    fit_linear_head,
    fit_ols_baseline,
    mse_population,
    predict,
    predict_class,
)
from .matstats import ClassMoments, MomentSummary, empirical_moments, psd_inv_sqrt, psd_sqrt
from .simlab import SemSpec, sample, sem_to_moments
