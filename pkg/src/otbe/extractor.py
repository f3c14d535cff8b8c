"""Closed-form invariant feature extraction.

Features are ``W = A^T (X - E X)`` with ``Cov(W) = I``. In whitened
coordinates ``X~ = S_X^-1/2 (X - E X)`` the loadings ``A~`` are orthonormal
and maximize

    L(A~) = (1 - lam)/d_wy ||A~^T C||^2 - lam/d_ws ||A~^T D||^2,

where C measures predictive content for Y and D the covariance between X~
and the standardized barycenter residual of the context. The maximizer is
spanned by the top-d eigenvectors of
``H = (1 - lam)/d_wy C C^T - lam/d_ws D D^T`` (eigenvalues taken with sign).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .barycenter import (
    CategoricalBarycenterMap,
    ContinuousResidualMap,
    fit_categorical_map,
    fit_continuous_map,
)
from .errors import ClassTooSmall, InvalidData, InvalidParameter, OTBEError
from .matstats import (
    ClassMoments,
    MomentSummary,
    _frozen,
    _names,
    frob2,
    pipeline_inv_sqrt,
    sym_eig,
)

log = logging.getLogger(__name__)

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class ExtractorConfig:
    lam: float = 0.0
    dim: int = 1
    task: str = "regression"
    context: tuple[str, ...] = ("S",)
    outcome: str = "Y"
    features: str = "X"
    # "split": regression weights (1-lam)/min(d, d_y), classification (1-lam)/d.
    # "unified": both use (1-lam)/min(d, number of columns of C).
    delta: str = "split"
    ridge: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "context", _names(self.context))
        _check_lambda(self.lam)
        if self.task not in TASKS:
            raise InvalidParameter(f"task must be one of {TASKS}, got {self.task!r}")
        if self.delta not in ("split", "unified"):
            raise InvalidParameter(f"delta must be 'split' or 'unified', got {self.delta!r}")
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 1:
            raise InvalidParameter(f"dim must be a positive integer, got {self.dim!r}")


def _check_lambda(lam):
    if not np.isfinite(lam) or lam < 0.0:
        raise InvalidParameter(f"lambda must be >= 0, got {lam!r}")
    if lam >= 1.0:
        raise InvalidParameter(f"lambda must be < 1, got {lam!r}")


@dataclass(frozen=True)
class FeatureModel:
    """A fitted linear feature map plus everything needed to audit it."""

    x_mean: np.ndarray
    x_inv_sqrt: np.ndarray
    loadings: np.ndarray
    raw_loadings: np.ndarray
    lam: float
    dim: int
    h_eigenvalues: np.ndarray
    task: str
    C: np.ndarray
    D: np.ndarray
    delta_wy: float
    delta_ws: float
    context: tuple[str, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def d_x(self) -> int:
        return self.x_mean.size

    def term_C(self) -> float:
        return frob2(self.loadings.T @ self.C)

    def term_D(self) -> float:
        return frob2(self.loadings.T @ self.D)

    def objective(self) -> float:
        return objective(self.loadings, self.C, self.D, self.lam, self.delta_wy, self.delta_ws)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except OTBEError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = name
            if exc.args:
                exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
        raise


def build_C_regression(m: MomentSummary, outcome="Y", features="X", ridge=None) -> np.ndarray:
    """Whitened cross-covariance ``S_X^-1/2 S_XY S_Y^-1/2``."""
    kx = pipeline_inv_sqrt(m.cov_of(features), ridge, features)
    ky = pipeline_inv_sqrt(m.cov_of(outcome), ridge, outcome)
    return kx @ m.cov_of(features, outcome) @ ky


def build_C_categorical(cm: ClassMoments, features="X", ridge=None) -> np.ndarray:
    """Column j is ``sqrt(p_j) S_X^-1/2 (E[X | Y=j] - E X)``."""
    if cm.k < 2:
        raise InvalidParameter(f"classification needs at least 2 classes, got {cm.k}")
    pooled = cm.pooled()
    kx = pipeline_inv_sqrt(pooled.cov_of(features), ridge, features)
    dev = cm.means[:, cm.index(features)] - pooled.mean_of(features)
    return kx @ (dev.T * np.sqrt(cm.priors))


def _d_regression(m, tmap: ContinuousResidualMap, kx, features):
    cross = m.cov_of(features, tmap.source) - m.cov_of(features, tmap.conditioner) @ tmap.coeff.T
    return kx @ cross @ tmap.resid_inv_sqrt


def _d_categorical(cm: ClassMoments, cmap: CategoricalBarycenterMap, kx, features, context):
    D = np.zeros((cm.index(features).size, cm.index(context).size))
    for j in range(cm.k):
        D += cm.priors[j] * (cm.class_cov(j, features, context) @ cmap.class_inv_sqrt[j])
    return kx @ D


def _check_class_support(cm: ClassMoments, context):
    if cm.counts is None:
        return
    need = cm.index(context).size + 1
    for label, count in zip(cm.classes, cm.counts):
        if count < need:
            raise ClassTooSmall(f"class {label!r} has {count} rows; needs at least {need}")


def build_D(source, context=("S",), task="regression", features="X", outcome="Y", ridge=None):
    """Cross-covariance of whitened X with the standardized barycenter residual."""
    return _prepare(source, ExtractorConfig(task=task, context=context, features=features,
                                            outcome=outcome, ridge=ridge)).D


def objective(A, C, D, lam, delta_wy, delta_ws) -> float:
    A = np.asarray(A, dtype=float)
    return (1.0 - lam) / delta_wy * frob2(A.T @ C) - lam / delta_ws * frob2(A.T @ D)


def h_matrix(C, D, lam, delta_wy, delta_ws) -> np.ndarray:
    C, D = np.atleast_2d(C), np.atleast_2d(D)
    return (1.0 - lam) / delta_wy * (C @ C.T) - lam / delta_ws * (D @ D.T)


def solve_loadings(C, D, lam, d, delta_wy=None, delta_ws=None):
    """Top-d signed eigenvectors of H.

    ``delta_wy`` and ``delta_ws`` default to ``min(d, d_y)`` and
    ``min(d, d_s)``, the regression normalization.

    Returns
    -------
    (loadings, eigenvalues) with eigenvalues the full signed-descending
    spectrum of H.
    """
    _check_lambda(lam)
    C = np.asarray(C, dtype=float).reshape(np.shape(C)[0], -1)
    D = np.asarray(D, dtype=float).reshape(np.shape(D)[0], -1)
    if C.shape[0] != D.shape[0]:
        raise InvalidData(f"C has {C.shape[0]} rows but D has {D.shape[0]}")
    d_x = C.shape[0]
    if not isinstance(d, (int, np.integer)) or not 1 <= d <= d_x:
        raise InvalidParameter(f"dim must satisfy 1 <= dim <= {d_x}, got {d!r}")
    delta_wy = min(d, C.shape[1]) if delta_wy is None else delta_wy
    delta_ws = min(d, max(D.shape[1], 1)) if delta_ws is None else delta_ws
    eig = sym_eig(h_matrix(C, D, lam, delta_wy, delta_ws))
    return eig.vectors[:, :d], eig.values


@dataclass(frozen=True)
class PreparedProblem:
    """The lambda-independent stage of a fit: whitener, barycenter map, C, D."""

    config: ExtractorConfig
    x_mean: np.ndarray
    x_inv_sqrt: np.ndarray
    C: np.ndarray
    D: np.ndarray
    bary_map: object
    d_outcome: int

    def deltas(self, dim):
        d_s = self.D.shape[1]
        if self.config.task == "classification" and self.config.delta == "split":
            return float(dim), float(min(dim, d_s))
        return float(min(dim, self.C.shape[1])), float(min(dim, d_s))


def _prepare(source, config: ExtractorConfig) -> PreparedProblem:
    feats, ctx = config.features, config.context
    if config.task == "regression":
        if not isinstance(source, MomentSummary):
            raise InvalidData("regression fits take a MomentSummary")
        if not source.has(config.outcome):
            raise InvalidData(f"regression requires an outcome block {config.outcome!r}")
        kx = _stage("whitening", pipeline_inv_sqrt, source.cov_of(feats), config.ridge, feats)
        tmap = _stage("barycenter", fit_continuous_map, source, ctx, config.outcome, config.ridge)
        C = _stage("build C", build_C_regression, source, config.outcome, feats, config.ridge)
        D = _d_regression(source, tmap, kx, feats)
        return PreparedProblem(config, _frozen(source.mean_of(feats)), _frozen(kx), _frozen(C),
                               _frozen(D), tmap, source.dim(config.outcome))
    if not isinstance(source, ClassMoments):
        raise InvalidData("classification fits take ClassMoments (labels required)")
    _stage("barycenter", _check_class_support, source, ctx)
    pooled = source.pooled()
    kx = _stage("whitening", pipeline_inv_sqrt, pooled.cov_of(feats), config.ridge, feats)
    cmap = _stage("barycenter", fit_categorical_map, source.select(ctx), config.ridge)
    C = _stage("build C", build_C_categorical, source, feats, config.ridge)
    D = _d_categorical(source, cmap, kx, feats, ctx)
    return PreparedProblem(config, _frozen(pooled.mean_of(feats)), _frozen(kx), _frozen(C),
                           _frozen(D), cmap, source.k)


def prepare(source, config: ExtractorConfig) -> PreparedProblem:
    return _prepare(source, config)


def solve(problem: PreparedProblem, lam: float, dim: int | None = None) -> FeatureModel:
    dim = problem.config.dim if dim is None else dim
    delta_wy, delta_ws = problem.deltas(dim)
    loadings, values = _stage("solve", solve_loadings, problem.C, problem.D, lam, dim,
                              delta_wy, delta_ws)
    notes = ()
    # eigenvalues at round-off level of the spectrum count as zero
    n_pos = int(np.sum(values > 1e-12 * max(float(np.max(np.abs(values))), 1e-300)))
    if dim > n_pos:
        msg = (f"dim={dim} exceeds the {n_pos} positive eigenvalues of H; "
               f"selected nonpositive eigenvalues {values[n_pos:dim].tolist()}")
        log.warning(msg)
        notes = (msg,)
    return FeatureModel(
        x_mean=problem.x_mean,
        x_inv_sqrt=problem.x_inv_sqrt,
        loadings=_frozen(loadings),
        raw_loadings=_frozen(problem.x_inv_sqrt @ loadings),
        lam=float(lam),
        dim=int(dim),
        h_eigenvalues=values,
        task=problem.config.task,
        C=problem.C,
        D=problem.D,
        delta_wy=delta_wy,
        delta_ws=delta_ws,
        context=problem.config.context,
        warnings=notes,
    )


def fit(source, config: ExtractorConfig | None = None, **overrides) -> FeatureModel:
    """Fit the feature map on exact or empirical moments.

    ``source`` is a :class:`MomentSummary` for regression or a
    :class:`ClassMoments` for classification.
    """
    config = replace(config or ExtractorConfig(), **overrides)
    return solve(_prepare(source, config), config.lam, config.dim)


def lambda_path(source, config: ExtractorConfig, lam_grid) -> list[FeatureModel]:
    """One model per lambda, all sharing the same whitener, C and D."""
    lam_grid = [float(v) for v in lam_grid]
    for lam in lam_grid:
        _check_lambda(lam)
    problem = _prepare(source, config)
    return [solve(problem, lam, config.dim) for lam in lam_grid]


def transform(model: FeatureModel, x_rows) -> np.ndarray:
    """``W = A~^T S_X^-1/2 (x - x_mean)`` rowwise."""
    x = np.asarray(x_rows, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.d_x:
        raise InvalidData(f"expected {model.d_x} feature columns, got shape {x.shape}")
    return (x - model.x_mean) @ model.raw_loadings


def feature_moments(model: FeatureModel, m: MomentSummary, features="X", name="W") -> MomentSummary:
    """``m`` augmented with the exact moments of the extracted features."""
    return m.augment(name, model.raw_loadings.T, features, model.x_mean)
