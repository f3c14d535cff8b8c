"""Gaussian optimal-transport barycenter maps.

Two cases are covered:

* continuous (jointly Gaussian) conditioner: the barycenter map is the
  linear-regression residual plus the mean, ``T(s, y) = s - B (y - E y)``;
* categorical conditioner with Gaussian classes: the barycenter covariance
  solves ``S = sum_y p_y (S^1/2 S_y S^1/2)^1/2`` and each class is mapped
  affinely onto it.

Costs use ``c(x, y) = 0.5 * ||y - x||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConvergenceFailure,
    InvalidData,
    InvalidParameter,
    SingularCovariance,
    UnknownClass,
)
from .matstats import (
    ClassMoments,
    MomentSummary,
    _frozen,
    _names,
    default_ridge,
    frob2,
    pipeline_inv_sqrt,
    psd_inv_sqrt,
    psd_sqrt,
    symmetrize,
)

FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITER = 500
FIXED_POINT_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class ContinuousResidualMap:
    """``T(s, y) = s - coeff @ (y - mean_y)`` and its standardized version."""

    coeff: np.ndarray
    mean_s: np.ndarray
    mean_y: np.ndarray
    resid_cov: np.ndarray
    resid_inv_sqrt: np.ndarray
    source: tuple[str, ...] = ()
    conditioner: tuple[str, ...] = ()
    cost: float = 0.0  # E c(S, T(S, Y)) at the fitting moments


def fit_continuous_map(m: MomentSummary, source="S", conditioner="Y", ridge=None) -> ContinuousResidualMap:
    """Barycenter map of ``source`` given a jointly Gaussian ``conditioner``.

    For Gaussian ``(S, Y)`` the barycenter is the residual of the linear
    regression of S on Y with the intercept restored, so
    ``coeff = S_sy S_y^-1`` and the mapped variable has covariance
    ``S_s - S_sy S_y^-1 S_ys``.
    """
    s_names, y_names = _names(source), _names(conditioner)
    k_y = pipeline_inv_sqrt(m.cov_of(y_names), ridge, "+".join(y_names))
    s_sy = m.cov_of(s_names, y_names)
    coeff = (s_sy @ k_y) @ k_y
    resid = symmetrize(m.cov_of(s_names) - (s_sy @ k_y) @ (s_sy @ k_y).T)
    resid_inv_sqrt = pipeline_inv_sqrt(resid, ridge, f"T({'+'.join(s_names)})")
    cost = 0.5 * float(np.trace(coeff @ m.cov_of(y_names) @ coeff.T))
    return ContinuousResidualMap(
        _frozen(coeff),
        _frozen(m.mean_of(s_names)),
        _frozen(m.mean_of(y_names)),
        _frozen(resid),
        _frozen(resid_inv_sqrt),
        s_names,
        y_names,
        cost,
    )


def _rows(a, width, what):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, width) if width == 1 or a.size != width else a.reshape(1, -1)
    if a.ndim != 2 or a.shape[1] != width:
        raise InvalidData(f"{what} must have {width} columns, got shape {a.shape}")
    return a


def apply_map(tmap: ContinuousResidualMap, s_rows, y_rows):
    """Apply a continuous map rowwise.

    Returns ``(mapped, standardized)`` where ``standardized`` is
    ``resid_inv_sqrt @ (mapped - mean_s)``.
    """
    s = _rows(s_rows, tmap.coeff.shape[0], "s_rows")
    y = _rows(y_rows, tmap.coeff.shape[1], "y_rows")
    if s.shape[0] != y.shape[0]:
        raise InvalidData(f"row count mismatch: {s.shape[0]} vs {y.shape[0]}")
    mapped = s - (y - tmap.mean_y) @ tmap.coeff.T
    return mapped, (mapped - tmap.mean_s) @ tmap.resid_inv_sqrt


def map_moments(m: MomentSummary, tmap: ContinuousResidualMap, name="T") -> MomentSummary:
    """``m`` augmented with the exact moments of ``T(S, Y)``."""
    coef = np.hstack([np.eye(tmap.coeff.shape[0]), -tmap.coeff])
    offset = np.concatenate([np.zeros(tmap.coeff.shape[0]), tmap.mean_y])
    return m.augment(name, coef, tmap.source + tmap.conditioner, offset)


@dataclass(frozen=True)
class CategoricalBarycenterMap:
    classes: tuple
    priors: np.ndarray
    class_means: np.ndarray
    class_covs: np.ndarray
    bary_cov: np.ndarray
    bary_sqrt: np.ndarray
    class_inv_sqrt: np.ndarray
    mean: np.ndarray
    residual: float
    iterations: int

    def class_index(self, label) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise UnknownClass(f"label {label!r} was not seen at fit time") from None


def _mean_root(sigma_half, covs, priors):
    acc = np.zeros_like(sigma_half)
    for p, cov in zip(priors, covs):
        acc += p * psd_sqrt(sigma_half @ cov @ sigma_half)
    return symmetrize(acc)


def fixed_point_residual(bary_cov, covs, priors) -> float:
    """Relative residual of ``S = sum_y p_y (S^1/2 S_y S^1/2)^1/2``."""
    half = psd_sqrt(bary_cov)
    rhs = _mean_root(half, covs, priors)
    return float(np.linalg.norm(bary_cov - rhs) / np.linalg.norm(bary_cov))


def gaussian_barycenter_cov(covs, priors, tol=FIXED_POINT_TOL, max_iter=FIXED_POINT_MAX_ITER):
    """Covariance of the Wasserstein barycenter of centred Gaussians.

    Iterates ``S <- S^-1/2 (sum_y p_y (S^1/2 S_y S^1/2)^1/2)^2 S^-1/2``
    from the mixture ``sum_y p_y S_y``.

    Returns
    -------
    (cov, iterations, residual)
    """
    covs = np.asarray(covs, dtype=float)
    priors = np.asarray(priors, dtype=float)
    sigma = symmetrize(np.einsum("j,jab->ab", priors, covs))
    for it in range(1, max_iter + 1):
        half = psd_sqrt(sigma)
        inv_half = psd_inv_sqrt(sigma, 0.0, "barycenter iterate")
        root = _mean_root(half, covs, priors)
        new = symmetrize(inv_half @ root @ root @ inv_half)
        step = np.linalg.norm(new - sigma) / np.linalg.norm(sigma)
        sigma = new
        if step <= tol:
            break
    else:
        res = fixed_point_residual(sigma, covs, priors)
        raise ConvergenceFailure(
            f"barycenter iteration did not converge in {max_iter} steps (residual {res:.3g})",
            residual=res,
            iterations=max_iter,
        )
    return sigma, it, fixed_point_residual(sigma, covs, priors)


def fit_categorical_map(class_stats, ridge=None) -> CategoricalBarycenterMap:
    """Fit the barycenter map of S given a categorical label.

    ``class_stats`` is either a :class:`ClassMoments` restricted to the S
    block or an iterable of ``(label, prior, mean, cov)`` tuples.
    """
    if isinstance(class_stats, ClassMoments):
        classes = class_stats.classes
        priors = np.asarray(class_stats.priors)
        means = np.asarray(class_stats.means)
        covs = np.asarray(class_stats.covs)
    else:
        rows = list(class_stats)
        classes = tuple(r[0] for r in rows)
        priors = np.array([r[1] for r in rows], dtype=float)
        means = np.array([np.atleast_1d(r[2]) for r in rows], dtype=float)
        covs = np.array([np.atleast_2d(r[3]) for r in rows], dtype=float)
    if len(classes) < 1:
        raise InvalidParameter("need at least one class")
    if np.any(priors <= 0) or abs(priors.sum() - 1.0) > 1e-12:
        raise InvalidData("priors must be positive and sum to 1")
    effective, inv = [], []
    for lab, c in zip(classes, covs):
        r = ridge
        if r is None:
            try:
                inv.append(psd_inv_sqrt(c, 0.0, f"S|Y={lab!r}"))
                effective.append(c)
                continue
            except SingularCovariance:
                r = default_ridge(c)
        c = c + r * np.eye(c.shape[0])
        inv.append(psd_inv_sqrt(c, 0.0, f"S|Y={lab!r}"))
        effective.append(c)
    covs, inv = np.array(effective), np.array(inv)
    sigma, iters, resid = gaussian_barycenter_cov(covs, priors)
    if resid > FIXED_POINT_RESIDUAL_TOL:
        raise ConvergenceFailure(
            f"barycenter fixed-point residual {resid:.3g} exceeds {FIXED_POINT_RESIDUAL_TOL}",
            residual=resid,
            iterations=iters,
        )
    return CategoricalBarycenterMap(
        tuple(classes),
        _frozen(priors),
        _frozen(means),
        _frozen(covs),
        _frozen(sigma),
        _frozen(psd_sqrt(sigma)),
        _frozen(inv),
        _frozen(priors @ means),
        resid,
        iters,
    )


def apply_categorical_map(cmap: CategoricalBarycenterMap, s_rows, labels):
    """Return ``(T(S, Y), S_tilde)`` rows.

    ``S_tilde = S_y^-1/2 (s - mu_y)`` and
    ``T = S^1/2 S_tilde + E S`` with ``S`` the barycenter covariance.
    """
    s = _rows(s_rows, cmap.class_means.shape[1], "s_rows")
    labels = np.asarray(labels).reshape(-1).tolist()
    if len(labels) != s.shape[0]:
        raise InvalidData(f"{len(labels)} labels for {s.shape[0]} rows")
    idx = np.array([cmap.class_index(lab) for lab in labels], dtype=int)
    std = np.empty_like(s)
    for j in range(len(cmap.classes)):
        sel = idx == j
        if np.any(sel):
            std[sel] = (s[sel] - cmap.class_means[j]) @ cmap.class_inv_sqrt[j]
    return std @ cmap.bary_sqrt + cmap.mean, std


def multi_correlation(m: MomentSummary, u, v, ridge=None) -> float:
    """Normalized squared Frobenius norm of the standardized cross-covariance."""
    return corr_functional(m.cov_of(u), m.cov_of(u, v), m.cov_of(v), ridge,
                           ("+".join(_names(u)), "+".join(_names(v))))


def corr_functional(cov_u, cov_uv, cov_v, ridge=None, names=("U", "V")) -> float:
    cov_uv = np.atleast_2d(cov_uv)
    ku = pipeline_inv_sqrt(np.atleast_2d(cov_u), ridge, names[0])
    kv = pipeline_inv_sqrt(np.atleast_2d(cov_v), ridge, names[1])
    return frob2(ku @ cov_uv @ kv) / min(cov_uv.shape)


def categorical_dispersion(w_class_means, w_mean, priors) -> float:
    """``sum_j p_j ||E[W | Y=j] - E[W]||^2``."""
    w_class_means = np.atleast_2d(np.asarray(w_class_means, dtype=float))
    priors = np.asarray(priors, dtype=float)
    if w_class_means.shape[0] != priors.size:
        w_class_means = w_class_means.reshape(priors.size, -1)
    dev = w_class_means - np.asarray(w_mean, dtype=float)
    return float(priors @ np.sum(dev * dev, axis=1))
