"""Prediction heads, raw-X baselines and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidData, InvalidParameter
from .extractor import FeatureModel, feature_moments, transform
from .matstats import (
    ClassMoments,
    MomentSummary,
    _frozen,
    _names,
    frob2,
    partial_covariance,
    pipeline_inv_sqrt,
)


@dataclass(frozen=True)
class LinearHead:
    """``y_hat = beta @ inputs + intercept``.

    ``model`` is the feature map the head sits on; ``None`` means the head
    reads raw X directly (OLS and anchor baselines).
    """

    beta: np.ndarray
    intercept: np.ndarray
    fitted_on: str
    model: FeatureModel | None = None
    name: str = "barycentric"

    def raw_coef(self) -> tuple[np.ndarray, np.ndarray]:
        """Equivalent affine map on raw X: ``(M, c)`` with ``y_hat = M x + c``."""
        if self.model is None:
            return self.beta, self.intercept
        M = self.beta @ self.model.raw_loadings.T
        return M, self.intercept - M @ self.model.x_mean


def fit_linear_head(model: FeatureModel, m: MomentSummary, outcome="Y", features="X") -> LinearHead:
    """Regress Y on W. With ``Cov(W) = I`` the slope is just ``S_YW``."""
    if model.task != "regression":
        raise InvalidParameter("linear heads need a regression feature model")
    mw = feature_moments(model, m, features)
    beta = mw.cov_of(outcome, "W")
    intercept = mw.mean_of(outcome) - beta @ mw.mean_of("W")
    return LinearHead(_frozen(beta), _frozen(intercept), m.provenance, model)


def predict(head: LinearHead, rows) -> np.ndarray:
    """Apply the head to feature rows (W for barycentric heads, X for baselines)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != head.beta.shape[1]:
        raise InvalidData(f"head expects {head.beta.shape[1]} columns, got {rows.shape[1]}")
    return rows @ head.beta.T + head.intercept


def predict_raw(head: LinearHead, x_rows) -> np.ndarray:
    if head.model is None:
        return predict(head, x_rows)
    return predict(head, transform(head.model, x_rows))


def mse_population(head: LinearHead, target: MomentSummary, outcome="Y", features="X") -> float:
    """Exact ``E_target ||Y - y_hat(X)||^2`` under target moments."""
    M, c = head.raw_coef()
    if target.dim(outcome) != M.shape[0] or target.dim(features) != M.shape[1]:
        raise InvalidData(
            f"head maps {M.shape[1]} features to {M.shape[0]} outcomes; target has "
            f"{target.dim(features)} and {target.dim(outcome)}"
        )
    s_y = target.cov_of(outcome)
    s_yx = target.cov_of(outcome, features)
    s_x = target.cov_of(features)
    var = np.trace(s_y) - 2.0 * np.sum(M * s_yx) + np.sum((M @ s_x) * M)
    bias = target.mean_of(outcome) - M @ target.mean_of(features) - c
    return float(var + bias @ bias)


def mse_empirical(head: LinearHead, y_rows, x_rows) -> float:
    resid = np.atleast_2d(np.asarray(y_rows, dtype=float)).reshape(-1, head.beta.shape[0])
    resid = resid - predict_raw(head, x_rows)
    return float(np.mean(np.sum(resid * resid, axis=1)))


def fit_ols_baseline(m: MomentSummary, outcome="Y", features="X", ridge=None) -> LinearHead:
    k = pipeline_inv_sqrt(m.cov_of(features), ridge, features)
    beta = (m.cov_of(outcome, features) @ k) @ k
    intercept = m.mean_of(outcome) - beta @ m.mean_of(features)
    return LinearHead(_frozen(beta), _frozen(intercept), m.provenance, None, "ols")


def fit_anchor_baseline(m: MomentSummary, anchor="S", gamma=1.0, outcome="Y", features="X",
                        ridge=None) -> LinearHead:
    """Population anchor regression.

    Minimizes ``E[((I - P)(Y - b'X))^2] + gamma E[(P(Y - b'X))^2]`` with
    ``P`` the linear projection on the anchor, through the normal equations

        (S_X + (gamma - 1) S_XhXh) b = S_XY + (gamma - 1) S_XhY,

    where ``Xh = S_XA S_A^-1 A``.
    """
    if not gamma >= 0:
        raise InvalidParameter(f"gamma must be >= 0, got {gamma!r}")
    ka = pipeline_inv_sqrt(m.cov_of(anchor), ridge, "+".join(_names(anchor)))
    proj_x = m.cov_of(features, anchor) @ ka
    proj_y = m.cov_of(outcome, anchor) @ ka
    lhs = m.cov_of(features) + (gamma - 1.0) * proj_x @ proj_x.T
    rhs = m.cov_of(features, outcome) + (gamma - 1.0) * proj_x @ proj_y.T
    # lhs is SPD for gamma > 0 and equals the anchor-partial covariance at gamma = 0
    k = pipeline_inv_sqrt(lhs, ridge, f"anchor normal equations (gamma={gamma})")
    beta = ((k @ k) @ rhs).T
    intercept = m.mean_of(outcome) - beta @ m.mean_of(features)
    return LinearHead(_frozen(beta), _frozen(intercept), m.provenance, None, "anchor")


def anchor_objective(b, m: MomentSummary, anchor="S", gamma=1.0, outcome="Y", features="X") -> float:
    """The anchor loss evaluated directly from moments (scalar outcome or summed)."""
    b = np.asarray(b, dtype=float).reshape(m.dim(features), -1)
    mr = m.augment("R", np.hstack([np.eye(b.shape[1]), -b.T]), _names(outcome) + _names(features))
    s_r = mr.cov_of("R")
    ka = pipeline_inv_sqrt(m.cov_of(anchor), None, "anchor")
    g = mr.cov_of("R", anchor) @ ka
    projected = np.trace(g @ g.T)
    return float(np.trace(s_r) - projected + gamma * projected)


def conditional_correlation(model, m: MomentSummary, against="Z", given="Y",
                            features="X", ridge=None) -> float:
    """``||S_W|g^-1/2 S_W,a|g S_a|g^-1/2||_F``: Frobenius norm of partial correlations.

    ``model`` may be a :class:`FeatureModel` or a raw loading matrix
    (``d_x x d``), in which case features are ``A^T (X - E X)``.
    """
    if isinstance(model, FeatureModel):
        mw = feature_moments(model, m, features)
    else:
        mw = m.augment("W", np.asarray(model, dtype=float).T, features, m.mean_of(features))
    s_w = partial_covariance(mw, "W", "W", given, ridge)
    s_wa = partial_covariance(mw, "W", against, given, ridge)
    s_a = partial_covariance(mw, against, against, given, ridge)
    kw = pipeline_inv_sqrt(s_w, None, "W|given")
    ka = pipeline_inv_sqrt(s_a, None, f"{against}|given")
    return float(np.sqrt(frob2(kw @ s_wa @ ka)))


@dataclass(frozen=True)
class CentroidClassifier:
    """Nearest centroid in W-space with a log-prior offset."""

    classes: tuple
    centroids: np.ndarray
    priors: np.ndarray
    model: FeatureModel | None = None

    def scores(self, w_rows) -> np.ndarray:
        w = np.atleast_2d(np.asarray(w_rows, dtype=float))
        if w.shape[1] != self.centroids.shape[1]:
            raise InvalidData(f"expected {self.centroids.shape[1]} feature columns, got {w.shape[1]}")
        d2 = np.sum((w[:, None, :] - self.centroids[None]) ** 2, axis=2)
        return -0.5 * d2 + np.log(self.priors)


def fit_centroid_classifier(model: FeatureModel, cm: ClassMoments, features="X") -> CentroidClassifier:
    x_means = cm.means[:, cm.index(features)]
    centroids = (x_means - model.x_mean) @ model.raw_loadings
    return CentroidClassifier(cm.classes, _frozen(centroids), cm.priors, model)


def predict_class(clf: CentroidClassifier, w_rows) -> list:
    idx = np.argmax(clf.scores(w_rows), axis=1)
    return [clf.classes[i] for i in idx]
