"""Dense-matrix statistics: block moments, symmetric eigenproblems, PSD roots.

Everything here is a pure function of its inputs. Matrices are symmetrized
with ``(M + M.T) / 2`` before any eigen call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .errors import InsufficientSamples, InvalidData, SingularCovariance

PSD_TOL = 1e-10
SINGULAR_RTOL = 1e-12
PIPELINE_RIDGE = 1e-10


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _names(blocks) -> tuple[str, ...]:
    if isinstance(blocks, str):
        return (blocks,)
    return tuple(blocks)


def symmetrize(M):
    M = np.asarray(M, dtype=float)
    return (M + M.T) / 2.0


def _check_finite(M, what="matrix"):
    if not np.all(np.isfinite(M)):
        raise InvalidData(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class MomentSummary:
    """Means and joint covariance of named variable blocks.

    ``blocks`` is an ordered tuple of ``(name, dim)`` pairs partitioning the
    joint vector. ``n`` is the sample count for empirical moments and
    ``None`` for exact population moments.
    """

    blocks: tuple[tuple[str, int], ...]
    mean: np.ndarray
    cov: np.ndarray
    n: int | None = None

    def __post_init__(self):
        blocks = tuple((str(b), int(d)) for b, d in self.blocks)
        names = [b for b, _ in blocks]
        if len(set(names)) != len(names):
            raise InvalidData(f"duplicate block names in {names}")
        p = sum(d for _, d in blocks)
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if mean.shape != (p,) or cov.shape != (p, p):
            raise InvalidData(
                f"block dims sum to {p} but mean has shape {mean.shape} "
                f"and cov has shape {cov.shape}"
            )
        _check_finite(cov, "covariance")
        _check_finite(mean, "mean")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(symmetrize(cov)))

    @property
    def provenance(self) -> str:
        return "exact" if self.n is None else f"empirical(n={self.n})"

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(b for b, _ in self.blocks)

    @property
    def dims(self) -> dict[str, int]:
        return dict(self.blocks)

    def dim(self, blocks) -> int:
        return int(self.index(blocks).size)

    def has(self, name: str) -> bool:
        return name in self.dims

    def index(self, blocks) -> np.ndarray:
        """Column indices of the concatenation of ``blocks``."""
        offsets, start = {}, 0
        for name, d in self.blocks:
            offsets[name] = np.arange(start, start + d)
            start += d
        try:
            return np.concatenate([offsets[b] for b in _names(blocks)])
        except KeyError as exc:
            raise InvalidData(f"unknown block {exc.args[0]!r}; have {self.names}") from None

    def mean_of(self, blocks) -> np.ndarray:
        return self.mean[self.index(blocks)]

    def cov_of(self, u, v=None) -> np.ndarray:
        iu = self.index(u)
        iv = iu if v is None else self.index(v)
        return self.cov[np.ix_(iu, iv)]

    def augment(self, name: str, coef, source, offset=None) -> "MomentSummary":
        """Append the block ``coef @ (source - offset)``.

        The new block's moments follow exactly from linearity, so any
        derived variable (features, transport residuals) can be studied
        with the same covariance algebra as the original blocks.
        """
        idx = self.index(source)
        coef = np.atleast_2d(np.asarray(coef, dtype=float))
        if coef.shape[1] != idx.size:
            raise InvalidData(
                f"coefficient has {coef.shape[1]} columns, source block has {idx.size}"
            )
        offset = np.zeros(idx.size) if offset is None else np.asarray(offset, dtype=float)
        L = np.zeros((coef.shape[0], self.mean.size))
        L[:, idx] = coef
        new_mean = coef @ (self.mean[idx] - offset)
        cross = L @ self.cov
        cov = np.block([[self.cov, cross.T], [cross, cross @ L.T]])
        return MomentSummary(
            self.blocks + ((name, coef.shape[0]),),
            np.concatenate([self.mean, new_mean]),
            cov,
            self.n,
        )

    def select(self, blocks) -> "MomentSummary":
        names = _names(blocks)
        idx = self.index(names)
        return MomentSummary(
            tuple((b, self.dims[b]) for b in names),
            self.mean[idx],
            self.cov[np.ix_(idx, idx)],
            self.n,
        )


@dataclass(frozen=True)
class ClassMoments:
    """Class-conditional moments of named blocks for a categorical label.

    ``means`` is ``(k, p)`` and ``covs`` is ``(k, p, p)`` over the joint
    vector laid out by ``blocks``. ``counts`` holds per-class sample sizes
    when estimated from data.
    """

    classes: tuple
    priors: np.ndarray
    blocks: tuple[tuple[str, int], ...]
    means: np.ndarray
    covs: np.ndarray
    counts: tuple[int, ...] | None = None

    def __post_init__(self):
        priors = np.asarray(self.priors, dtype=float)
        k = len(self.classes)
        if len(set(self.classes)) != k:
            raise InvalidData("class labels must be unique")
        if priors.shape != (k,) or np.any(priors <= 0):
            raise InvalidData("priors must be positive, one per class")
        if abs(priors.sum() - 1.0) > 1e-12:
            raise InvalidData(f"priors sum to {priors.sum()!r}, expected 1")
        p = sum(int(d) for _, d in self.blocks)
        means = np.asarray(self.means, dtype=float).reshape(k, p)
        covs = np.asarray(self.covs, dtype=float).reshape(k, p, p)
        _check_finite(means, "class means")
        _check_finite(covs, "class covariances")
        covs = (covs + covs.transpose(0, 2, 1)) / 2.0
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "blocks", tuple((str(b), int(d)) for b, d in self.blocks))
        object.__setattr__(self, "priors", _frozen(priors))
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "covs", _frozen(covs))

    @classmethod
    def from_data(cls, data, blocks, labels) -> "ClassMoments":
        data = np.asarray(data, dtype=float)
        labels = np.asarray(labels)
        if data.ndim != 2 or labels.shape != (data.shape[0],):
            raise InvalidData("labels must have one entry per data row")
        _check_finite(data, "data")
        classes = sorted(set(labels.tolist()), key=lambda c: (str(type(c)), c))
        means, covs, counts = [], [], []
        for c in classes:
            rows = data[labels == c]
            if rows.shape[0] < 2:
                raise InsufficientSamples(f"class {c!r} has {rows.shape[0]} rows, need >= 2")
            means.append(rows.mean(axis=0))
            covs.append(np.cov(rows, rowvar=False, ddof=1).reshape(data.shape[1], data.shape[1]))
            counts.append(rows.shape[0])
        priors = np.array(counts, dtype=float) / data.shape[0]
        priors = priors / priors.sum()
        return cls(tuple(classes), priors, blocks, np.array(means), np.array(covs), tuple(counts))

    @property
    def k(self) -> int:
        return len(self.classes)

    def _summary(self) -> MomentSummary:
        return MomentSummary(self.blocks, np.zeros(self.means.shape[1]), np.eye(self.means.shape[1]))

    def index(self, blocks) -> np.ndarray:
        return self._summary().index(blocks)

    def class_mean(self, j: int, blocks) -> np.ndarray:
        return self.means[j, self.index(blocks)]

    def class_cov(self, j: int, u, v=None) -> np.ndarray:
        iu = self.index(u)
        iv = iu if v is None else self.index(v)
        return self.covs[j][np.ix_(iu, iv)]

    def select(self, blocks) -> "ClassMoments":
        names = _names(blocks)
        idx = self.index(names)
        dims = dict(self.blocks)
        return ClassMoments(
            self.classes,
            self.priors,
            tuple((b, dims[b]) for b in names),
            self.means[:, idx],
            self.covs[:, idx][:, :, idx],
            self.counts,
        )

    def pooled(self) -> MomentSummary:
        """Moments of the mixture: law of total covariance."""
        mu = self.priors @ self.means
        dev = self.means - mu
        cov = np.einsum("j,jab->ab", self.priors, self.covs) + (dev.T * self.priors) @ dev
        n = None if self.counts is None else int(sum(self.counts))
        return MomentSummary(self.blocks, mu, cov, n)


def empirical_moments(data, blocks) -> MomentSummary:
    """Sample means and unbiased (``n - 1``) covariance of ``data``.

    Parameters
    ----------
    data : array-like, shape (n, p)
    blocks : sequence of (name, dim)
        Partition of the ``p`` columns, in column order.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise InvalidData(f"expected an (n, p) matrix, got shape {data.shape}")
    n, p = data.shape
    if p < 1:
        raise InvalidData("data has no columns")
    _check_finite(data, "data")
    if n < 2:
        raise InsufficientSamples(f"need at least 2 rows, got {n}")
    # rows are sorted so floating-point sums do not depend on row order
    data = data[np.lexsort(data.T[::-1])]
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (n - 1)
    return MomentSummary(tuple(blocks), mean, cov, n)


@dataclass(frozen=True)
class EigenDecomposition:
    values: np.ndarray
    vectors: np.ndarray = field(repr=False)


def sym_eig(M) -> EigenDecomposition:
    """Eigendecomposition with values in signed-descending order.

    Each eigenvector is flipped so its largest-magnitude entry is positive.
    """
    M = np.asarray(M, dtype=float)
    _check_finite(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidData(f"expected a square matrix, got shape {M.shape}")
    vals, vecs = np.linalg.eigh(symmetrize(M))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if vecs.size:
        pivots = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])]
        vecs = vecs * np.where(pivots < 0, -1.0, 1.0)
    return EigenDecomposition(_frozen(vals), _frozen(vecs))


def _psd_eig(M, block=None):
    M = np.asarray(M, dtype=float)
    _check_finite(M)
    vals, vecs = np.linalg.eigh(symmetrize(M))
    scale = max(np.max(np.abs(vals)), 0.0) if vals.size else 0.0
    if vals.size and vals[0] < -PSD_TOL * scale:
        where = f" ({block})" if block else ""
        raise InvalidData(f"matrix{where} is not positive semidefinite: min eigenvalue {vals[0]:.3g}")
    return np.clip(vals, 0.0, None), vecs


def psd_sqrt(M) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix."""
    vals, vecs = _psd_eig(M)
    return (vecs * np.sqrt(vals)) @ vecs.T


def psd_inv_sqrt(M, ridge: float = 0.0, block: str | None = None) -> np.ndarray:
    """Inverse principal square root, using eigenvalues ``max(l, 0) + ridge``.

    With ``ridge == 0`` eigenvalues below ``1e-12 * l_max`` raise
    :class:`SingularCovariance` naming ``block``.
    """
    if ridge < 0:
        raise InvalidData("ridge must be non-negative")
    vals, vecs = _psd_eig(M, block)
    if ridge == 0.0:
        top = vals.max() if vals.size else 0.0
        if vals.size == 0 or top <= 0.0 or vals.min() < SINGULAR_RTOL * top:
            name = block or "matrix"
            raise SingularCovariance(f"covariance of {name} is numerically singular", block=block)
    return (vecs / np.sqrt(vals + ridge)) @ vecs.T


def default_ridge(M) -> float:
    M = np.asarray(M, dtype=float)
    return PIPELINE_RIDGE * float(np.trace(M)) / M.shape[0]


def pipeline_inv_sqrt(M, ridge: float | None = None, block: str | None = None) -> np.ndarray:
    """Inverse square root used inside fitting pipelines.

    ``ridge=None`` tries the exact inverse first and falls back to
    :func:`default_ridge` only when the matrix is numerically singular.
    """
    if ridge is not None:
        return psd_inv_sqrt(M, ridge, block)
    try:
        return psd_inv_sqrt(M, 0.0, block)
    except SingularCovariance:
        r = default_ridge(M)
        if not r > 0:
            raise
        return psd_inv_sqrt(M, r, block)


def partial_covariance(m: MomentSummary, u, v, given, ridge: float | None = 0.0) -> np.ndarray:
    """Gaussian conditional cross-covariance ``S_uv - S_ug S_g^-1 S_gv``."""
    given_name = "+".join(_names(given))
    K = psd_inv_sqrt(m.cov_of(given), ridge, given_name) if ridge is not None \
        else pipeline_inv_sqrt(m.cov_of(given), None, given_name)
    left = K @ m.cov_of(given, u)
    right = K @ m.cov_of(given, v)
    return m.cov_of(u, v) - left.T @ right


def frob2(M) -> float:
    M = np.asarray(M, dtype=float)
    return float(np.sum(M * M))
