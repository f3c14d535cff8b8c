"""Linear-Gaussian structural equation models and the shift experiments.

Every SEM here has latent blocks (Y, Z, S) drawn jointly Gaussian and
observed features ``X = M (Y, Z, S) + eps`` with independent Gaussian
noise, so exact joint moments follow by linear propagation. Latent blocks
are stored in the canonical order Y, Z, S; constructors accept covariance
matrices in the orders used when the models were first written down
((Z, S, Y) for the surrogate model, (S, Z, Y) for the multivariate one).

Experiments are pure functions of their configuration: each iteration
draws from its own stream ``SeedSequence([seed, stream, index])``, so the
output does not depend on scheduling or thread count.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfig, InvalidData, InvalidParameter
from .extractor import ExtractorConfig, lambda_path
from .heads import (
    conditional_correlation,
    fit_anchor_baseline,
    fit_linear_head,
    fit_ols_baseline,
    mse_population,
)
from .matstats import MomentSummary, _frozen, empirical_moments, psd_inv_sqrt

DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.linspace(0.0, 0.999, 41))
DEFAULT_GAMMA_GRID = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
DEFAULT_GRID_VALUES = (-0.8, -0.4, 0.0, 0.4, 0.8)

_STREAM_ITER, _STREAM_FIXED, _STREAM_SOURCE = 0, 1, 2


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *key]))


def _threads(threads=None) -> int:
    if threads is None:
        threads = int(os.environ.get("OTBE_THREADS", "1") or 1)
    return max(1, int(threads))


def _pmap(fn, items, threads=None):
    items = list(items)
    n = _threads(threads)
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _check_spd(M, what):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        raise InvalidData(f"{what} must be a finite square matrix")
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise InvalidData(f"{what} is not symmetric")
    if M.size and np.linalg.eigvalsh((M + M.T) / 2)[0] <= 0:
        raise InvalidData(f"{what} is not positive definite")
    return (M + M.T) / 2


@dataclass(frozen=True)
class SemSpec:
    kind: str
    latent_blocks: tuple[tuple[str, int], ...]
    latent_cov: np.ndarray
    loading: np.ndarray
    noise_cov: np.ndarray
    seed: int = 0
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "latent_cov", _frozen(_check_spd(self.latent_cov, "latent covariance")))
        object.__setattr__(self, "noise_cov", _frozen(_check_spd(self.noise_cov, "noise covariance")))
        loading = np.asarray(self.loading, dtype=float)
        if loading.shape != (self.noise_cov.shape[0], self.latent_cov.shape[0]):
            raise InvalidData(f"loading has shape {loading.shape}")
        object.__setattr__(self, "loading", _frozen(loading))

    @classmethod
    def toy(cls, rho, sigma1_sq=1.0, sigma2_sq=1.0, seed=0):
        """``(Z, Y) ~ N(0, [[1, rho], [rho, 1]])``, ``X1 = Z + e1``, ``X2 = Y - Z + e2``."""
        if not abs(rho) < 1:
            raise InvalidData(f"toy model needs |rho| < 1, got {rho!r}")
        cov = np.array([[1.0, rho], [rho, 1.0]])
        loading = np.array([[0.0, 1.0], [1.0, -1.0]])
        return cls("toy", (("Y", 1), ("Z", 1)), cov, loading, np.diag([sigma1_sq, sigma2_sq]),
                   seed, {"rho": rho, "sigma1_sq": sigma1_sq, "sigma2_sq": sigma2_sq})

    @classmethod
    def surrogate(cls, cov_zsy, sigma1_sq=0.25, sigma2_sq=0.25, seed=0):
        """Toy features with an extra context S; ``cov_zsy`` is ordered (Z, S, Y)."""
        cov_zsy = np.asarray(cov_zsy, dtype=float)
        order = [2, 0, 1]
        cov = cov_zsy[np.ix_(order, order)]
        loading = np.array([[0.0, 1.0, 0.0], [1.0, -1.0, 0.0]])
        return cls("surrogate", (("Y", 1), ("Z", 1), ("S", 1)), cov, loading,
                   np.diag([sigma1_sq, sigma2_sq]), seed,
                   {"cov_zsy": cov_zsy.tolist(), "sigma1_sq": sigma1_sq, "sigma2_sq": sigma2_sq})

    @classmethod
    def multivariate(cls, cov_szy, A, B, d_s, d_z, d_y, noise_cov=None, seed=0):
        """``X = A Z + B Y + eps``; ``cov_szy`` is ordered (S, Z, Y)."""
        cov_szy = np.asarray(cov_szy, dtype=float)
        A = np.asarray(A, dtype=float).reshape(-1, d_z)
        B = np.asarray(B, dtype=float).reshape(-1, d_y)
        d_x = A.shape[0]
        if B.shape[0] != d_x:
            raise InvalidData("A and B must have the same number of rows")
        if cov_szy.shape != (d_s + d_z + d_y,) * 2:
            raise InvalidData(f"cov_szy has shape {cov_szy.shape}")
        order = list(range(d_s + d_z, d_s + d_z + d_y)) + list(range(d_s, d_s + d_z)) + list(range(d_s))
        cov = cov_szy[np.ix_(order, order)]
        loading = np.hstack([B, A, np.zeros((d_x, d_s))])
        noise = 0.25 * np.eye(d_x) if noise_cov is None else noise_cov
        blocks = tuple((n, d) for n, d in (("Y", d_y), ("Z", d_z), ("S", d_s)) if d > 0)
        return cls("multivariate", blocks, cov, loading, noise, seed,
                   {"d_s": d_s, "d_z": d_z, "d_y": d_y, "d_x": d_x})

    @property
    def blocks(self) -> tuple[tuple[str, int], ...]:
        return self.latent_blocks + (("X", self.loading.shape[0]),)


def sem_to_moments(spec: SemSpec) -> MomentSummary:
    """Exact joint moments of (Y, Z, [S,] X)."""
    L, M = spec.latent_cov, spec.loading
    cross = M @ L
    cov = np.block([[L, cross.T], [cross, cross @ M.T + spec.noise_cov]])
    return MomentSummary(spec.blocks, np.zeros(cov.shape[0]), cov)


def _factor(cov):
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample(spec: SemSpec, n: int, seed=None) -> np.ndarray:
    """``n`` seeded draws; columns follow ``spec.blocks``."""
    if n < 1:
        raise InvalidParameter(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    latent = rng.standard_normal((n, spec.latent_cov.shape[0])) @ _factor(spec.latent_cov).T
    noise = rng.standard_normal((n, spec.noise_cov.shape[0])) @ _factor(spec.noise_cov).T
    return np.hstack([latent, latent @ spec.loading.T + noise])


def random_spd(dim: int, seed=None, eps: float = 1e-3) -> np.ndarray:
    """``G G^T + dim * eps * I`` with G standard normal."""
    G = np.random.default_rng(seed).standard_normal((dim, dim))
    return G @ G.T + dim * eps * np.eye(dim)


def enforce_unit_Y(cov, d_y: int) -> np.ndarray:
    """Congruence by ``blockdiag(I, S_Y^-1/2)`` so the trailing Y block becomes I."""
    cov = np.asarray(cov, dtype=float)
    p = cov.shape[0]
    T = np.eye(p)
    T[p - d_y:, p - d_y:] = psd_inv_sqrt(cov[p - d_y:, p - d_y:], 0.0, "Y")
    out = T @ cov @ T.T
    return (out + out.T) / 2


# -- population shift experiment ---------------------------------------------------


@dataclass(frozen=True)
class ShiftConfig:
    """Grid of (Z, S, Y) correlation triples with unit variances.

    ``triples`` overrides ``values`` with an explicit list of
    ``(rho_zs, rho_zy, rho_sy)``.
    """

    values: tuple = DEFAULT_GRID_VALUES
    triples: tuple | None = None
    sigma1_sq: float = 0.25
    sigma2_sq: float = 0.25
    dim: int = 1
    improvement_threshold: float = 0.0
    tie_rtol: float = 1e-9


def _corr3(rho_zs, rho_zy, rho_sy):
    return np.array([[1.0, rho_zs, rho_zy], [rho_zs, 1.0, rho_sy], [rho_zy, rho_sy, 1.0]])


def admissible_triples(config: ShiftConfig) -> list[tuple[float, float, float]]:
    cands = config.triples
    if cands is None:
        cands = itertools.product(config.values, repeat=3)
    out = []
    for t in cands:
        t = tuple(float(v) for v in t)
        if np.linalg.eigvalsh(_corr3(*t))[0] > 1e-10:
            out.append(t)
    if not out:
        raise InvalidConfig("no admissible (positive definite) covariance triple in the grid")
    return out


@dataclass
class ExperimentReport:
    name: str
    config: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    columns: tuple = ()


def _improves(mse, baseline, config) -> bool:
    margin = max(config.improvement_threshold, config.tie_rtol)
    return mse < baseline * (1.0 - margin)


def _source_fits(triple, config, lam_grid, gamma_grid):
    spec = SemSpec.surrogate(_corr3(*triple), config.sigma1_sq, config.sigma2_sq)
    m = sem_to_moments(spec)
    ols = fit_ols_baseline(m)
    anchors = [fit_anchor_baseline(m, "S", g) for g in gamma_grid]
    models = lambda_path(m, ExtractorConfig(dim=config.dim, context=("S",)), lam_grid)
    bary = [fit_linear_head(model, m) for model in models]
    return spec, ols, anchors, bary


def population_shift_experiment(grid_config: ShiftConfig | None = None,
                                lam_grid=DEFAULT_LAMBDA_GRID,
                                gamma_grid=DEFAULT_GAMMA_GRID,
                                threads=None) -> ExperimentReport:
    """Compare OLS, anchor and barycentric heads over all ordered source/target pairs.

    Each method is tuned on the target population MSE. A tuned method only
    counts as different from OLS when it beats OLS by the improvement margin;
    otherwise it reverts to its OLS-equivalent parameter (gamma=1, lambda=0).
    """
    config = grid_config or ShiftConfig()
    lam_grid, gamma_grid = tuple(float(v) for v in lam_grid), tuple(float(v) for v in gamma_grid)
    if 1.0 not in gamma_grid:
        raise InvalidConfig("gamma grid must contain 1 (the OLS-equivalent value)")
    if 0.0 not in lam_grid:
        raise InvalidConfig("lambda grid must contain 0 (the OLS-equivalent value)")
    triples = admissible_triples(config)
    fits = _pmap(lambda t: _source_fits(t, config, lam_grid, gamma_grid), triples, threads)
    targets = [sem_to_moments(f[0]) for f in fits]

    def pair_records(i):
        spec_s, ols, anchors, bary = fits[i]
        rows = []
        for j, tm in enumerate(targets):
            mse_ols = mse_population(ols, tm)
            a_mse = [mse_population(h, tm) for h in anchors]
            b_mse = [mse_population(h, tm) for h in bary]
            ia, ib = int(np.argmin(a_mse)), int(np.argmin(b_mse))
            best_gamma, mse_anchor = gamma_grid[ia], a_mse[ia]
            best_lam, mse_bary = lam_grid[ib], b_mse[ib]
            if not _improves(mse_anchor, mse_ols, config):
                best_gamma, mse_anchor = 1.0, mse_ols
            if not _improves(mse_bary, mse_ols, config):
                best_lam, mse_bary = 0.0, mse_ols
            cands = [("ols", mse_ols), ("anchor", mse_anchor), ("barycentric", mse_bary)]
            winner = min(cands, key=lambda c: c[1])[0]
            dist = float(np.linalg.norm(spec_s.latent_cov - fits[j][0].latent_cov))
            rows.append({
                "source_id": i, "target_id": j, "frobenius_distance": dist,
                "best_lambda": best_lam, "best_gamma": best_gamma,
                "mse_ols": mse_ols, "mse_anchor": mse_anchor, "mse_bary": mse_bary,
                "winner": winner,
            })
        return rows

    records = [r for rows in _pmap(pair_records, range(len(fits)), threads) for r in rows]
    report = ExperimentReport(
        "grid",
        {**asdict(config), "lam_grid": list(lam_grid), "gamma_grid": list(gamma_grid),
         "triples_resolved": [list(t) for t in triples]},
        records,
        columns=("source_id", "target_id", "frobenius_distance", "best_lambda", "best_gamma",
                 "mse_ols", "mse_anchor", "mse_bary", "winner"),
    )
    report.summary = summarize_wins(records)
    return report


def summarize_wins(records) -> dict:
    methods = ("anchor", "barycentric", "ols")
    n = len(records)
    counts = {k: sum(r["winner"] == k for r in records) for k in methods}
    dist = np.array([r["frobenius_distance"] for r in records])
    cut = float(np.quantile(dist, 0.75)) if n else 0.0
    top = [r for r in records if r["frobenius_distance"] >= cut]
    top_counts = {k: sum(r["winner"] == k for r in top) for k in methods}
    return {
        "pairs": n,
        "wins": counts,
        "percent": {k: 100.0 * v / n if n else 0.0 for k, v in counts.items()},
        "top_quartile_cut": cut,
        "top_quartile_pairs": len(top),
        "top_quartile_wins": top_counts,
        "top_quartile_percent": {k: 100.0 * v / len(top) if top else 0.0
                                 for k, v in top_counts.items()},
    }


# -- multivariate finite-sample experiments ---------------------------------------


@dataclass(frozen=True)
class MultiDims:
    d_s: int = 2
    d_z: int = 2
    d_y: int = 2
    d_x: int = 6


def _dims(dims) -> MultiDims:
    if dims is None:
        return MultiDims()
    if isinstance(dims, MultiDims):
        return dims
    return MultiDims(**dict(dims))


def fixed_loadings(seed, dims: MultiDims):
    rng = _rng(seed, _STREAM_FIXED)
    return rng.standard_normal((dims.d_x, dims.d_z)), rng.standard_normal((dims.d_x, dims.d_y))


def draw_environment(rng, dims: MultiDims, A, B, noise_var=0.25) -> SemSpec:
    """A random (S, Z, Y) covariance with ``Cov(Y) = I`` and the fixed A, B."""
    p = dims.d_s + dims.d_z + dims.d_y
    cov = enforce_unit_Y(random_spd(p, rng), dims.d_y)
    return SemSpec.multivariate(cov, A, B, dims.d_s, dims.d_z, dims.d_y,
                                noise_var * np.eye(dims.d_x))


def lambda_curve_experiment(reps=100, n=2000, lam_grid=DEFAULT_LAMBDA_GRID, dims=None, *,
                            seed=0, dim=2, context="Z", noise_var=0.25,
                            threads=None) -> ExperimentReport:
    """Conditional correlation ``||Corr(W_lam, Z | Y)||_F`` along lambda.

    Features are fitted on ``n`` samples of a random source environment; the
    correlation (and the target MSE of the linear head) are evaluated
    exactly on the realized source and target moments.
    """
    if reps < 1:
        raise InvalidParameter(f"reps must be >= 1, got {reps}")
    dims = _dims(dims)
    lam_grid = tuple(float(v) for v in lam_grid)
    A, B = fixed_loadings(seed, dims)
    cfg = ExtractorConfig(dim=dim, context=tuple(context) if not isinstance(context, str) else (context,))

    def one(rep):
        rng = _rng(seed, _STREAM_ITER, rep)
        source = draw_environment(rng, dims, A, B, noise_var)
        target = draw_environment(rng, dims, A, B, noise_var)
        m = empirical_moments(sample(source, n, rng), source.blocks)
        models = lambda_path(m, cfg, lam_grid)
        exact_s, exact_t = sem_to_moments(source), sem_to_moments(target)
        rows = []
        for lam, model in zip(lam_grid, models):
            head = fit_linear_head(model, m)
            rows.append({
                "rep": rep, "lambda": lam,
                "cond_corr": conditional_correlation(model, exact_s, "Z", "Y"),
                "target_mse": mse_population(head, exact_t),
            })
        return rows

    per_rep = _pmap(one, range(reps), threads)
    records = [r for rows in per_rep for r in rows]
    decays = [rows[-1]["cond_corr"] < rows[0]["cond_corr"] for rows in per_rep]
    report = ExperimentReport(
        "lambda_curve",
        {"reps": reps, "n": n, "lam_grid": list(lam_grid), "dims": asdict(dims), "seed": seed,
         "dim": dim, "context": list(cfg.context), "noise_var": noise_var,
         "A": A.tolist(), "B": B.tolist()},
        records,
        columns=("rep", "lambda", "cond_corr", "target_mse"),
    )
    first = np.array([rows[0]["cond_corr"] for rows in per_rep])
    last = np.array([rows[-1]["cond_corr"] for rows in per_rep])
    report.summary = {
        "reps": reps,
        "decay_fraction": float(np.mean(decays)),
        "median_cond_corr_first": float(np.median(first)),
        "median_cond_corr_last": float(np.median(last)),
    }
    return report


def lambda_star_experiment(iters=5000, lam_grid=DEFAULT_LAMBDA_GRID, improvement_threshold=0.005,
                           *, seed=0, redraw_source=True, dims=None, n=None, dim=2,
                           context="Z", noise_var=0.25, threads=None) -> ExperimentReport:
    """Distribution of the target-optimal lambda.

    Per iteration a target environment is drawn (and a source, unless
    ``redraw_source`` is false). ``lambda*`` minimizes the target MSE over
    the grid and is reset to 0 unless it improves on OLS by the relative
    ``improvement_threshold``. ``n=None`` fits on exact source moments.
    """
    if iters < 1:
        raise InvalidParameter(f"iters must be >= 1, got {iters}")
    dims = _dims(dims)
    lam_grid = tuple(float(v) for v in lam_grid)
    A, B = fixed_loadings(seed, dims)
    cfg = ExtractorConfig(dim=dim, context=tuple(context) if not isinstance(context, str) else (context,))
    fixed_source = None if redraw_source else draw_environment(_rng(seed, _STREAM_SOURCE), dims, A, B, noise_var)

    def one(it):
        rng = _rng(seed, _STREAM_ITER, it)
        source = draw_environment(rng, dims, A, B, noise_var) if redraw_source else fixed_source
        target = draw_environment(rng, dims, A, B, noise_var)
        m = sem_to_moments(source) if n is None else empirical_moments(sample(source, n, rng), source.blocks)
        tm = sem_to_moments(target)
        mse_ols = mse_population(fit_ols_baseline(m), tm)
        mses = [mse_population(fit_linear_head(model, m), tm) for model in lambda_path(m, cfg, lam_grid)]
        k = int(np.argmin(mses))
        gain = (mse_ols - mses[k]) / mse_ols
        lam_star = lam_grid[k] if gain >= improvement_threshold else 0.0
        return {"iter": it, "lambda_star": lam_star, "lambda_argmin": lam_grid[k],
                "mse_ols": mse_ols, "mse_best": mses[k], "relative_gain": gain}

    records = _pmap(one, range(iters), threads)
    lam = np.array([r["lambda_star"] for r in records])
    edges = np.linspace(0.0, 1.0, 11)
    hist, _ = np.histogram(lam, bins=edges)
    report = ExperimentReport(
        "lambda_star",
        {"iters": iters, "lam_grid": list(lam_grid), "improvement_threshold": improvement_threshold,
         "seed": seed, "redraw_source": redraw_source, "dims": asdict(dims), "n": n, "dim": dim,
         "context": list(cfg.context), "noise_var": noise_var, "A": A.tolist(), "B": B.tolist()},
        records,
        columns=("iter", "lambda_star", "lambda_argmin", "mse_ols", "mse_best", "relative_gain"),
    )
    report.summary = {
        "iters": iters,
        "redraw_source": redraw_source,
        "mass_zero": float(np.mean(lam == 0.0)),
        "mass_high": float(np.mean(lam >= 0.9)),
        "mass_boundary": float(np.mean((lam == 0.0) | (lam >= 0.9))),
        "mass_interior": float(np.mean((lam > 0.1) & (lam < 0.9))),
        "histogram_edges": edges.tolist(),
        "histogram_counts": hist.tolist(),
    }
    return report
