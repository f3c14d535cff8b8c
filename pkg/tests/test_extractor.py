import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from otbe.barycenter import categorical_dispersion, fit_continuous_map, map_moments
from otbe.errors import ClassTooSmall, InvalidData, InvalidParameter
from otbe.extractor import (
    ExtractorConfig,
    build_C_categorical,
    build_C_regression,
    build_D,
    feature_moments,
    fit,
    lambda_path,
    objective,
    solve_loadings,
    transform,
)
from otbe.heads import conditional_correlation
from otbe.matstats import ClassMoments, MomentSummary, empirical_moments, partial_covariance
from otbe.simlab import SemSpec, sample, sem_to_moments

from conftest import random_moments, random_orthonormal


def _angle(u, v):
    c = abs(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.arccos(min(1.0, c)))


# -- C and D ---------------------------------------------------------------------------


def test_C_zero_when_x_independent_of_y():
    m = MomentSummary((("Y", 1), ("X", 2)), np.zeros(3), np.diag([1.0, 2.0, 3.0]))
    assert_array_equal(build_C_regression(m), np.zeros((2, 1)))


def test_C_toy_rho_zero_by_hand():
    s2 = 0.5
    m = sem_to_moments(SemSpec.toy(0.0, 1.0, s2))
    # hand propagation: Var X = [[2, -1], [-1, 2 + s2]], Cov(X, Y) = (0, 1)
    Sx = np.array([[2.0, -1.0], [-1.0, 2.0 + s2]])
    vals, vecs = np.linalg.eigh(Sx)
    K = vecs @ np.diag(vals**-0.5) @ vecs.T
    assert_allclose(build_C_regression(m), K @ [[0.0], [1.0]], atol=1e-14)


def test_C_norm_is_max_squared_correlation():
    m = random_moments(6, d_y=1)
    C = build_C_regression(m)
    rng = np.random.default_rng(0)
    Sx, sxy, sy = m.cov_of("X"), m.cov_of("X", "Y")[:, 0], m.cov_of("Y")[0, 0]
    a = rng.standard_normal((20_000, 6))
    corr2 = (a @ sxy) ** 2 / (np.einsum("ij,jk,ik->i", a, Sx, a) * sy)
    best = np.linalg.solve(Sx, sxy)
    best_corr2 = (best @ sxy) ** 2 / (best @ Sx @ best * sy)
    assert corr2.max() <= np.sum(C**2) + 1e-12
    assert_allclose(best_corr2, np.sum(C**2), atol=1e-12)


def test_C_categorical_balanced_two_class():
    mu = 0.7
    cm = ClassMoments(("a", "b"), [0.5, 0.5], [("X", 1)], [[mu], [-mu]],
                      [[[1 - mu**2]], [[1 - mu**2]]])
    # pooled variance is 1, so X is already whitened
    assert_allclose(build_C_categorical(cm), [[mu / np.sqrt(2), -mu / np.sqrt(2)]], atol=1e-14)


def test_C_categorical_equal_means_is_zero():
    cm = ClassMoments((0, 1), [0.4, 0.6], [("X", 2)], np.ones((2, 2)), [np.eye(2), 2 * np.eye(2)])
    assert_allclose(build_C_categorical(cm), np.zeros((2, 2)), atol=1e-15)


def test_categorical_C_identity_with_dispersion():
    rng = np.random.default_rng(2)
    k, p = 3, 4
    means = rng.standard_normal((k, p))
    covs = np.array([np.eye(p) + 0.1 * j for j in range(k)])
    cm = ClassMoments((0, 1, 2), [0.2, 0.3, 0.5], [("X", p)], means, covs)
    C = build_C_categorical(cm)
    model = fit(cm, ExtractorConfig(task="classification", context=("X",), dim=2))
    w_means = (means - model.x_mean) @ model.raw_loadings
    assert_allclose(categorical_dispersion(w_means, cm.priors @ w_means, cm.priors),
                    np.sum((model.loadings.T @ C) ** 2), atol=1e-12)


def test_D_zero_for_pure_noise_context():
    m = random_moments(1, d_s=0)
    p = m.cov.shape[0]
    cov = np.zeros((p + 2, p + 2))
    cov[:p, :p] = m.cov
    cov[p:, p:] = np.eye(2)
    m2 = MomentSummary(m.blocks + (("S", 2),), np.zeros(p + 2), cov)
    assert_allclose(build_D(m2, ("S",)), np.zeros((6, 2)), atol=1e-15)


def test_D_annihilated_by_invariant_toy_direction():
    m = sem_to_moments(SemSpec.toy(0.9))
    tmap = fit_continuous_map(m, "Z", "Y")
    mt = map_moments(m, tmap)
    a = np.array([1.0, 1.0])
    # unwhitened analogue of D is Cov(X, T(Z, Y))
    assert_allclose(a @ mt.cov_of("X", "T"), [0.0], atol=1e-14)


def test_D_from_samples_close_to_exact():
    spec = SemSpec.toy(0.6, seed=5)
    m_exact = sem_to_moments(spec)
    m_emp = empirical_moments(sample(spec, 100_000), spec.blocks)
    assert np.max(np.abs(build_D(m_emp, ("Z",)) - build_D(m_exact, ("Z",)))) < 0.05


# -- solve_loadings ----------------------------------------------------------------------


def test_lambda_zero_gives_ols_direction():
    C = np.array([[1.0], [2.0], [-0.5]])
    A, _ = solve_loadings(C, np.zeros((3, 1)), 0.0, 1)
    assert_allclose(A[:, 0], C[:, 0] / np.linalg.norm(C) * np.sign(C[1, 0]), atol=1e-14)


@pytest.mark.parametrize("lam", [0.0, 0.4, 0.9])
def test_zero_D_solution_independent_of_lambda(lam):
    rng = np.random.default_rng(1)
    C = rng.standard_normal((5, 2))
    A, _ = solve_loadings(C, np.zeros((5, 2)), lam, 2)
    A0, _ = solve_loadings(C, np.zeros((5, 2)), 0.0, 2)
    assert_allclose(A, A0, atol=1e-12)


def test_brute_force_stiefel_oracle():
    rng = np.random.default_rng(1234)
    C, D = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
    lam, d = 0.7, 2
    A, vals = solve_loadings(C, D, lam, d)
    dwy, dws = 2, 2
    best = objective(A, C, D, lam, dwy, dws)
    cands = [random_orthonormal(rng, 4, d) for _ in range(10_000)]
    assert best >= max(objective(Q, C, D, lam, dwy, dws) for Q in cands) - 1e-6
    assert_allclose(best, vals[:d].sum(), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 0.99))
def test_gauge_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    C, D = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    A, _ = solve_loadings(C, D, lam, 2)
    Q = random_orthonormal(rng, 2, 2)
    assert_allclose(objective(A @ Q, C, D, lam, 2, 2), objective(A, C, D, lam, 2, 2), atol=1e-10)


def test_solve_loadings_preconditions():
    C, D = np.ones((3, 1)), np.ones((3, 1))
    with pytest.raises(InvalidParameter, match="lambda must be < 1"):
        solve_loadings(C, D, 1.0, 1)
    with pytest.raises(InvalidParameter):
        solve_loadings(C, D, -0.1, 1)
    with pytest.raises(InvalidParameter):
        solve_loadings(C, D, 0.5, 4)
    with pytest.raises(InvalidParameter):
        solve_loadings(C, D, 0.5, 0)


# -- fit / transform / lambda_path ----------------------------------------------------------


def test_toy_high_lambda_recovers_invariant_direction(toy_exact):
    model = fit(toy_exact, lam=0.999, dim=1, context=("Z",))
    assert _angle(model.raw_loadings[:, 0], np.array([1.0, 1.0])) < 1e-3


def test_multivariate_loadings_orthonormal():
    m = random_moments(3)
    model = fit(m, lam=0.6, dim=2, context=("S",))
    assert_allclose(model.loadings.T @ model.loadings, np.eye(2), atol=1e-10)


def test_transform_centres_and_whitens():
    m = random_moments(7)
    model = fit(m, lam=0.3, dim=2, context=("Z",))
    assert_allclose(transform(model, m.mean_of("X")), np.zeros((1, 2)), atol=1e-14)
    mw = feature_moments(model, m)
    assert_allclose(mw.cov_of("W"), np.eye(2), atol=1e-10)


def test_full_dimension_is_orthogonal_transform():
    m = random_moments(8, d_x=4)
    model = fit(m, lam=0.0, dim=4, context=("S",))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10, 4))
    xt = (x - model.x_mean) @ model.x_inv_sqrt
    assert_allclose(np.linalg.norm(transform(model, x), axis=1), np.linalg.norm(xt, axis=1), rtol=1e-12)


def test_transform_shape_check():
    model = fit(random_moments(0), dim=1)
    with pytest.raises(InvalidData):
        transform(model, np.zeros((2, 5)))


def test_lambda_path_shares_prepared_stage(toy_exact):
    grid = np.linspace(0, 0.999, 21)
    models = lambda_path(toy_exact, ExtractorConfig(dim=1, context=("Z",)), grid)
    assert all(mo.C is models[0].C and mo.D is models[0].D for mo in models)
    single = lambda_path(toy_exact, ExtractorConfig(dim=1, context=("Z",)), [0.0])[0]
    assert_array_equal(single.loadings, fit(toy_exact, lam=0.0, dim=1, context=("Z",)).loadings)
    first = conditional_correlation(models[0], toy_exact)
    at_099 = conditional_correlation(fit(toy_exact, lam=0.99, dim=1, context=("Z",)), toy_exact)
    assert at_099 <= first


def test_term_D_nonincreasing_along_lambda():
    grid = np.linspace(0, 0.999, 41)
    for seed in range(10):
        m = random_moments(seed)
        models = lambda_path(m, ExtractorConfig(dim=2, context=("S",)), grid)
        tD = [mo.term_D() for mo in models]
        tC = [mo.term_C() for mo in models]
        assert all(b <= a + 1e-8 for a, b in zip(tD, tD[1:]))
        assert all(b <= a + 1e-8 for a, b in zip(tC, tC[1:]))


def test_warning_when_dim_exceeds_positive_eigenvalues(caplog):
    m = random_moments(2, d_y=1)
    model = fit(m, lam=0.0, dim=3, context=("S",))
    assert model.warnings and "positive eigenvalues" in model.warnings[0]


@pytest.mark.parametrize("seed", range(10))
def test_uncorrelated_with_T_iff_partial_covariance_zero(seed):
    m = random_moments(seed)
    model = fit(m, lam=0.5, dim=2, context=("S",))
    tmap = fit_continuous_map(m, "S", "Y")
    mw = map_moments(feature_moments(model, m), tmap)
    assert_allclose(mw.cov_of("W", "T"), partial_covariance(mw, "W", "S", "Y"), atol=1e-12)


def test_classification_requires_class_support():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((12, 4))
    labels = np.array([0] * 10 + [1] * 2)
    cm = ClassMoments.from_data(data, [("S", 2), ("X", 2)], labels)
    with pytest.raises(ClassTooSmall, match="barycenter"):
        fit(cm, task="classification", context=("S",))


def test_config_validation():
    with pytest.raises(InvalidParameter):
        ExtractorConfig(task="ranking")
    with pytest.raises(InvalidParameter):
        ExtractorConfig(dim=0)
    with pytest.raises(InvalidData):
        fit(random_moments(0), task="classification")


def test_unified_delta_changes_weighting_only_for_classification():
    rng = np.random.default_rng(5)
    k, p = 3, 5
    means = rng.standard_normal((k, p))
    covs = np.array([np.eye(p) * (1 + 0.2 * j) for j in range(k)])
    cm = ClassMoments((0, 1, 2), [0.3, 0.3, 0.4], [("S", 2), ("X", 3)], means, covs)
    split = fit(cm, task="classification", context=("S",), dim=3, lam=0.5)
    unified = fit(cm, task="classification", context=("S",), dim=3, lam=0.5, delta="unified")
    assert split.delta_wy == 3.0
    assert unified.delta_wy == 3.0 and unified.C.shape[1] == 3
