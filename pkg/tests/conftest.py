import numpy as np
import pytest

from otbe.simlab import SemSpec, enforce_unit_Y, random_spd, sem_to_moments


def random_sem(seed, d_s=2, d_z=2, d_y=2, d_x=6, unit_y=True):
    """A random multivariate SEM (latent order S, Z, Y on input)."""
    rng = np.random.default_rng(seed)
    p = d_s + d_z + d_y
    cov = random_spd(p, rng, eps=0.05)
    if unit_y:
        cov = enforce_unit_Y(cov, d_y)
    A = rng.standard_normal((d_x, d_z))
    B = rng.standard_normal((d_x, d_y))
    return SemSpec.multivariate(cov, A, B, d_s, d_z, d_y, 0.25 * np.eye(d_x), seed=seed)


def random_moments(seed, **dims):
    return sem_to_moments(random_sem(seed, **dims))


def random_orthonormal(rng, n, k):
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.sign(np.diag(r))


@pytest.fixture
def toy_exact():
    return sem_to_moments(SemSpec.toy(0.9))


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
