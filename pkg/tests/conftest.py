import numpy as np
import pytest

from statsamp.targets import IsotropicGaussianMixture

ACCEPTANCE_LINES = []


def mixture_a():
    """2D, three unequal components."""
    return IsotropicGaussianMixture(
        [0.3, 0.5, 0.2], [[-1.5, 0.0], [1.5, 0.5], [0.0, 1.5]], [0.3, 0.5, 0.4]
    )


def mixture_b():
    """1D, two separated components."""
    return IsotropicGaussianMixture([0.4, 0.6], [[-2.0], [1.5]], [0.5, 0.3])


def gaussian_2d():
    return IsotropicGaussianMixture.gaussian([0.0, 0.0], 1.0)


def random_mixture(rng, dim, k):
    w = rng.uniform(0.2, 1.0, k)
    return IsotropicGaussianMixture(w / w.sum(), rng.normal(0, 2, (k, dim)), rng.uniform(0.2, 1.5, k))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["gaussian", "mix_a", "mix_b"])
def test_mixture(request):
    return {"gaussian": gaussian_2d, "mix_a": mixture_a, "mix_b": mixture_b}[request.param]()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
