import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skewmix.mixture import MixtureModel
from skewmix.skewnormal import SkewNormalParams, sn_sample

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60
)
settings.load_profile("default")

# acceptance criterion number -> (passed, detail)
ACCEPTANCE = {}


def random_params(rng, d, skew_scale=3.0, scale=1.0):
    """Random SN parameters with a well-conditioned dispersion."""
    a = rng.standard_normal((d, d))
    disp = scale**2 * (a @ a.T / d + 0.5 * np.eye(d))
    loc = scale * rng.normal(0.0, 2.0, size=d)
    lam = rng.uniform(-skew_scale, skew_scale, size=d)
    return SkewNormalParams(loc, disp, lam)


def planted_mixture(K, d, n, seed, sep=6.0, skew=2.0):
    """Skew mixture with component locations spaced ``sep`` apart, and a sample."""
    rng = np.random.default_rng(seed)
    comps = []
    for k in range(K):
        p = random_params(rng, d, skew_scale=skew)
        loc = np.zeros(d)
        loc[k % d] = sep * (k + 1)
        comps.append(SkewNormalParams(loc, p.dispersion, p.skewness))
    weights = rng.dirichlet(np.full(K, 8.0))
    model = MixtureModel("skew", weights, tuple(comps))
    labels = rng.choice(K, size=n, p=weights)
    data = np.empty((n, d))
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        if len(idx):
            data[idx] = sn_sample(comps[k], len(idx), seed + 100 * k)
    return model, data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
