import sys
import numpy as np
import pytest

from saematch.sae_model import SaeParams


def random_sae(rng, n_features, d, layer_id=0, theta_range=(0.2, 3.0)):
    return SaeParams(
        w_enc=rng.standard_normal((n_features, d)) / np.sqrt(d),
        b_enc=0.1 * rng.standard_normal(n_features),
        w_dec=rng.standard_normal((d, n_features)) / np.sqrt(d),
        b_dec=0.1 * rng.standard_normal(d),
        theta=rng.uniform(*theta_range, size=n_features),
        layer_id=layer_id,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_sae(rng):
    return random_sae(rng, 4, 3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k, (ok, detail) in sorted(mod.RESULTS.items()):
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
