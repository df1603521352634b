import numpy as np
import pytest

from effectbridge import CombinedSample, NuisanceFit

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def build_sample(x, a, y, v_target, v_index_map=None, **kw) -> CombinedSample:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if v_index_map is None:
        v_index_map = tuple(range(x.shape[1]))
    return CombinedSample(x=x, a=np.asarray(a), y=np.asarray(y),
                          v_target=np.asarray(v_target, dtype=float),
                          v_index_map=tuple(v_index_map), **kw)


def build_fit(pi1_src, mu_src, tau_src, rho_src, rho_tgt, tau_tgt, eps=0.01,
              **kw) -> NuisanceFit:
    """Assemble a NuisanceFit from hand-set per-record values."""
    pi1 = np.asarray(pi1_src, dtype=float)
    return NuisanceFit(
        propensity_src=np.column_stack([1.0 - pi1, pi1]),
        outcome_src=np.asarray(mu_src, dtype=float),
        nested_src=np.asarray(tau_src, dtype=float),
        participation_src=np.asarray(rho_src, dtype=float),
        participation_tgt=np.asarray(rho_tgt, dtype=float),
        nested_tgt=np.asarray(tau_tgt, dtype=float),
        eps=eps, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
