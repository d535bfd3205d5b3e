import numpy as np
import pytest

from staggered.montecarlo import PotentialOutcomes
from staggered.panel import NEVER, from_wide


def toy_population(seed, sizes, T, effect_sd=1.0, linear=0.0):
    """Random science table obeying no anticipation.

    Cohort g's outcomes equal the never-treated ones before g and add a
    unit-level effect from g on; ``linear`` makes the effect depend on the
    first-period outcome.
    """
    rng = np.random.default_rng(seed)
    n = sum(sizes.values())
    base = rng.normal(size=(n, T)).cumsum(axis=1)
    Y = {}
    for g in sizes:
        y = base.copy()
        if np.isfinite(g):
            k = int(g) - 1
            eff = rng.normal(0.5, effect_sd, size=(n, T - k)) + linear * base[:, [0]]
            y[:, k:] += eff
        Y[float(g)] = y
    return PotentialOutcomes(Y, {float(g): n_g for g, n_g in sizes.items()})


def staggered_panel(seed=0, sizes=None, T=4, shift=0.0):
    """Observed panel with a random assignment for the given cohort sizes."""
    sizes = sizes or {2.0: 15, 3.0: 15, 4.0: 15, NEVER: 15}
    rng = np.random.default_rng(seed)
    G = np.concatenate([[g] * n for g, n in sizes.items()])
    rng.shuffle(G)
    n = len(G)
    Y = rng.normal(size=(n, 1)) + rng.normal(size=(n, T)).cumsum(axis=1) * 0.5
    Y = Y + (np.arange(1, T + 1)[None, :] >= G[:, None]) * (1.0 + shift)
    return from_wide(Y, G)


@pytest.fixture
def two_period_panel():
    # hand-checkable: cohort 2 = units 0..2, never = units 3..5
    Y = np.array([
        [1.0, 3.0],
        [2.0, 5.0],
        [4.0, 6.0],
        [0.0, 1.0],
        [3.0, 2.0],
        [2.0, 4.0],
    ])
    G = np.array([2.0, 2.0, 2.0, NEVER, NEVER, NEVER])
    return from_wide(Y, G)


@pytest.fixture
def panel4():
    return staggered_panel(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
