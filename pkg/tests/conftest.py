import warnings

import numpy as np
import pytest

from slp_smpc.model import (ConstraintSpec, LinearGaussianSystem, ScenarioConfig, SimulationSettings,
                            StageCost, TerminalSettings, hvac_scenario)


def toy_scenario(p=0.8, N=3, b=(1.0, 1.0), x0=(0.8, -0.5), sigma=0.04, **sim):
    """Two states, one input, a state and an input chance constraint. Designs in about a second."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sys_ = LinearGaussianSystem([[0.5, 0.1], [0.0, 0.4]], [[1.0], [0.5]], sigma * np.eye(2))
        cons = ConstraintSpec([[1.0, 0.0], [0.0, 0.0]], [[0.0], [1.0]], list(b), [p, p])
    cost = StageCost(np.eye(2), [[0.1]], r=[0.5])
    settings = dict(rollouts=20, steps=6, seed=3)
    settings.update(sim)
    return ScenarioConfig(sys_, cons, cost, N, list(x0), SimulationSettings(**settings),
                          terminal=TerminalSettings(K=((0.0, 0.0),)), name="toy")


@pytest.fixture()
def isolated_cache(tmp_path_factory, monkeypatch):
    """A fresh, empty terminal-set cache for one test."""
    root = tmp_path_factory.mktemp("cache")
    monkeypatch.setenv("SLP_SMPC_CACHE_DIR", str(root))
    return root


@pytest.fixture(scope="session")
def toy():
    return toy_scenario()


@pytest.fixture(scope="session")
def toy_design(toy):
    from slp_smpc.simulate import Design
    return Design.for_scenario(toy, use_cache=False)


@pytest.fixture(scope="session")
def hvac():
    return hvac_scenario()


@pytest.fixture(scope="session")
def hvac_design(hvac):
    # reads the on-disk terminal-set cache; a cold cache costs a few minutes
    from slp_smpc.simulate import Design
    return Design.for_scenario(hvac)
