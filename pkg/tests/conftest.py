import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hwfilter.fqi import FqiConfig, TransitionDataset, fit  # noqa: E402

# 1-D LQR-style MDP: x' = a x + b u, r = -x^2 - u^2.
LQR_A, LQR_B, LQR_GAMMA = 1.0, 0.5, 0.99
LQR_X, LQR_U = 2.0, 3.0


def lqr_dataset(N=2000, seed=0):
    """Uniform (x, u) samples, rejected unless x' stays inside the state range."""
    rng = np.random.default_rng(seed)
    X, U = [], []
    while len(X) < N:
        x, u = rng.uniform(-LQR_X, LQR_X), rng.uniform(-LQR_U, LQR_U)
        if abs(LQR_A * x + LQR_B * u) <= LQR_X:
            X.append(x)
            U.append(u)
    X, U = np.array(X)[:, None], np.array(U)[:, None]
    return TransitionDataset(X, U, -(X[:, 0] ** 2) - U[:, 0] ** 2, LQR_A * X + LQR_B * U)


def lqr_config(**kw):
    return FqiConfig(gamma=LQR_GAMMA, action_low=(-LQR_U,), action_high=(LQR_U,), **kw)


@pytest.fixture(scope="session")
def lqr_fit():
    data = lqr_dataset()
    t0 = time.perf_counter()
    result = fit(data, lqr_config())
    return data, result, time.perf_counter() - t0
