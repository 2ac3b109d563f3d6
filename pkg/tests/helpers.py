"""Small builders shared by the test modules."""

import numpy as np

from dmimo_adv.core import FeatureStats
from dmimo_adv.nn import init_mlp


def random_beta(rng, shape, lo_db=-120.0, hi_db=-60.0):
    return 10.0 ** (rng.uniform(lo_db, hi_db, size=shape) / 10.0)


def small_model(m, k, hidden=(8, 6), seed=0, stats=None):
    model = init_mlp(m * k, list(hidden), m * k, seed=seed)
    model.feature_stats = stats or FeatureStats(np.full(m * k, -90.0), np.full(m * k, 15.0))
    model.grid = (m, k)
    return model
