import numpy as np
import pytest


class AnalyticGaussianScore:
    """Exact score of x0 ~ N(mean, tau^2 I) under VE noising.

    Stands in for a trained model wherever orchestration, not learning,
    is under test.
    """

    def __init__(self, mean, tau, schedule):
        self.mean = mean
        self.tau = tau
        self.schedule = schedule

    def score(self, x, t):
        var = self.tau**2 + self.schedule.sigma[int(t)] ** 2
        return -(np.asarray(x, dtype=np.float64) - self.mean) / var
