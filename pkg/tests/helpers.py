import numpy as np


def moment_bounds_ok(samples, mean, var, k=4.0):
    """True when the empirical mean and variance sit within k sampling sigmas."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = x.size
    m = x.mean()
    v = x.var(ddof=1)
    mu4 = np.mean((x - m) ** 4)
    se_mean = np.sqrt(var / n)
    se_var = np.sqrt(max(mu4 - v * v, 1e-300) / n)
    ok = abs(m - mean) <= k * se_mean and abs(v - var) <= k * se_var
    return ok, (m, mean, se_mean, v, var, se_var)


class OracleRestorer:
    """Test double for the restoration network: always returns the true y0."""

    def __init__(self, schedule, y0, sigma_e2=10.0):
        self.schedule = schedule
        self.y0 = np.asarray(y0, dtype=np.float64)
        self.sigma_e2 = sigma_e2
        self.calls = 0

    def restore(self, y_t, t):
        self.calls += 1
        return np.broadcast_to(self.y0, np.shape(y_t)).copy()


class OracleNoise:
    """Test double for the noise estimator: returns a fixed eps."""

    def __init__(self, schedule, eps, s2=0.8):
        self.schedule = schedule
        self.fixed = np.asarray(eps, dtype=np.float64)
        self.s2 = s2

    def eps(self, x_t, t):
        return self.fixed


class ImpliedNoise:
    """Test double returning the exact noise that maps x_t back to a known clean image."""

    def __init__(self, schedule, x_clean, s2=0.8):
        self.schedule = schedule
        self.x_clean = np.asarray(x_clean, dtype=np.float64)
        self.s2 = s2

    def eps(self, x_t, t):
        ab = self.schedule.alpha_bars[t]
        return (np.asarray(x_t) - np.sqrt(ab) * self.x_clean) / np.sqrt(1 - ab)
