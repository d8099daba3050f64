"""Sensitivity control and numeric Renyi-divergence accounting.

Per-sample gradients are clipped as one concatenated vector per sample, so
the L2 sensitivity of the summed batch gradient is exactly the clipping
threshold.  Privacy loss of the subsampled Gaussian mechanism is tracked at
a fixed grid of Renyi orders and converted to (epsilon, delta) by the usual
tail bound; composition over steps is linear in the per-order divergences.
"""

import math

import numpy as np

from .errors import CalibrationError, ConfigError
from .seeding import seeded_rng

__all__ = [
    "DEFAULT_ORDERS",
    "clip_per_sample",
    "gaussian_perturb",
    "rdp_step",
    "compose_epsilon",
    "calibrate_sigma",
    "RdpAccountant",
]

# Integer orders 2..64 give the useful range for sigma around 0.5..10;
# the fractional and large orders tighten the two ends.  Extending the grid
# can only decrease epsilon (it is a min over orders).
DEFAULT_ORDERS = (1.25, 1.5, 1.75) + tuple(range(2, 65)) + (96.0, 128.0, 256.0)


def clip_per_sample(vectors, clip_norm):
    """Clip each row of ``vectors`` to L2 norm at most ``clip_norm``.

    Returns the clipped array and the pre-clip norms.  Rows already within
    the threshold are returned unchanged (not rescaled).
    """
    if clip_norm <= 0:
        raise ConfigError("clipping threshold must be positive")
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("expected one row per sample")
    norms = np.linalg.norm(v, axis=1)
    scale = np.ones_like(norms)
    over = norms > clip_norm
    scale[over] = clip_norm / norms[over]
    return v * scale[:, None], norms


def gaussian_perturb(aggregate, noise_multiplier, clip_norm, rng):
    """Add iid N(0, (noise_multiplier * clip_norm)^2) noise to an array.

    ``rng`` is either a Generator or an integer seed; a fixed seed
    reproduces the same noise bit-exactly.
    """
    if noise_multiplier <= 0 or clip_norm <= 0:
        raise ConfigError("noise multiplier and clipping threshold must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = seeded_rng(rng)
    aggregate = np.asarray(aggregate, dtype=np.float64)
    return aggregate + rng.normal(0.0, noise_multiplier * clip_norm, size=aggregate.shape)


def _log_binom(n, k):
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _rdp_int_order(q, sigma, alpha):
    """Renyi divergence of the subsampled Gaussian at an integer order.

    log-space evaluation of
    (1/(alpha-1)) * log( sum_j  C(alpha,j) (1-q)^(alpha-j) q^j e^{j(j-1)/(2 sigma^2)} ).
    """
    log_terms = np.empty(alpha + 1)
    for j in range(alpha + 1):
        log_term = _log_binom(alpha, j) + j * (j - 1) / (2.0 * sigma ** 2)
        if j > 0:
            log_term += j * math.log(q)
        if j < alpha:
            log_term += (alpha - j) * math.log1p(-q)
        log_terms[j] = log_term
    return float(np.logaddexp.reduce(log_terms)) / (alpha - 1)


def rdp_step(q, sigma, alpha):
    """Per-step Renyi divergence of the subsampled Gaussian mechanism.

    Args:
        q: sampling probability in (0, 1].
        sigma: noise multiplier (noise std over L2 sensitivity).
        alpha: Renyi order, > 1.  Non-integer orders are bounded by the worse
            of the two bracketing integer orders.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError("sampling probability must lie in (0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if alpha <= 1:
        raise ValueError("Renyi order must exceed 1")
    if q == 1.0:
        return alpha / (2.0 * sigma ** 2)
    if float(alpha).is_integer():
        return _rdp_int_order(q, sigma, int(alpha))
    lo = math.floor(alpha)
    hi = math.ceil(alpha)
    values = [_rdp_int_order(q, sigma, hi)]
    if lo >= 2:
        values.append(_rdp_int_order(q, sigma, lo))
    return max(values)


def compose_epsilon(q, sigma, steps, delta, orders=DEFAULT_ORDERS):
    """(epsilon, best order) after ``steps`` compositions at budget ``delta``."""
    if steps < 1:
        raise ValueError("epsilon is undefined before the first step")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    best_eps = math.inf
    best_order = None
    for alpha in orders:
        eps = steps * rdp_step(q, sigma, alpha) + math.log(1.0 / delta) / (alpha - 1)
        if eps < best_eps:
            best_eps = eps
            best_order = alpha
    if not math.isfinite(best_eps):
        raise OverflowError("no order in the grid yields a finite epsilon")
    return best_eps, best_order


def calibrate_sigma(q, steps, target_epsilon, delta, sigma_max=1e3, max_iter=200):
    """Smallest noise multiplier whose epsilon lands just under the target.

    Bisects sigma until epsilon falls within
    ``[target * (1 - 1e-3), target]``.  Raises CalibrationError if even
    ``sigma_max`` cannot reach the target.
    """
    if target_epsilon <= 0:
        raise ConfigError("target epsilon must be positive")
    window_lo = target_epsilon * (1.0 - 1e-3)

    def eps_at(sigma):
        return compose_epsilon(q, sigma, steps, delta)[0]

    if eps_at(sigma_max) > target_epsilon:
        raise CalibrationError(
            f"epsilon {target_epsilon} unreachable with sigma <= {sigma_max}")
    lo = min(1.0, sigma_max)
    for _ in range(200):
        if eps_at(lo) > target_epsilon:
            break
        lo /= 2.0
    else:
        raise CalibrationError("could not bracket the target epsilon from above")
    hi = sigma_max
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        eps = eps_at(mid)
        if window_lo <= eps <= target_epsilon:
            return mid
        if eps > target_epsilon:
            lo = mid
        else:
            hi = mid
    return hi


class RdpAccountant:
    """Tracks Renyi divergences across steps of one (q, sigma) mechanism.

    The per-step divergence at every order is fixed, so the accumulated
    ledger is ``steps`` times the per-step vector; ``epsilon`` converts it
    via the tail bound, minimizing over the order grid.
    """

    def __init__(self, q, sigma, orders=DEFAULT_ORDERS):
        if not 0.0 < q <= 1.0:
            raise ConfigError("sampling probability must lie in (0, 1]")
        if sigma <= 0:
            raise ConfigError("sigma must be positive")
        self.q = float(q)
        self.sigma = float(sigma)
        self.orders = np.asarray(orders, dtype=np.float64)
        if (self.orders <= 1).any():
            raise ConfigError("all Renyi orders must exceed 1")
        self.steps = 0
        self._per_step = np.array([rdp_step(q, sigma, a) for a in self.orders])

    @property
    def rdp(self):
        """Accumulated Renyi divergence at every order."""
        return self.steps * self._per_step

    def step(self, n=1):
        if n < 0:
            raise ValueError("cannot step backwards")
        self.steps += int(n)

    def epsilon(self, delta):
        if self.steps < 1:
            raise ValueError("epsilon is undefined before the first step")
        if not 0.0 < delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        eps = self.rdp + math.log(1.0 / delta) / (self.orders - 1.0)
        best = float(eps.min())
        if not math.isfinite(best):
            raise OverflowError("no order in the grid yields a finite epsilon")
        return best

    def save(self, path):
        """Write the ledger as plain key=value text (audit / resume)."""
        lines = [
            "# rgp accountant ledger v1",
            f"q={self.q!r}",
            f"sigma={self.sigma!r}",
            f"steps={self.steps}",
            "orders=" + ",".join(repr(float(a)) for a in self.orders),
            "rdp=" + ",".join(repr(float(x)) for x in self.rdp),
        ]
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        """Rebuild an accountant from a ledger, verifying internal consistency."""
        fields = {}
        with open(path, encoding="ascii") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                fields[key] = value
        try:
            orders = tuple(float(x) for x in fields["orders"].split(","))
            acct = cls(float(fields["q"]), float(fields["sigma"]), orders=orders)
            acct.steps = int(fields["steps"])
            recorded = np.array([float(x) for x in fields["rdp"].split(",")])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"malformed accountant ledger {path}: {exc}") from exc
        if recorded.shape != acct.rdp.shape or not np.allclose(recorded, acct.rdp, rtol=1e-12, atol=0):
            raise ConfigError(f"ledger {path} is inconsistent with its parameters")
        return acct
