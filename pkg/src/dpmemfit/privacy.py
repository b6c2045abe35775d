"""Rényi-DP accounting for the subsampled Gaussian mechanism.

One training step with sampling rate q and noise multiplier σ_n costs a
vector of Rényi divergences, one per order α. Steps compose by addition;
the (ε, δ) guarantee is the minimum over orders of

    ε(α) = rdp(α) + log(1/δ) / (α − 1).

The per-step values follow the standard subsampled-Gaussian bound: a
closed-form binomial sum at integer orders, the Gaussian-CDF series at
fractional orders, both evaluated in log space. Subsampling never costs
more than the full-batch mechanism, so every value is capped at the q = 1
closed form α/(2σ_n²).

Accounting assumes Poisson sampling. The trainer draws shuffled fixed-size
batches instead; run reports state this mismatch prominently because the
guarantee is only as good as the sampling story.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import CalibrationError, ConfigError, StateError

# Default order grid: fine steps through the practical range, two coarse
# outposts for very-low-cost regimes.
DEFAULT_ORDERS = tuple(np.arange(1.25, 64.0 + 1e-9, 0.25)) + (128.0, 256.0)

SIGMA_BRACKET = (0.3, 50.0)


@dataclass
class PrivacyParams:
    """Privacy knobs for one training run.

    epsilon_target may be math.inf, which means no noise (σ_n = 0) and no
    meaningful guarantee; that pairing is legitimate. A zero noise
    multiplier with a finite target is a contradiction and is rejected.
    """

    epsilon_target: float = math.inf
    delta: float = 1e-5
    noise_multiplier: float = 0.0
    clip_bound: float = 1.0
    sampling_rate: float = 1.0
    steps: int = 1

    def validate(self, dataset_size: int | None = None) -> None:
        if not (self.epsilon_target > 0):
            raise ConfigError(f"epsilon_target must be positive, got {self.epsilon_target}")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.noise_multiplier < 0:
            raise ConfigError(f"noise multiplier must be non-negative, got {self.noise_multiplier}")
        if not (self.clip_bound > 0):
            raise ConfigError(f"clip bound must be positive, got {self.clip_bound}")
        if math.isinf(self.clip_bound) and self.noise_multiplier > 0:
            raise ConfigError("infinite clip bound with positive noise: noise scale would be infinite")
        if not (0.0 < self.sampling_rate <= 1.0):
            raise ConfigError(f"sampling rate must lie in (0, 1], got {self.sampling_rate}")
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}")
        if math.isfinite(self.epsilon_target) and self.noise_multiplier == 0:
            raise ConfigError("finite epsilon target requires a positive noise multiplier")
        if dataset_size is not None and self.delta > 1e3 / dataset_size:
            warnings.warn(
                f"delta={self.delta} is large for a dataset of {dataset_size} examples",
                stacklevel=2,
            )

    def to_dict(self) -> dict:
        return {
            "epsilon_target": self.epsilon_target if math.isfinite(self.epsilon_target) else "inf",
            "delta": self.delta,
            "noise_multiplier": self.noise_multiplier,
            "clip_bound": self.clip_bound if math.isfinite(self.clip_bound) else "inf",
            "sampling_rate": self.sampling_rate,
            "steps": self.steps,
        }


# ---------------------------------------------------------------------------
# per-step RDP of the subsampled Gaussian mechanism
# ---------------------------------------------------------------------------


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a > b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    # log(exp(a) - exp(b)) for a >= b
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    if a < b:
        raise ValueError("log_sub of a negative quantity")
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    # erfc(x) = 2 Φ(−x√2); scipy's log_ndtr is stable over the whole line
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _log_binom(n: float, k: int) -> float:
    return float(special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1))


def _rdp_int_order(q: float, sigma: float, alpha: int) -> float:
    # log Σ_{j=0..α} C(α,j) (1−q)^{α−j} q^j exp(j(j−1)/2σ²), then /(α−1)
    terms = [
        _log_binom(alpha, j)
        + j * math.log(q)
        + (alpha - j) * math.log1p(-q)
        + (j * j - j) / (2.0 * sigma * sigma)
        for j in range(alpha + 1)
    ]
    return float(special.logsumexp(terms)) / (alpha - 1)


def _rdp_frac_order(q: float, sigma: float, alpha: float) -> float:
    # fractional-order bound via the split integral over the two Gaussians;
    # the generalized binomial series alternates in sign once i exceeds α
    log_a0 = log_a1 = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        if coef == 0.0:
            break
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 and i > alpha:
            break
    return _log_add(log_a0, log_a1) / (alpha - 1)


def rdp_subsampled_gaussian(q: float, sigma: float, orders) -> np.ndarray:
    """Per-order Rényi cost of one subsampled Gaussian step.

    σ_n = 0 returns +inf for every order (no noise, no bound); the caller
    maps that to ε = ∞.
    """
    orders = np.asarray(orders, dtype=float)
    if orders.ndim != 1 or orders.size == 0:
        raise ConfigError("orders must be a non-empty 1-D grid")
    if np.any(orders <= 1.0):
        raise ConfigError("every Rényi order must exceed 1")
    if not (0.0 < q <= 1.0):
        raise ConfigError(f"sampling rate must lie in (0, 1], got {q}")
    if sigma < 0:
        raise ConfigError(f"noise multiplier must be non-negative, got {sigma}")
    if sigma == 0.0:
        return np.full(orders.shape, math.inf)
    gauss = orders / (2.0 * sigma * sigma)  # q = 1 closed form
    if q == 1.0:
        return gauss
    out = np.empty_like(gauss)
    for k, alpha in enumerate(orders):
        a_int = round(alpha)
        if abs(alpha - a_int) < 1e-12 and a_int >= 2:
            val = _rdp_int_order(q, sigma, int(a_int))
        else:
            val = _rdp_frac_order(q, sigma, float(alpha))
        # subsampling can only help; the series bound may exceed the
        # full-batch value at large α·q, where the closed form is tighter
        out[k] = min(val, gauss[k])
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# composition and conversion
# ---------------------------------------------------------------------------


class AccountantState:
    """Accumulated Rényi costs over a run.

    Identical steps are counted, not re-added, so k equal steps yield
    exactly k times one step's values (a single multiply, no drift).
    """

    def __init__(self, orders=DEFAULT_ORDERS):
        orders = np.asarray(orders, dtype=float)
        if orders.size == 0:
            raise ConfigError("accountant needs at least one Rényi order")
        if np.any(orders <= 1.0):
            raise ConfigError("every Rényi order must exceed 1")
        self.rdp_orders = orders
        self.steps_recorded = 0
        self._base = np.zeros_like(orders)
        self._per_step = None
        self._per_step_key = None
        self._per_step_count = 0

    @property
    def rdp_values(self) -> np.ndarray:
        if self._per_step is None or self._per_step_count == 0:
            return self._base.copy()
        return self._base + self._per_step_count * self._per_step

    def record(self, q: float, sigma: float, steps: int = 1) -> None:
        if steps < 1:
            raise ConfigError(f"cannot record {steps} steps")
        key = (float(q), float(sigma))
        if key != self._per_step_key:
            if self._per_step is not None and self._per_step_count:
                self._base = self._base + self._per_step_count * self._per_step
            self._per_step = rdp_subsampled_gaussian(q, sigma, self.rdp_orders)
            self._per_step_key = key
            self._per_step_count = 0
        self._per_step_count += steps
        self.steps_recorded += steps

    def to_dict(self) -> dict:
        vals = self.rdp_values
        return {
            "orders": self.rdp_orders.tolist(),
            "rdp_values": [v if math.isfinite(v) else "inf" for v in vals.tolist()],
            "steps_recorded": self.steps_recorded,
        }


@dataclass
class EpsilonResult:
    epsilon: float
    order: float

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon if math.isfinite(self.epsilon) else "inf",
            "order": self.order,
        }


def epsilon_from_accountant(state: AccountantState, delta: float) -> EpsilonResult:
    """ε = min over the grid of rdp(α) + log(1/δ)/(α − 1), with its argmin."""
    if not (0.0 < delta < 1.0):
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    orders = state.rdp_orders
    if orders.size == 0:
        raise StateError("accountant has no Rényi orders")
    eps = state.rdp_values + math.log(1.0 / delta) / (orders - 1.0)
    k = int(np.argmin(eps))
    return EpsilonResult(epsilon=float(eps[k]), order=float(orders[k]))


def spent_epsilon(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> EpsilonResult:
    """ε after `steps` identical subsampled Gaussian steps."""
    st = AccountantState(orders)
    st.record(q, sigma, steps=steps)
    return epsilon_from_accountant(st, delta)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def calibrate_sigma(
    epsilon_target: float,
    delta: float,
    q: float,
    steps: int,
    orders=DEFAULT_ORDERS,
    bracket: tuple[float, float] = SIGMA_BRACKET,
) -> float:
    """Smallest practical σ_n whose recomputed ε lands in
    [0.99·ε_target, ε_target]. Errs private: never exceeds the target.
    """
    if math.isinf(epsilon_target):
        return 0.0
    if not (epsilon_target > 0):
        raise ConfigError(f"epsilon target must be positive, got {epsilon_target}")
    lo, hi = bracket
    if not (0 < lo < hi):
        raise ConfigError(f"invalid sigma bracket {bracket}")

    def eps_at(sigma: float) -> float:
        return spent_epsilon(q, sigma, steps, delta, orders).epsilon

    eps_lo, eps_hi = eps_at(lo), eps_at(hi)
    floor = 0.99 * epsilon_target
    if eps_hi > epsilon_target:
        raise CalibrationError(
            f"even sigma={hi} spends eps={eps_hi:.4g} > target {epsilon_target}; "
            f"bracket {bracket} cannot reach the window"
        )
    if eps_lo < floor:
        # epsilon is decreasing in sigma, so the whole bracket sits below
        # the window: the run would be more private than asked but can
        # never certify the requested target from inside the bracket
        raise CalibrationError(
            f"sigma bracket {bracket} spans eps [{eps_hi:.4g}, {eps_lo:.4g}] "
            f"which misses the window [{floor:.4g}, {epsilon_target:.4g}]"
        )
    if eps_lo <= epsilon_target:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        e = eps_at(mid)
        if e > epsilon_target:
            lo = mid
        else:
            hi = mid
            if e >= floor:
                return hi
    raise CalibrationError(
        f"bisection did not land in [{floor:.4g}, {epsilon_target:.4g}] "
        f"after 200 iterations (bracket {bracket})"
    )
