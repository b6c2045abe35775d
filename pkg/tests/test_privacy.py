"""Accountant tests.

The conversion rule and the per-order costs both have independent oracles
here: dense-grid minimization for epsilon, the closed form for q = 1, and
brute-force monotonicity sweeps for everything the contract orders.
"""

import math

import numpy as np
import pytest

from dpmemfit.errors import CalibrationError, ConfigError
from dpmemfit.privacy import (
    DEFAULT_ORDERS,
    AccountantState,
    PrivacyParams,
    calibrate_sigma,
    epsilon_from_accountant,
    rdp_subsampled_gaussian,
    spent_epsilon,
)

Q_CAL = 32 / 50000


# ---------------------------------------------------------------------------
# per-step RDP
# ---------------------------------------------------------------------------


def test_full_batch_closed_form_is_exact():
    orders = np.asarray(DEFAULT_ORDERS)
    got = rdp_subsampled_gaussian(1.0, 2.0, orders)
    expected = orders / 8.0
    assert np.max(np.abs(got - expected)) < 1e-12
    assert rdp_subsampled_gaussian(1.0, 2.0, [8.0])[0] == pytest.approx(1.0, abs=1e-12)


def test_rdp_vanishes_as_q_shrinks():
    vals = [rdp_subsampled_gaussian(q, 2.0, [8.0])[0] for q in (1e-1, 1e-2, 1e-3)]
    assert vals[0] > vals[1] > vals[2] > 0
    assert vals[2] < 1e-5


def test_rdp_strictly_decreasing_in_sigma():
    sigmas = [0.5, 1.0, 2.0, 4.0, 8.0]
    for q in (0.01, 0.3, 1.0):
        vals = [rdp_subsampled_gaussian(q, s, [8.0])[0] for s in sigmas]
        assert all(a > b for a, b in zip(vals, vals[1:])), (q, vals)


def test_rdp_never_exceeds_full_batch_value():
    orders = np.asarray(DEFAULT_ORDERS)
    for q in (1e-4, 1e-2, 0.1, 0.5, 0.9):
        for sigma in (0.4, 1.0, 3.0):
            sub = rdp_subsampled_gaussian(q, sigma, orders)
            full = orders / (2.0 * sigma * sigma)
            assert np.all(sub <= full + 1e-12), (q, sigma)
            assert np.all(sub >= 0.0)


def test_zero_noise_signals_infinite_cost():
    vals = rdp_subsampled_gaussian(0.5, 0.0, [2.0, 8.0])
    assert np.all(np.isinf(vals))


def test_rdp_input_validation():
    with pytest.raises(ConfigError):
        rdp_subsampled_gaussian(0.0, 1.0, [2.0])
    with pytest.raises(ConfigError):
        rdp_subsampled_gaussian(1.5, 1.0, [2.0])
    with pytest.raises(ConfigError):
        rdp_subsampled_gaussian(0.5, -1.0, [2.0])
    with pytest.raises(ConfigError):
        rdp_subsampled_gaussian(0.5, 1.0, [1.0])
    with pytest.raises(ConfigError):
        rdp_subsampled_gaussian(0.5, 1.0, [])


# ---------------------------------------------------------------------------
# composition and conversion
# ---------------------------------------------------------------------------


def test_composition_is_exactly_linear_in_steps():
    one = AccountantState()
    one.record(Q_CAL, 1.1)
    many = AccountantState()
    many.record(Q_CAL, 1.1, steps=137)
    assert np.array_equal(many.rdp_values, 137 * one.rdp_values)
    assert many.steps_recorded == 137

    # step-by-step recording counts rather than re-adds, so it agrees too
    loop = AccountantState()
    for _ in range(137):
        loop.record(Q_CAL, 1.1)
    assert np.array_equal(loop.rdp_values, many.rdp_values)


def test_mixed_signatures_fold_correctly():
    st = AccountantState()
    st.record(0.01, 1.0, steps=10)
    st.record(0.02, 2.0, steps=5)
    expected = 10 * rdp_subsampled_gaussian(0.01, 1.0, st.rdp_orders) + 5 * rdp_subsampled_gaussian(
        0.02, 2.0, st.rdp_orders
    )
    assert np.allclose(st.rdp_values, expected, rtol=1e-15)
    assert st.steps_recorded == 15


def test_epsilon_matches_dense_grid_oracle():
    # one full-batch step, sigma 2, delta 1e-5: the independent oracle is
    # a direct minimization of alpha/8 + log(1e5)/(alpha - 1)
    res = spent_epsilon(1.0, 2.0, 1, 1e-5)
    orders = np.asarray(DEFAULT_ORDERS)
    oracle_on_grid = float(np.min(orders / 8.0 + math.log(1e5) / (orders - 1.0)))
    assert res.epsilon == pytest.approx(oracle_on_grid, rel=1e-12)
    dense = np.linspace(1.0001, 500.0, 1_000_000)
    continuous = float(np.min(dense / 8.0 + math.log(1e5) / (dense - 1.0)))
    assert res.epsilon >= continuous  # a grid can only be coarser
    assert res.epsilon == pytest.approx(continuous, abs=2e-4)
    assert res.order == pytest.approx(10.5)


def test_zero_steps_epsilon_shrinks_with_the_grid():
    small = epsilon_from_accountant(AccountantState(orders=[2.0, 64.0]), 1e-5)
    assert small.epsilon == pytest.approx(math.log(1e5) / 63.0)
    wide = epsilon_from_accountant(AccountantState(orders=[2.0, 2e7]), 1e-5)
    assert wide.epsilon <= 1e-6


def test_epsilon_monotone_in_steps_sigma_q():
    eps_steps = [spent_epsilon(Q_CAL, 1.0, n, 2e-5).epsilon for n in (100, 200, 400, 800)]
    assert all(a < b for a, b in zip(eps_steps, eps_steps[1:]))
    assert spent_epsilon(Q_CAL, 1.0, 200, 2e-5).epsilon > 0

    eps_sigma = [spent_epsilon(Q_CAL, s, 1000, 2e-5).epsilon for s in (0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(eps_sigma, eps_sigma[1:]))

    eps_q = [spent_epsilon(q, 1.0, 1000, 2e-5).epsilon for q in (1e-4, 1e-3, 1e-2, 1e-1)]
    assert all(a < b for a, b in zip(eps_q, eps_q[1:]))


def test_doubling_steps_strictly_increases_epsilon():
    a = spent_epsilon(Q_CAL, 1.2, 5000, 2e-5).epsilon
    b = spent_epsilon(Q_CAL, 1.2, 10000, 2e-5).epsilon
    assert b > a


def test_accountant_validation():
    with pytest.raises(ConfigError):
        AccountantState(orders=[])
    with pytest.raises(ConfigError):
        AccountantState(orders=[0.5, 2.0])
    st = AccountantState()
    with pytest.raises(ConfigError):
        st.record(Q_CAL, 1.0, steps=0)
    with pytest.raises(ConfigError):
        epsilon_from_accountant(st, delta=1.5)


def test_zero_sigma_recording_yields_infinite_epsilon():
    st = AccountantState()
    st.record(Q_CAL, 0.0)
    assert math.isinf(epsilon_from_accountant(st, 2e-5).epsilon)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def test_calibration_round_trips_into_the_window():
    for target in (1.6, 8.0):
        sigma = calibrate_sigma(target, 2e-5, Q_CAL, 10000)
        eps = spent_epsilon(Q_CAL, sigma, 10000, 2e-5).epsilon
        assert 0.99 * target <= eps <= target, (target, sigma, eps)


def test_infinite_target_short_circuits_to_zero_noise():
    assert calibrate_sigma(math.inf, 2e-5, Q_CAL, 10000) == 0.0


def test_tighter_target_needs_more_noise():
    s_tight = calibrate_sigma(1.6, 2e-5, Q_CAL, 10000)
    s_loose = calibrate_sigma(8.0, 2e-5, Q_CAL, 10000)
    assert s_tight > s_loose


def test_calibration_error_when_bracket_cannot_reach():
    # full-batch with a million steps: even sigma = 50 spends far too much
    with pytest.raises(CalibrationError):
        calibrate_sigma(0.5, 1e-5, 1.0, 1_000_000)
    # almost no mechanism: even sigma = 0.3 is already far below the window
    with pytest.raises(CalibrationError):
        calibrate_sigma(8.0, 1e-5, 1e-5, 1)
    with pytest.raises(ConfigError):
        calibrate_sigma(-1.0, 1e-5, Q_CAL, 100)


# ---------------------------------------------------------------------------
# params container
# ---------------------------------------------------------------------------


def test_privacy_params_validation():
    PrivacyParams(epsilon_target=8.0, delta=2e-5, noise_multiplier=1.0,
                  clip_bound=1.0, sampling_rate=Q_CAL, steps=100).validate()
    PrivacyParams(epsilon_target=math.inf, noise_multiplier=0.0,
                  clip_bound=math.inf).validate()
    with pytest.raises(ConfigError):
        PrivacyParams(delta=0.0).validate()
    with pytest.raises(ConfigError):
        PrivacyParams(delta=1.0).validate()
    with pytest.raises(ConfigError):
        PrivacyParams(noise_multiplier=-0.1).validate()
    with pytest.raises(ConfigError):
        PrivacyParams(clip_bound=0.0).validate()
    with pytest.raises(ConfigError):
        PrivacyParams(sampling_rate=0.0).validate()
    with pytest.raises(ConfigError):
        PrivacyParams(sampling_rate=1.5).validate()
    with pytest.raises(ConfigError):
        PrivacyParams(steps=0).validate()
    with pytest.raises(ConfigError):
        # finite target but no noise is a contradiction
        PrivacyParams(epsilon_target=8.0, noise_multiplier=0.0).validate()
    with pytest.raises(ConfigError):
        # infinite clip bound cannot be paired with real noise
        PrivacyParams(clip_bound=math.inf, noise_multiplier=1.0).validate()


def test_privacy_params_delta_warning():
    p = PrivacyParams(epsilon_target=8.0, delta=0.5, noise_multiplier=1.0,
                      clip_bound=1.0, sampling_rate=0.01, steps=10)
    with pytest.warns(UserWarning):
        p.validate(dataset_size=50000)


def test_privacy_params_serialization():
    d = PrivacyParams(epsilon_target=math.inf, clip_bound=math.inf).to_dict()
    assert d["epsilon_target"] == "inf" and d["clip_bound"] == "inf"
    d2 = PrivacyParams(epsilon_target=8.0).to_dict()
    assert d2["epsilon_target"] == 8.0
