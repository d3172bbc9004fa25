import logging
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.integrate import solve_ivp

import app.services.effective_three_level as three_level
from app.errors import DegenerateSystemError, DomainError
from app.services.effective_three_level import (Eq1Table, RateParams, eq1_table, estimate_pump_rate,
                                                exact_normalized_fluorescence, normalized_fluorescence_eq1,
                                                rate_matrix, steady_populations)

GAMMA1 = 2 * np.pi * 21e6
GAMMA2 = 2 * np.pi * 1.4e6


def _rates(**overrides):
    values = dict(gamma1=GAMMA1, gamma2=GAMMA2, gamma2_prime=4 * GAMMA2, gamma3=2 * np.pi * 0.5e6,
                  pump=2 * np.pi * 8e6)
    values.update(overrides)
    return RateParams(**values)


def test_populations_sum_to_one_and_are_stationary():
    r = _rates()
    for use_prime in (False, True):
        n = np.array(steady_populations(r, use_prime))
        assert n.sum() == pytest.approx(1.0, abs=1e-15)
        assert np.all((n >= 0) & (n <= 1))
        assert np.max(np.abs(rate_matrix(r, use_prime) @ n)) < 1e-9 * GAMMA1


def test_no_pumping_leaves_everything_in_s():
    assert steady_populations(_rates(pump=0.0)) == pytest.approx((1.0, 0.0, 0.0), abs=1e-12)


def test_closed_d_channel_is_a_two_level_balance():
    r = _rates(gamma2=0.0, gamma2_prime=0.0)
    n_s, n_p, n_d = steady_populations(r)
    assert n_d == pytest.approx(0.0, abs=1e-12)
    assert n_p / n_s == pytest.approx(r.pump / (r.gamma1 + r.pump), rel=1e-12)


def test_populations_match_long_time_integration():
    r = _rates()
    m = rate_matrix(r, use_prime=True)
    sol = solve_ivp(lambda _t, n: m @ n, (0.0, 1e-3), [1.0, 0.0, 0.0], method="LSODA", rtol=1e-12, atol=1e-14)
    assert np.allclose(sol.y[:, -1], steady_populations(r, use_prime=True), atol=1e-10)


def test_all_zero_rates_are_degenerate():
    with pytest.raises(DegenerateSystemError):
        steady_populations(RateParams(0.0, 0.0, 0.0, 0.0, 0.0))


@pytest.mark.parametrize("rates", [
    dict(gamma3=0.0),
    dict(gamma1=1.3e8, gamma2=1e7, gamma2_prime=4e7, gamma3=0.0, pump=5e7),
])
def test_absorbing_d_state_has_no_fluorescence_ratio(rates):
    with pytest.raises(DegenerateSystemError):
        exact_normalized_fluorescence(_rates(**rates))


def test_rate_params_validation_and_ratios(caplog):
    r = _rates()
    assert r.v == pytest.approx(0.25)
    assert r.w == pytest.approx(2 * np.pi * 0.5e6 / (4 * GAMMA2))
    with pytest.raises(ValueError):
        _rates(gamma3=-1.0)
    with pytest.raises(ValueError):
        _rates(pump=float("inf"))
    with caplog.at_level(logging.WARNING):
        _rates(gamma2_prime=0.5 * GAMMA2)
    assert "below gamma2" in caplog.text


@pytest.mark.parametrize("w", [0.0, 0.1, 1.0, 10.0])
def test_eq1_without_cavity_effect_is_one(w):
    assert normalized_fluorescence_eq1(1.0, w, GAMMA1, GAMMA1) == 1.0


def test_eq1_complete_suppression_limit():
    assert normalized_fluorescence_eq1(1e-12, 0.0, GAMMA1, GAMMA1) == pytest.approx(0.0, abs=1e-11)
    assert normalized_fluorescence_eq1(0.3, 0.0, GAMMA1, GAMMA1) == pytest.approx(0.3)


@pytest.mark.parametrize("v, w, pump", [(0.5, 0.1, 0.0), (0.0, 0.1, 1.0), (1.2, 0.1, 1.0), (0.5, -0.1, 1.0)])
def test_eq1_domain(v, w, pump):
    with pytest.raises(DomainError):
        normalized_fluorescence_eq1(v, w, GAMMA1, pump)


def test_eq1_is_monotone_in_v_and_w():
    table = eq1_table(np.linspace(0.1, 1.0, 10), np.linspace(0.0, 2.0, 10), GAMMA1, 0.5 * GAMMA1)
    assert np.all(np.diff(table.values, axis=0) > 0)
    assert np.all(np.diff(table.values[:-1], axis=1) > 0)
    assert np.allclose(table.values[-1], 1.0)


def test_eq1_agrees_with_rate_equations_in_its_regime():
    gamma2 = 2 * np.pi * 0.1e6
    for pump in (0.5 * GAMMA1, GAMMA1, 3 * GAMMA1):
        for v in (0.2, 0.5, 0.8):
            for w in (0.05, 0.3, 1.0):
                r = RateParams(GAMMA1, gamma2, gamma2 / v, w * gamma2 / v, pump)
                approx = normalized_fluorescence_eq1(v, w, GAMMA1, pump)
                assert approx == pytest.approx(exact_normalized_fluorescence(r), rel=0.02)


def test_eq1_table_layout():
    table = eq1_table([0.2, 0.5], [0.0, 0.1, 1.0], GAMMA1, GAMMA1)
    assert isinstance(table, Eq1Table)
    assert table.values.shape == (2, 3)
    assert table.values[1, 0] == pytest.approx(0.5)


def test_pump_rate_from_the_cavity_free_steady_state(reference):
    pump, (n_s, n_p, n_d) = estimate_pump_rate(reference)
    assert pump > 0
    assert n_s > n_p > 0
    assert n_s + n_p + n_d <= 1.0 + 1e-12
    assert pump * n_s == pytest.approx((reference.decay.total_p12 + pump) * n_p, rel=1e-9)


def test_no_repumper_means_no_gamma3(reference):
    dark = replace(reference, l850=replace(reference.l850, rabi=0.0), l854=replace(reference.l854, rabi=0.0))
    assert three_level._repump_rate(dark) == 0.0


def test_effective_rates_from_full_model(reference, monkeypatch):
    monkeypatch.setattr(three_level, "shelving_transient",
                        lambda p, cavity_on=True, settings=None: SimpleNamespace(tau_fit=300e-9))
    rates = three_level.effective_rates_from_full(reference)
    _, (n_s, n_p, _) = estimate_pump_rate(reference)
    assert rates.gamma1 == reference.decay.p12_s12
    assert rates.gamma2 == reference.decay.p12_d32
    assert rates.gamma3 > 0
    assert rates.gamma2_prime == pytest.approx(1.0 / (300e-9 * n_p / (n_s + n_p)), rel=1e-12)
