"""End-to-end runs against the measured numbers; minutes of CPU each.

Enabled with ION_CAVITY_SLOW_TESTS=1; ION_CAVITY_THREADS sets the worker count.
"""
import os
from dataclasses import replace

import numpy as np
import pytest

from app.errors import InversionError
from app.services.atom_cavity_model import MHZ, cooperativity, purcell_enhancement
from app.services.config import load_config
from app.services.effective_three_level import effective_rates_from_full
from app.services.experiments import (InversionSettings, calibrate_omega397, cavity_scan, invert_parameters,
                                      shelving_transient, simulate_observables, suppression_sweep)
from app.worker import resolve_threads

pytestmark = pytest.mark.skipif(os.getenv("ION_CAVITY_SLOW_TESTS") != "1",
                                reason="set ION_CAVITY_SLOW_TESTS=1 to run the end-to-end reproduction")


@pytest.fixture(scope="module")
def cfg():
    return load_config()


@pytest.fixture(scope="module")
def threads():
    return resolve_threads()


@pytest.fixture(scope="module")
def transients(cfg, threads):
    off = shelving_transient(cfg.system, cavity_on=False, settings=cfg.transient, threads=threads)
    on = shelving_transient(cfg.system, cavity_on=True, settings=cfg.transient, threads=threads)
    return off, on


@pytest.fixture(scope="module")
def spectra(cfg, threads):
    return cavity_scan(cfg.system, settings=cfg.scan, threads=threads)


def test_cooperativity(cfg):
    assert cooperativity(cfg.system) == pytest.approx(0.30, abs=0.03)


def test_shelving_without_cavity(transients):
    off, _ = transients
    assert off.tau_fit == pytest.approx(1246e-9, rel=0.15)


def test_shelving_with_cavity(transients):
    off, on = transients
    assert on.tau_fit == pytest.approx(292e-9, rel=0.15)
    assert purcell_enhancement(off.tau_fit, on.tau_fit) > 4


def test_emission_width_and_anticorrelation(cfg, spectra):
    cavity, uv = spectra
    assert cavity.hwhm == pytest.approx(10.3 * MHZ, rel=0.10)
    step = 2 * cfg.scan.span / (cfg.scan.points - 1)
    assert abs(cavity.detunings[np.argmax(cavity.values)] - uv.detunings[np.argmin(uv.values)]) <= step + 1.0
    assert abs(uv.values[0] - 1.0) < 0.02 and abs(uv.values[-1] - 1.0) < 0.02


def test_calibration_recovers_measured_rabi_frequency(cfg):
    omega = calibrate_omega397(cfg.system, cfg.tau_off_target, cfg.transient, bracket=cfg.omega_bracket)
    assert abs(omega - 18.2 * MHZ) < 2 * MHZ


def test_inversion_of_measured_observables(cfg, threads):
    result = invert_parameters(cfg.tau_on_measured, cfg.delta_measured, cfg.system, cfg.inversion, cfg.transient,
                               cfg.scan, threads=threads)
    assert 5.0 * MHZ <= result.g_bar <= 5.6 * MHZ
    assert 2.7 * MHZ <= result.sigma <= 3.5 * MHZ


def test_round_trip_inversion(cfg, threads):
    planted = replace(cfg.system, g_bar=4.0 * MHZ, sigma_inhom=2.0 * MHZ)
    tau_on, delta = simulate_observables(planted, cfg.transient, cfg.scan, cfg.inversion)
    grid = replace(cfg.inversion, g_min=3.0 * MHZ, g_max=5.0 * MHZ, g_points=11, sigma_min=1.0 * MHZ,
                   sigma_max=3.0 * MHZ, sigma_points=11)
    result = invert_parameters(tau_on, delta, planted, grid, cfg.transient, cfg.scan, threads=threads)
    assert result.g_bar == pytest.approx(4.0 * MHZ, abs=0.2 * MHZ)
    assert result.sigma == pytest.approx(2.0 * MHZ, abs=0.2 * MHZ)


def test_grid_without_crossing_fails(cfg, threads):
    grid = InversionSettings(g_min=7.0 * MHZ, g_max=8.0 * MHZ, g_points=3, sigma_min=5.0 * MHZ,
                             sigma_max=6.0 * MHZ, sigma_points=3, refine=False)
    with pytest.raises(InversionError):
        invert_parameters(cfg.tau_on_measured, cfg.delta_measured, cfg.system, grid, cfg.transient, cfg.scan,
                          threads=threads)


def test_suppression_sweep_reaches_the_measured_maximum(cfg, threads):
    sweep = suppression_sweep(cfg.system, cfg.delta_850, cfg.suppression_scan, threads=threads)
    best = sweep.best().suppression_with_393
    assert best >= 0.60
    assert best == pytest.approx(0.66, abs=0.06)
    for point in sweep.points:
        assert point.suppression_397_only >= point.suppression_with_393
    # suppression grows as the 850 nm detuning slows the repump
    assert sweep.points[-1].suppression_with_393 > sweep.points[0].suppression_with_393


def test_uncoupled_cavity_leaves_d32_rate_alone(cfg):
    rates = effective_rates_from_full(replace(cfg.system, g_bar=0.0), cfg.transient)
    assert rates.gamma2_prime == pytest.approx(rates.gamma2, rel=0.10)
