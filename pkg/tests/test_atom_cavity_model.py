from dataclasses import replace

import numpy as np
import pytest
from scipy.constants import hbar, physical_constants

from app.errors import ConfigurationError
from app.services.atom_cavity_model import (BASIS, GAUSS, MHZ, POL_PI, POL_SIGMA_MINUS, POL_SIGMA_PLUS, DecayRates,
                                            LaserParams, SystemParams, atomic_dipole_decay, build_collapse_ops,
                                            build_hamiltonian, cavity_emission_observable,
                                            check_cavity_configuration, cooperativity, frame_energy,
                                            purcell_enhancement, purcell_rate, uv_fluorescence_observable,
                                            zeeman_shift)
from app.services.experiments import build_liouvillian
from app.services.lindblad_solver import DensityMatrix, evolve, expect, reduce_to_atom, steady_state
from app.services.qops import KetIndex


def _atom_only(**kwargs):
    return SystemParams(cavity_modes=0, cavity_polarizations=(), **kwargs)


def test_basis_has_eighteen_sublevels():
    assert BASIS.dim == 18
    assert [BASIS.multiplicity(t) for t in ("S1/2", "P1/2", "D3/2", "P3/2", "D5/2")] == [2, 2, 4, 4, 6]


def test_dims_follow_modes_and_cutoff(reference):
    assert reference.dims == (18, 2, 2)
    assert reference.dim == 72
    assert replace(reference, fock_cutoff=2).dim == 18 * 9


def test_all_zero_parameters_give_zero_hamiltonian():
    h = build_hamiltonian(SystemParams())
    assert np.max(np.abs(h.dense())) == 0.0


def test_hamiltonian_is_hermitian(reference):
    h = build_hamiltonian(reference)
    assert h.hermiticity_error() < 1e-12 * reference.l397.rabi


def test_dressed_state_splitting_equals_rabi_frequency():
    omega = 10 * MHZ
    p = _atom_only(l397=LaserParams(omega, 0.0, POL_SIGMA_PLUS))
    h = build_hamiltonian(p).dense()
    idx = list(BASIS.indices("S1/2")) + list(BASIS.indices("P1/2"))
    evals = np.linalg.eigvalsh(h[np.ix_(idx, idx)])
    assert evals[-1] - evals[0] == pytest.approx(omega, rel=1e-12)


def test_raman_resonance_makes_bright_and_shelved_states_degenerate(reference):
    p = reference.with_detuning(reference.l397.detuning)
    assert frame_energy("S1/2", p) == 0.0
    assert frame_energy("D3/2", p) + p.delta_cav == pytest.approx(0.0, abs=1e-6)


def test_zeeman_shift_of_ground_state():
    level = BASIS.levels[BASIS.index("S1/2", 0.5)]
    mu_b_over_hbar = physical_constants["Bohr magneton"][0] / hbar
    expected = 2 * 0.5 * mu_b_over_hbar * 0.78 * GAUSS
    assert zeeman_shift(level, 0.78 * GAUSS) == pytest.approx(expected, rel=1e-9)


def test_no_decay_and_no_cavity_loss_gives_no_collapse_ops():
    p = SystemParams(decay=DecayRates(0.0, 0.0, 0.0, 0.0, 0.0), kappa=0.0)
    assert build_collapse_ops(p) == []


def test_decay_out_of_each_upper_sublevel_is_the_total_rate():
    p = _atom_only()
    rates = np.zeros(BASIS.dim)
    for c in build_collapse_ops(p):
        rates += np.real(np.diag((c.sparse.conj().T @ c.sparse).toarray()))
    for i in BASIS.indices("P1/2"):
        assert rates[i] == pytest.approx(p.decay.total_p12, rel=1e-12)
    for i in BASIS.indices("P3/2"):
        assert rates[i] == pytest.approx(p.decay.total_p32, rel=1e-12)


def test_branching_ratio_from_decay_only_evolution():
    p = _atom_only()
    rho0 = DensityMatrix.pure(BASIS.dim, BASIS.index("P1/2", 0.5))
    times = np.linspace(0.0, 300e-9, 61)
    final = evolve(rho0, build_liouvillian(p), times, method="expm")[-1].populations()
    shelved = sum(final[i] for i in BASIS.indices("D3/2"))
    expected = p.decay.p12_d32 / p.decay.total_p12
    assert shelved == pytest.approx(expected, rel=1e-6)


def test_cavity_emission_counts_photons(reference):
    op = cavity_emission_observable(reference)
    vacuum = DensityMatrix.pure(reference.dim, KetIndex(0, (0, 0)).flatten(18, 1))
    one_photon = DensityMatrix.pure(reference.dim, KetIndex(0, (0, 1)).flatten(18, 1))
    assert expect(op, vacuum) == 0
    assert expect(op, one_photon).real == pytest.approx(2 * reference.kappa)


def test_uv_observable_on_mixed_state(reference):
    rho = DensityMatrix.mixed(reference.dim)
    d = reference.decay
    with_393 = expect(uv_fluorescence_observable(reference, True), rho).real
    without = expect(uv_fluorescence_observable(reference, False), rho).real
    assert with_393 == pytest.approx(d.p12_s12 * 2 / 18 + d.p32_s12 * 4 / 18, rel=1e-12)
    assert without == pytest.approx(d.p12_s12 * 2 / 18, rel=1e-12)


def test_uv_observable_vanishes_in_d32(reference):
    rho = DensityMatrix.pure(reference.dim, KetIndex(BASIS.index("D3/2", 1.5), (0, 0)).flatten(18, 1))
    assert expect(uv_fluorescence_observable(reference, False), rho) == 0


def test_uncoupled_cavity_leaves_atom_alone(reference):
    two = replace(reference, g_bar=0.0)
    one = replace(two, cavity_modes=1, cavity_polarizations=(POL_SIGMA_PLUS,))
    rho_two = reduce_to_atom(steady_state(build_liouvillian(two)), BASIS.dim)
    rho_one = reduce_to_atom(steady_state(build_liouvillian(one)), BASIS.dim)
    assert np.max(np.abs(rho_two.entries - rho_one.entries)) < 1e-10
    photons = expect(cavity_emission_observable(two), steady_state(build_liouvillian(two))).real / (2 * two.kappa)
    assert abs(photons) < 1e-12


def test_cooperativity_of_reference_parameters(reference):
    assert cooperativity(reference) == pytest.approx(0.30, abs=0.03)
    assert atomic_dipole_decay(reference) == pytest.approx(0.5 * reference.decay.total_p12)
    assert purcell_rate(reference) == pytest.approx(2 * cooperativity(reference) * reference.decay.total_p12)


def test_cooperativity_needs_cavity_loss(reference):
    with pytest.raises(ConfigurationError):
        cooperativity(replace(reference, kappa=0.0))


@pytest.mark.parametrize("modes, polarizations", [
    (2, (POL_SIGMA_PLUS,)),
    (1, (POL_PI,)),
    (2, (POL_SIGMA_PLUS, POL_SIGMA_PLUS)),
])
def test_inconsistent_cavity_configuration_is_rejected(reference, modes, polarizations):
    p = replace(reference, cavity_modes=modes, cavity_polarizations=polarizations)
    with pytest.raises(ConfigurationError):
        check_cavity_configuration(p)
    with pytest.raises(ConfigurationError):
        build_hamiltonian(p)


def test_orthogonal_sigma_modes_are_accepted(reference):
    check_cavity_configuration(replace(reference, cavity_polarizations=(POL_SIGMA_MINUS, POL_SIGMA_PLUS)))


@pytest.mark.parametrize("kwargs", [
    {"rabi": -1.0},
    {"polarization": (1.0, 1.0, 0.0)},
])
def test_invalid_laser_parameters(kwargs):
    with pytest.raises(ConfigurationError):
        LaserParams(**kwargs)


def test_invalid_system_parameters():
    with pytest.raises(ConfigurationError):
        SystemParams(g_bar=-1.0)
    with pytest.raises(ConfigurationError):
        SystemParams(coupling_normalization="natural")
    with pytest.raises(ConfigurationError):
        SystemParams(fock_cutoff=0)


def test_purcell_enhancement():
    assert purcell_enhancement(1246e-9, 292e-9) == pytest.approx(4.267, rel=1e-3)
    with pytest.raises(ValueError):
        purcell_enhancement(0.0, 292e-9)


def test_transition_wavelengths():
    assert BASIS.transition_wavelength_nm("866") == pytest.approx(866.214)
    assert BASIS.transition_wavelength_nm("397") < BASIS.transition_wavelength_nm("850")


def _mirror_index():
    return np.array([BASIS.index(lv.term, -lv.mJ) for lv in BASIS.levels])


def _atomic_populations(rho, p):
    return reduce_to_atom(rho, BASIS.dim).populations() if p.cavity_modes else rho.populations()


def test_reversed_field_mirrors_the_steady_state(reference):
    up = steady_state(build_liouvillian(reference))
    down = steady_state(build_liouvillian(replace(reference, b_field=-reference.b_field)))
    pops_up = _atomic_populations(up, reference)
    pops_down = _atomic_populations(down, reference)
    assert np.allclose(pops_up, pops_down[_mirror_index()], atol=1e-10)
    # the field does break the m <-> -m symmetry on its own
    assert not np.allclose(pops_up, pops_up[_mirror_index()], atol=1e-6)


def test_zero_field_dynamics_keep_m_parity(reference):
    p = replace(reference, b_field=0.0)
    cavity_dim = p.dim // BASIS.dim
    rho0 = DensityMatrix.mixed(p.dim, [i * cavity_dim for i in BASIS.indices("S1/2")])
    states = evolve(rho0, build_liouvillian(p), np.linspace(0.0, 1e-6, 3), method="expm")
    for rho in states[1:]:
        pops = _atomic_populations(rho, p)
        assert pops[BASIS.indices("P1/2")].sum() > 1e-3
        assert np.allclose(pops, pops[_mirror_index()], atol=1e-10)
