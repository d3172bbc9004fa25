import logging
import math
import pathlib
import tempfile
from dataclasses import dataclass, replace
from typing import Callable, List, Tuple

import numpy as np

from app.errors import IonCavityError
from .atom_cavity_model import (BASIS, MHZ, TERMS, SystemParams, build_collapse_ops, build_hamiltonian,
                                cavity_emission_observable)
from .effective_three_level import RateParams, exact_normalized_fluorescence, normalized_fluorescence_eq1
from .experiments import ScanSettings, build_liouvillian, cavity_scan
from .lindblad_solver import assemble, expect, steady_state
from .qops import QOperator, clebsch_gordan, m_values
from .storage import emit_csv


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def racah_cg(j1: float, m1: float, j2: float, m2: float, J: float, M: float) -> float:
    """Clebsch-Gordan coefficient from the Racah sum, independent of sympy."""
    if abs(M - (m1 + m2)) > 1e-9 or J < abs(j1 - j2) or J > j1 + j2:
        return 0.0
    f = lambda x: math.factorial(int(round(x)))  # noqa: E731
    prefactor = math.sqrt((2 * J + 1) * f(J + j1 - j2) * f(J - j1 + j2) * f(j1 + j2 - J) / f(j1 + j2 + J + 1))
    prefactor *= math.sqrt(f(J + M) * f(J - M) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2))
    total = 0.0
    for k in range(int(round(j1 + j2 - J)) + 1):
        args = (k, j1 + j2 - J - k, j1 - m1 - k, j2 + m2 - k, J - j2 + m1 + k, J - j1 - m2 + k)
        if min(args) < -1e-9:
            continue
        total += (-1) ** k / np.prod([f(a) for a in args])
    return prefactor * total


def check_clebsch_gordan() -> CheckResult:
    worst_oracle = 0.0
    worst_ortho = 0.0
    pairs = {(TERMS[lo][1], TERMS[up][1]) for lo, up in (("S1/2", "P1/2"), ("D3/2", "P1/2"), ("S1/2", "P3/2"),
                                                           ("D3/2", "P3/2"), ("D5/2", "P3/2"))}
    for j1, j_up in sorted(pairs):
        for m1 in m_values(j1):
            for q in (-1, 0, 1):
                if abs(m1 + q) <= j_up:
                    worst_oracle = max(worst_oracle, abs(clebsch_gordan(j1, m1, 1, q, j_up, m1 + q)
                                                         - racah_cg(j1, m1, 1, q, j_up, m1 + q)))
        couplings = [J for J in np.arange(abs(j1 - 1), j1 + 1 + 0.5)]
        for J in couplings:
            for Jp in couplings:
                for M in m_values(min(J, Jp)):
                    overlap = sum(clebsch_gordan(j1, m1, 1, M - m1, J, M) * clebsch_gordan(j1, m1, 1, M - m1, Jp, M)
                                  for m1 in m_values(j1) if abs(M - m1) <= 1)
                    worst_ortho = max(worst_ortho, abs(overlap - (1.0 if J == Jp else 0.0)))
    passed = worst_oracle < 1e-12 and worst_ortho < 1e-12
    return CheckResult("clebsch_gordan", passed,
                       f"Racah deviation {worst_oracle:.2e}, orthonormality {worst_ortho:.2e}")


def _direct_lindblad(h: np.ndarray, collapse: List[np.ndarray], rho: np.ndarray) -> np.ndarray:
    out = -1j * (h @ rho - rho @ h)
    for c in collapse:
        cdc = c.conj().T @ c
        out += c @ rho @ c.conj().T - 0.5 * (cdc @ rho + rho @ cdc)
    return out


def check_superoperator(seed: int = 7) -> CheckResult:
    rng = np.random.default_rng(seed)
    dim = 3
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    h = a + a.conj().T
    collapse = [rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim)) for _ in range(2)]
    b = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = b @ b.conj().T
    rho /= np.trace(rho)
    liouv = assemble(QOperator(h), [QOperator(c) for c in collapse])
    error = float(np.max(np.abs(liouv.apply(rho) - _direct_lindblad(h, collapse, rho))))
    return CheckResult("superoperator", error < 1e-12, f"max deviation from direct form {error:.2e}")


def check_two_level_steady_state(omega: float = 1.3, delta: float = 0.4, gamma: float = 1.0) -> CheckResult:
    sigma_minus = np.array([[0.0, 1.0], [0.0, 0.0]])
    h = np.array([[0.0, omega / 2], [omega / 2, -delta]])
    rho = steady_state(assemble(QOperator(h), [QOperator(np.sqrt(gamma) * sigma_minus)]))
    analytic = (omega ** 2 / 4) / (delta ** 2 + omega ** 2 / 2 + gamma ** 2 / 4)
    error = abs(rho.populations()[1] - analytic)
    return CheckResult("two_level_steady_state", error < 1e-9, f"excited population off by {error:.2e}")


def check_model_invariants(p: SystemParams) -> CheckResult:
    problems = []
    herm = build_hamiltonian(p).hermiticity_error()
    if herm > 1e-12 * max(1.0, p.l397.rabi):
        problems.append(f"H non-Hermitian by {herm:.2e}")
    rates = np.zeros(BASIS.dim)
    for c in build_collapse_ops(p.without_cavity()):
        rates += np.real(np.diag((c.sparse.conj().T @ c.sparse).toarray()))
    for term, total in (("P1/2", p.decay.total_p12), ("P3/2", p.decay.total_p32)):
        worst = max(abs(rates[i] - total) for i in BASIS.indices(term)) / total
        if worst > 1e-12:
            problems.append(f"{term} decay total off by {worst:.2e} relative")
    rho = steady_state(build_liouvillian(p))
    problems.extend(rho.invariant_violations())
    return CheckResult("model_invariants", not problems, "; ".join(problems) or "H, decay totals and steady state ok")


def check_eq1_against_rate_equations() -> CheckResult:
    worst = 0.0
    checked = 0
    gamma1, gamma2 = 2 * np.pi * 21e6, 2 * np.pi * 0.1e6
    for pump_factor in (0.5, 1.0, 3.0):
        for v in (0.2, 0.5, 0.8):
            for w in (0.05, 0.3, 1.0):
                pump = pump_factor * gamma1
                gamma2_prime = gamma2 / v
                r = RateParams(gamma1, gamma2, gamma2_prime, w * gamma2_prime, pump)
                if gamma1 + pump <= 50 * max(gamma2, gamma2_prime):
                    continue
                approx = normalized_fluorescence_eq1(v, w, gamma1, pump)
                worst = max(worst, abs(approx / exact_normalized_fluorescence(r) - 1.0))
                checked += 1
    return CheckResult("eq1_vs_rate_equations", checked > 0 and worst < 0.02,
                       f"max relative deviation {worst:.2e} over {checked} rate sets")


def check_fock_cutoff(p: SystemParams, tolerance: float = 0.02) -> CheckResult:
    resonant = p.with_detuning(p.l397.detuning)
    values = []
    for cutoff in (1, 2):
        q = replace(resonant, fock_cutoff=cutoff)
        values.append(expect(cavity_emission_observable(q), steady_state(build_liouvillian(q))).real)
    change = abs(values[1] - values[0]) / max(abs(values[1]), 1e-300)
    return CheckResult("fock_cutoff", change < tolerance, f"cavity emission changes by {change:.2%} at cutoff 2")


def check_thread_determinism(p: SystemParams, threads: int = 2) -> CheckResult:
    small = replace(p, cavity_modes=1, cavity_polarizations=p.cavity_polarizations[:1])
    settings = ScanSettings(span=20 * MHZ, points=9, quadrature_nodes=3)
    outputs = []
    with tempfile.TemporaryDirectory() as tmp:
        for n, label in ((1, "serial"), (threads, "parallel")):
            cavity, _ = cavity_scan(small, settings=settings, threads=n)
            outputs.append(emit_csv(cavity, pathlib.Path(tmp) / f"{label}.csv").read_bytes())
    same = outputs[0] == outputs[1]
    return CheckResult("thread_determinism", same, "CSV bytes identical" if same else "CSV bytes differ")


def run_validation(p: SystemParams, threads: int = 2) -> List[CheckResult]:
    """Property checks that hold for any parameter set; a failing check does not stop the others."""
    checks: List[Tuple[str, Callable[[], CheckResult]]] = [
        ("clebsch_gordan", check_clebsch_gordan),
        ("superoperator", check_superoperator),
        ("two_level_steady_state", check_two_level_steady_state),
        ("model_invariants", lambda: check_model_invariants(p)),
        ("eq1_vs_rate_equations", check_eq1_against_rate_equations),
        ("fock_cutoff", lambda: check_fock_cutoff(p)),
        ("thread_determinism", lambda: check_thread_determinism(p, max(threads, 2))),
    ]
    results = []
    for name, check in checks:
        try:
            result = check()
        except IonCavityError as e:
            result = CheckResult(name, False, f"{type(e).__name__}: {e}")
        level = logging.INFO if result.passed else logging.ERROR
        logging.log(level, f"[validate] {result.name}: {'ok' if result.passed else 'FAILED'} ({result.detail})")
        results.append(result)
    return results
