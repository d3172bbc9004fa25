import logging
from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import numpy as np

from app.errors import DegenerateSystemError, DomainError, ExtractionError, FitError
from .atom_cavity_model import BASIS, SystemParams
from .experiments import TransientSettings, build_liouvillian, shelving_transient
from .fitting import fit_exponential
from .lindblad_solver import DensityMatrix, evolve, steady_state

# D3/2 depletion is followed for this long when extracting Gamma_3
DEPLETION_WINDOW = 2e-6
DEPLETION_POINTS = 401
# P populations below this are solver roundoff of an absorbing D state
P_POPULATION_FLOOR = 1e-12


@dataclass(frozen=True)
class RateParams:
    """Rates of the effective S, P, D scheme in s^-1.

    gamma3 is the incoherent D -> S repump that stands in for the
    850/854 nm lasers; pump is the incoherent S <-> P rate V.
    """

    gamma1: float
    gamma2: float
    gamma2_prime: float
    gamma3: float
    pump: float

    def __post_init__(self) -> None:
        for name in ("gamma1", "gamma2", "gamma2_prime", "gamma3", "pump"):
            value = getattr(self, name)
            if value < 0 or not np.isfinite(value):
                raise ValueError(f"{name} must be a finite rate >= 0, got {value}")
        if self.gamma2_prime < self.gamma2:
            logging.warning(f"[eq1] gamma2_prime={self.gamma2_prime:.4g} is below gamma2={self.gamma2:.4g}; "
                            "the cavity suppresses rather than enhances the D3/2 channel")

    @property
    def v(self) -> float:
        return self.gamma2 / self.gamma2_prime

    @property
    def w(self) -> float:
        return self.gamma3 / self.gamma2_prime


def rate_matrix(r: RateParams, use_prime: bool) -> np.ndarray:
    """Generator M of dN/dt = M N for N = (N_S, N_P, N_D)."""
    g1, v, g3 = r.gamma1, r.pump, r.gamma3
    g2 = r.gamma2_prime if use_prime else r.gamma2
    return np.array([
        [-v, g1 + v, g3],
        [v, -(g1 + g2 + v), 0.0],
        [0.0, g2, -g3],
    ])


def steady_populations(r: RateParams, use_prime: bool = False) -> Tuple[float, float, float]:
    """Equilibrium (N_S, N_P, N_D) normalized to one."""
    m = rate_matrix(r, use_prime)
    if not np.any(m):
        raise DegenerateSystemError("All rates are zero; every population vector is stationary")
    system = np.vstack([m, np.ones(3)])
    rhs = np.array([0.0, 0.0, 0.0, 1.0])
    if np.linalg.matrix_rank(system) < 3:
        raise DegenerateSystemError(f"Rate equations have no unique equilibrium for {r}")
    populations, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    if np.max(np.abs(m @ populations)) > 1e-9 * np.max(np.abs(m)):
        raise DegenerateSystemError(f"Rate equations have no unique equilibrium for {r}")
    populations = np.clip(populations, 0.0, None)
    populations = populations / populations.sum()
    return tuple(float(x) for x in populations)


def normalized_fluorescence_eq1(v: float, w: float, gamma1: float, pump: float) -> float:
    """N'_P / N_P ~ 1 - (1 - v) / (1 + w (gamma1 + 2 pump) / pump).

    Valid when gamma1 + pump is large against both D3/2 rates.
    """
    if pump <= 0:
        raise DomainError(f"pump rate must be > 0, got {pump}")
    if not 0 < v <= 1:
        raise DomainError(f"v must lie in (0, 1], got {v}")
    if w < 0:
        raise DomainError(f"w must be >= 0, got {w}")
    return 1.0 - (1.0 - v) / (1.0 + w * (gamma1 + 2.0 * pump) / pump)


def exact_normalized_fluorescence(r: RateParams) -> float:
    """N'_P / N_P from the full three-level equilibrium."""
    with_cavity = steady_populations(r, use_prime=True)[1]
    without = steady_populations(r, use_prime=False)[1]
    if without < P_POPULATION_FLOOR:
        raise DegenerateSystemError("P population vanishes without the cavity")
    return with_cavity / without


@dataclass(frozen=True)
class Eq1Table:
    v_values: np.ndarray
    w_values: np.ndarray
    values: np.ndarray  # values[i, j] at (v_values[i], w_values[j])
    gamma1: float
    pump: float


def eq1_table(v_values: Sequence[float], w_values: Sequence[float], gamma1: float, pump: float) -> Eq1Table:
    v = np.asarray(v_values, dtype=float)
    w = np.asarray(w_values, dtype=float)
    values = np.array([[normalized_fluorescence_eq1(vi, wj, gamma1, pump) for wj in w] for vi in v])
    return Eq1Table(v, w, values, float(gamma1), float(pump))


def _manifold_populations(rho: DensityMatrix) -> Tuple[float, float, float]:
    pops = rho.populations()
    return tuple(float(sum(pops[i] for i in BASIS.indices(term))) for term in ("S1/2", "P1/2", "D3/2"))


def estimate_pump_rate(p: SystemParams) -> Tuple[float, Tuple[float, float, float]]:
    """V from the S/P balance V N_S = (Gamma_1 + Gamma_2 + V) N_P of the cavity-free steady state.

    Returns V and the (N_S, N_P, N_D) it was read from.
    """
    atom = p.without_cavity()
    populations = _manifold_populations(steady_state(build_liouvillian(atom)))
    n_s, n_p, _ = populations
    if n_s <= n_p:
        raise ExtractionError(f"N_S={n_s:.4g} <= N_P={n_p:.4g}: the 397 nm transition is saturated "
                              "beyond what an incoherent pump describes")
    return p.decay.total_p12 * n_p / (n_s - n_p), populations


def _repump_rate(p: SystemParams) -> float:
    """D3/2 depletion rate with the 397 nm laser off, fitted to N_D(t)."""
    atom = p.without_cavity()
    if atom.l850.rabi == 0:
        return 0.0
    dark = replace(atom, l397=replace(atom.l397, rabi=0.0))
    seed = DensityMatrix.mixed(BASIS.dim, BASIS.indices("D3/2"))
    times = np.linspace(0.0, DEPLETION_WINDOW, DEPLETION_POINTS)
    states = evolve(seed, build_liouvillian(dark), times, method="expm")
    n_d = np.array([_manifold_populations(s)[2] for s in states])
    if n_d[-1] > 1.0 - 1e-9:
        return 0.0
    try:
        return 1.0 / fit_exponential(times, n_d).tau
    except FitError as e:
        raise ExtractionError(f"D3/2 depletion is not exponential: {e}") from e


def effective_rates_from_full(p: SystemParams, settings: TransientSettings = TransientSettings()) -> RateParams:
    """Map the full model onto the effective S, P, D rate scheme.

    gamma1 and gamma2 come straight from the decay rates. V is read from
    the cavity-free S/P balance, gamma3 from the D3/2 depletion with the
    397 nm laser off, and gamma2_prime from the cavity-on shelving time
    1/tau_on divided by the P fraction N_P / (N_S + N_P).
    """
    gamma1, gamma2 = p.decay.p12_s12, p.decay.p12_d32
    pump, (n_s, n_p, _) = estimate_pump_rate(p)
    gamma3 = _repump_rate(p)
    tau_on = shelving_transient(p, cavity_on=True, settings=settings).tau_fit
    p_fraction = n_p / (n_s + n_p)
    gamma2_prime = 1.0 / (tau_on * p_fraction)
    rates = RateParams(gamma1=gamma1, gamma2=gamma2, gamma2_prime=gamma2_prime, gamma3=gamma3, pump=pump)
    logging.info(f"[eq1] effective rates: V={pump:.4g}/s, gamma3={gamma3:.4g}/s, "
                 f"gamma2'={gamma2_prime:.4g}/s (v={rates.v:.3f}, w={rates.w:.3f})")
    return rates
