import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Tuple

import numpy as np
from scipy.constants import physical_constants

from app.errors import ConfigurationError
from .qops import QOperator, annihilator, clebsch_gordan, dagger, embed, m_values

TWO_PI = 2.0 * np.pi
MHZ = TWO_PI * 1e6
GAUSS = 1e-4  # tesla

# mu_B / h in Hz/T, converted to an angular frequency per tesla
ZEEMAN_UNIT = TWO_PI * physical_constants["Bohr magneton in Hz/T"][0]

Polarization = Tuple[complex, complex, complex]

# Spherical components ordered (sigma-, pi, sigma+)
POL_SIGMA_MINUS: Polarization = (1.0, 0.0, 0.0)
POL_PI: Polarization = (0.0, 1.0, 0.0)
POL_SIGMA_PLUS: Polarization = (0.0, 0.0, 1.0)
POL_SIGMA_PAIR: Polarization = (1.0 / np.sqrt(2.0), 0.0, 1.0 / np.sqrt(2.0))

POLARIZATIONS: Dict[str, Polarization] = {
    "sigma_minus": POL_SIGMA_MINUS,
    "pi": POL_PI,
    "sigma_plus": POL_SIGMA_PLUS,
    "sigma_pair": POL_SIGMA_PAIR,
}

NORMALIZATIONS = ("strongest", "reduced")


@dataclass(frozen=True)
class Level:
    index: int
    term: str
    L: int
    J: float
    mJ: float
    lande_g: float


# term -> (L, J, pure-LS Lande g)
TERMS: Dict[str, Tuple[int, float, float]] = {
    "S1/2": (0, 0.5, 2.0),
    "P1/2": (1, 0.5, 2.0 / 3.0),
    "D3/2": (2, 1.5, 4.0 / 5.0),
    "P3/2": (1, 1.5, 4.0 / 3.0),
    "D5/2": (2, 2.5, 6.0 / 5.0),
}

# name -> (lower term, upper term, vacuum wavelength in nm)
TRANSITIONS: Dict[str, Tuple[str, str, float]] = {
    "397": ("S1/2", "P1/2", 396.959),
    "393": ("S1/2", "P3/2", 393.366),
    "866": ("D3/2", "P1/2", 866.214),
    "850": ("D3/2", "P3/2", 849.802),
    "854": ("D5/2", "P3/2", 854.209),
}


class AtomicBasis:
    """The 18 Zeeman sublevels of 40Ca+, grouped by term, mJ ascending."""

    def __init__(self) -> None:
        levels: List[Level] = []
        for term, (L, J, g) in TERMS.items():
            for mJ in m_values(J):
                levels.append(Level(len(levels), term, L, J, mJ, g))
        self.levels: Tuple[Level, ...] = tuple(levels)
        self._lookup = {(lv.term, lv.mJ): lv.index for lv in self.levels}

    @property
    def dim(self) -> int:
        return len(self.levels)

    def index(self, term: str, mJ: float) -> int:
        try:
            return self._lookup[(term, float(mJ))]
        except KeyError:
            raise ConfigurationError(f"No sublevel {term} mJ={mJ}") from None

    def indices(self, term: str) -> Tuple[int, ...]:
        return tuple(lv.index for lv in self.levels if lv.term == term)

    def multiplicity(self, term: str) -> int:
        return len(self.indices(term))

    @staticmethod
    def transition_wavelength_nm(name: str) -> float:
        return TRANSITIONS[name][2]


BASIS = AtomicBasis()


def _check_polarization(pol: Polarization, what: str) -> Polarization:
    vec = tuple(complex(c) for c in pol)
    if len(vec) != 3:
        raise ConfigurationError(f"{what}: polarization needs 3 spherical components, got {len(vec)}")
    norm = float(np.sqrt(sum(abs(c) ** 2 for c in vec)))
    if abs(norm - 1.0) > 1e-12:
        raise ConfigurationError(f"{what}: polarization norm is {norm:.15g}, expected 1")
    return vec


@dataclass(frozen=True)
class LaserParams:
    rabi: float = 0.0
    detuning: float = 0.0
    polarization: Polarization = POL_PI

    def __post_init__(self) -> None:
        if self.rabi < 0:
            raise ConfigurationError(f"Rabi frequency must be >= 0, got {self.rabi}")
        object.__setattr__(self, "polarization", _check_polarization(self.polarization, "laser"))


# Atomic data for 40Ca+ (lifetimes in s, branching fractions)
P12_LIFETIME = 7.098e-9
P12_BRANCH_D32 = 0.06435
P32_LIFETIME = 6.924e-9
P32_BRANCH_D52 = 0.0587
P32_BRANCH_D32 = 0.0066


@dataclass(frozen=True)
class DecayRates:
    """Spontaneous population decay rates in s^-1."""

    p12_s12: float = (1.0 - P12_BRANCH_D32) / P12_LIFETIME
    p12_d32: float = P12_BRANCH_D32 / P12_LIFETIME
    p32_s12: float = (1.0 - P32_BRANCH_D52 - P32_BRANCH_D32) / P32_LIFETIME
    p32_d32: float = P32_BRANCH_D32 / P32_LIFETIME
    p32_d52: float = P32_BRANCH_D52 / P32_LIFETIME

    def __post_init__(self) -> None:
        for name, rate in self.channels_by_name().items():
            if rate < 0:
                raise ConfigurationError(f"Decay rate {name} must be >= 0, got {rate}")

    def channels_by_name(self) -> Dict[str, float]:
        return {
            "p12_s12": self.p12_s12,
            "p12_d32": self.p12_d32,
            "p32_s12": self.p32_s12,
            "p32_d32": self.p32_d32,
            "p32_d52": self.p32_d52,
        }

    def channels(self) -> List[Tuple[str, str, float]]:
        """(upper term, lower term, rate) for each channel."""
        return [
            ("P1/2", "S1/2", self.p12_s12),
            ("P1/2", "D3/2", self.p12_d32),
            ("P3/2", "S1/2", self.p32_s12),
            ("P3/2", "D3/2", self.p32_d32),
            ("P3/2", "D5/2", self.p32_d52),
        ]

    @property
    def total_p12(self) -> float:
        return self.p12_s12 + self.p12_d32

    @property
    def total_p32(self) -> float:
        return self.p32_s12 + self.p32_d32 + self.p32_d52


@dataclass(frozen=True)
class SystemParams:
    """Physical inputs of the model, all in SI angular units (rad/s, T).

    ``cavity_modes = 0`` drops the cavity from the Hilbert space altogether;
    it is only used internally for decoupled-cavity runs.
    """

    l397: LaserParams = field(default_factory=LaserParams)
    l850: LaserParams = field(default_factory=lambda: LaserParams(polarization=POL_SIGMA_PAIR))
    l854: LaserParams = field(default_factory=lambda: LaserParams(polarization=POL_SIGMA_PAIR))
    g_bar: float = 0.0
    kappa: float = 4.2 * MHZ
    sigma_inhom: float = 0.0
    delta_cav: float = 0.0
    b_field: float = 0.0
    zeeman_unit: float = ZEEMAN_UNIT
    decay: DecayRates = field(default_factory=DecayRates)
    fock_cutoff: int = 1
    cavity_modes: int = 2
    cavity_polarizations: Tuple[Polarization, ...] = (POL_SIGMA_PLUS, POL_SIGMA_MINUS)
    coupling_normalization: str = "strongest"

    def __post_init__(self) -> None:
        if self.g_bar < 0:
            raise ConfigurationError(f"g_bar must be >= 0, got {self.g_bar}")
        if self.kappa < 0:
            raise ConfigurationError(f"kappa must be >= 0, got {self.kappa}")
        if self.sigma_inhom < 0:
            raise ConfigurationError(f"sigma_inhom must be >= 0, got {self.sigma_inhom}")
        if self.fock_cutoff < 1:
            raise ConfigurationError(f"fock_cutoff must be >= 1, got {self.fock_cutoff}")
        if self.cavity_modes not in (0, 1, 2):
            raise ConfigurationError(f"cavity_modes must be 1 or 2, got {self.cavity_modes}")
        if self.coupling_normalization not in NORMALIZATIONS:
            raise ConfigurationError(
                f"coupling_normalization must be one of {NORMALIZATIONS}, got {self.coupling_normalization!r}")
        object.__setattr__(self, "cavity_polarizations", tuple(tuple(complex(c) for c in pol)
                                                               for pol in self.cavity_polarizations))

    @property
    def gamma(self) -> float:
        """Dipole (amplitude) decay rate of P1/2."""
        return 0.5 * self.decay.total_p12

    @property
    def dims(self) -> Tuple[int, ...]:
        return (BASIS.dim,) + (self.fock_cutoff + 1,) * self.cavity_modes

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def with_detuning(self, delta_cav: float) -> "SystemParams":
        return replace(self, delta_cav=float(delta_cav))

    def with_repumpers_off(self) -> "SystemParams":
        return replace(self, l850=replace(self.l850, rabi=0.0), l854=replace(self.l854, rabi=0.0))

    def without_cavity(self) -> "SystemParams":
        return replace(self, g_bar=0.0, cavity_modes=0, cavity_polarizations=())


def reference_parameters() -> SystemParams:
    """Measured laser settings of the shelving and scan experiments, with
    the coupling and inhomogeneous width inferred from them."""
    return SystemParams(
        l397=LaserParams(18.2 * MHZ, -11.4 * MHZ, POL_PI),
        l850=LaserParams(6.5 * MHZ, -1.1 * MHZ, POL_SIGMA_PAIR),
        l854=LaserParams(8.9 * MHZ, 24.8 * MHZ, POL_SIGMA_PAIR),
        g_bar=5.3 * MHZ,
        kappa=4.2 * MHZ,
        sigma_inhom=3.1 * MHZ,
        delta_cav=-11.4 * MHZ,
        b_field=0.78 * GAUSS,
        coupling_normalization="reduced",
    )


def check_cavity_configuration(p: SystemParams) -> None:
    if len(p.cavity_polarizations) != p.cavity_modes:
        raise ConfigurationError(
            f"cavity_modes={p.cavity_modes} but {len(p.cavity_polarizations)} cavity polarizations given")
    for k, pol in enumerate(p.cavity_polarizations):
        _check_polarization(pol, f"cavity mode {k}")
        if abs(pol[1]) > 1e-12:
            raise ConfigurationError(f"cavity mode {k}: a mode along the field axis cannot carry pi light")
    if p.cavity_modes == 2:
        overlap = abs(np.vdot(p.cavity_polarizations[0], p.cavity_polarizations[1]))
        if overlap > 1e-9:
            raise ConfigurationError(f"cavity mode polarizations are not orthogonal (overlap {overlap:.3g})")


def zeeman_shift(level: Level, b_field: float, zeeman_unit: float = ZEEMAN_UNIT) -> float:
    return level.mJ * level.lande_g * zeeman_unit * b_field


def frame_energy(term: str, p: SystemParams) -> float:
    """Bare energy of a manifold in the frame rotating with all lasers.

    The cavity carries its own detuning on a^dagger a, so |S,0> and |D3/2,1>
    are degenerate exactly at the Raman condition Delta_397 = Delta_cav.
    """
    d397 = p.l397.detuning
    d850 = p.l850.detuning
    d854 = p.l854.detuning
    return {
        "S1/2": 0.0,
        "P1/2": -d397,
        "D3/2": -d397,
        "P3/2": -d397 - d850,
        "D5/2": -d397 - d850 + d854,
    }[term]


@lru_cache(maxsize=None)
def _strongest_cg(j_lower: float, j_upper: float) -> float:
    best = 0.0
    for ml in m_values(j_lower):
        for q in (-1, 0, 1):
            mu = ml + q
            if abs(mu) <= j_upper:
                best = max(best, abs(clebsch_gordan(j_lower, ml, 1, q, j_upper, mu)))
    return best


@lru_cache(maxsize=None)
def _raising_matrix(lower: str, upper: str, polarization: Polarization, normalization: str) -> np.ndarray:
    """sum_q eps_q sum_m c(m, q) |upper, m+q><lower, m| on the atomic space."""
    j_lower = TERMS[lower][1]
    j_upper = TERMS[upper][1]
    scale = 1.0 / _strongest_cg(j_lower, j_upper) if normalization == "strongest" else 1.0
    out = np.zeros((BASIS.dim, BASIS.dim), dtype=np.complex128)
    for ml in m_values(j_lower):
        for q, eps in zip((-1, 0, 1), polarization):
            mu = ml + q
            if eps == 0 or abs(mu) > j_upper:
                continue
            cg = clebsch_gordan(j_lower, ml, 1, q, j_upper, mu)
            out[BASIS.index(upper, mu), BASIS.index(lower, ml)] += eps * cg * scale
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def _lowering_matrix(upper: str, lower: str, q: int) -> np.ndarray:
    """sum_m CG |lower, m-q><upper, m| for photon polarization q."""
    j_lower = TERMS[lower][1]
    j_upper = TERMS[upper][1]
    out = np.zeros((BASIS.dim, BASIS.dim), dtype=np.float64)
    for mu in m_values(j_upper):
        ml = mu - q
        if abs(ml) > j_lower:
            continue
        out[BASIS.index(lower, ml), BASIS.index(upper, mu)] = clebsch_gordan(j_lower, ml, 1, q, j_upper, mu)
    out.setflags(write=False)
    return out


def atomic_operator(matrix: np.ndarray, p: SystemParams) -> QOperator:
    return embed(QOperator(matrix), 0, p.dims)


def cavity_annihilators(p: SystemParams) -> List[QOperator]:
    return [embed(annihilator(p.fock_cutoff), 1 + k, p.dims) for k in range(p.cavity_modes)]


def manifold_projector(p: SystemParams, term: str) -> QOperator:
    diag = np.zeros(BASIS.dim)
    diag[list(BASIS.indices(term))] = 1.0
    return atomic_operator(np.diag(diag), p)


def build_hamiltonian(p: SystemParams) -> QOperator:
    check_cavity_configuration(p)
    energies = np.array([frame_energy(lv.term, p) + zeeman_shift(lv, p.b_field, p.zeeman_unit)
                         for lv in BASIS.levels])
    h = atomic_operator(np.diag(energies), p)

    for laser, lower, upper in ((p.l397, "S1/2", "P1/2"),
                                (p.l850, "D3/2", "P3/2"),
                                (p.l854, "D5/2", "P3/2")):
        if laser.rabi == 0:
            continue
        raising = _raising_matrix(lower, upper, laser.polarization, p.coupling_normalization)
        drive = atomic_operator(0.5 * laser.rabi * raising, p)
        h = h + drive + dagger(drive)

    for a, pol in zip(cavity_annihilators(p), p.cavity_polarizations):
        if p.g_bar != 0:
            sigma_plus = atomic_operator(_raising_matrix("D3/2", "P1/2", pol, p.coupling_normalization), p)
            coupling = p.g_bar * (a @ sigma_plus)
            h = h + coupling + dagger(coupling)
        if p.delta_cav != 0:
            h = h + p.delta_cav * (dagger(a) @ a)
    return h


def build_collapse_ops(p: SystemParams) -> List[QOperator]:
    check_cavity_configuration(p)
    ops: List[QOperator] = []
    for upper, lower, rate in p.decay.channels():
        if rate <= 0:
            continue
        for q in (-1, 0, 1):
            lowering = _lowering_matrix(upper, lower, q)
            if not lowering.any():
                continue
            ops.append(atomic_operator(np.sqrt(rate) * lowering, p))
    if p.kappa > 0:
        ops.extend(float(np.sqrt(2.0 * p.kappa)) * a for a in cavity_annihilators(p))
    logging.debug(f"[model] {len(ops)} collapse operators on dim {p.dim}")
    return ops


def uv_fluorescence_observable(p: SystemParams, include_393: bool = True) -> QOperator:
    op = p.decay.p12_s12 * manifold_projector(p, "P1/2")
    if include_393:
        op = op + p.decay.p32_s12 * manifold_projector(p, "P3/2")
    return op


def cavity_emission_observable(p: SystemParams) -> QOperator:
    op = QOperator.zeros(p.dim)
    for a in cavity_annihilators(p):
        op = op + (2.0 * p.kappa) * (dagger(a) @ a)
    return op


def cooperativity(p: SystemParams) -> float:
    """C = g_bar^2 / (2 kappa gamma)."""
    if p.kappa <= 0 or p.gamma <= 0:
        raise ConfigurationError("cooperativity needs kappa > 0 and a decaying P1/2 level")
    return p.g_bar ** 2 / (2.0 * p.kappa * p.gamma)


def purcell_rate(p: SystemParams) -> float:
    """Cavity-limited P1/2 -> D3/2 rate 2C (Gamma_1 + Gamma_2) for a resonant cavity."""
    return 2.0 * cooperativity(p) * p.decay.total_p12


def atomic_dipole_decay(p: SystemParams) -> float:
    return p.gamma


def purcell_enhancement(tau_off: float, tau_on: float) -> float:
    """Shelving speed-up tau_off / tau_on brought by the cavity."""
    if tau_off <= 0 or tau_on <= 0:
        raise ValueError(f"time constants must be positive, got tau_off={tau_off}, tau_on={tau_on}")
    return tau_off / tau_on
