import logging
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.optimize import brentq
from skimage.measure import find_contours

from app.errors import (AnalysisError, CalibrationError, ConfigurationError, FitError, InversionError,
                        SolverError)
from app.worker import run_grid
from .atom_cavity_model import (BASIS, MHZ, SystemParams, build_collapse_ops, build_hamiltonian,
                                cavity_emission_observable, uv_fluorescence_observable)
from .fitting import MIN_POINTS, estimate_decay_time, fit_exponential, fit_lorentzian, gaussian_quadrature
from .lindblad_solver import assemble, evolve, expect, expect_series, reduce_to_atom, steady_state

CAVITY_EMISSION = "cavity_emission"
UV_NORMALIZED = "uv_fluorescence_normalized"

# largest Gauss-Hermite abscissa for 15 nodes is 4.5 sigma*sqrt(2)
NODE_REACH = 6.5


@dataclass(frozen=True)
class TransientSettings:
    duration: float = 8e-6
    points: int = 801
    include_393: bool = True
    broaden: bool = True
    quadrature_nodes: int = 15
    evolve_method: str = "expm"
    rtol: float = 1e-9
    atol: float = 1e-12

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.duration, self.points)


@dataclass(frozen=True)
class ScanSettings:
    span: float = 120.0 * MHZ
    points: int = 121
    reference_offset: float = 80.0 * MHZ
    quadrature_nodes: int = 15
    include_393: bool = True

    def detunings(self, p: SystemParams) -> np.ndarray:
        """Cavity detunings centred on the Raman resonance Delta_cav = Delta_397."""
        return p.l397.detuning + np.linspace(-self.span, self.span, self.points)


@dataclass(frozen=True)
class InversionSettings:
    g_min: float = 3.0 * MHZ
    g_max: float = 8.0 * MHZ
    g_points: int = 21
    sigma_min: float = 0.0
    sigma_max: float = 6.0 * MHZ
    sigma_points: int = 21
    refine: bool = True
    surrogate_span: float = 150.0 * MHZ
    surrogate_points: int = 301
    transient_points: int = 41

    def g_values(self) -> np.ndarray:
        return np.linspace(self.g_min, self.g_max, self.g_points)

    def sigma_values(self) -> np.ndarray:
        return np.linspace(self.sigma_min, self.sigma_max, self.sigma_points)


@dataclass(frozen=True)
class Transient:
    times: np.ndarray
    rate: np.ndarray
    tau_fit: float
    tau_stderr: float
    amplitude: float
    offset: float
    window: float
    cavity_on: bool
    include_393: bool
    sigma_applied: float = 0.0


@dataclass(frozen=True)
class Spectrum:
    detunings: np.ndarray
    values: np.ndarray
    kind: str
    sigma_applied: float = 0.0
    peak_detuning: Optional[float] = None
    hwhm: Optional[float] = None
    include_393: Optional[bool] = None
    # unbroadened per-detuning evaluator; broaden() re-evaluates it off-grid
    model: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False, repr=False)

    @property
    def relative_detunings(self) -> np.ndarray:
        if self.peak_detuning is None:
            return self.detunings
        return self.detunings - self.peak_detuning


@dataclass(frozen=True)
class InversionResult:
    g_bar: float
    sigma: float
    tau_contour: List[np.ndarray]
    delta_contour: List[np.ndarray]
    residual: float  # gap between the two contours at the reported point, in grid steps
    relative_mismatch: float
    g_values: np.ndarray
    sigma_values: np.ndarray
    tau_grid: np.ndarray
    delta_grid: np.ndarray
    tau_on_measured: float
    delta_measured: float


@dataclass(frozen=True)
class SuppressionPoint:
    delta_850: float
    suppression_with_393: float
    suppression_397_only: float

    def suppression(self, include_393: bool) -> float:
        return self.suppression_with_393 if include_393 else self.suppression_397_only


@dataclass(frozen=True)
class SuppressionSweep:
    points: Tuple[SuppressionPoint, ...]

    def best(self, include_393: bool = True) -> SuppressionPoint:
        return max(self.points, key=lambda pt: pt.suppression(include_393))


def broaden_scalar(model: Callable[[np.ndarray], np.ndarray], center, sigma: float, nodes: int = 15) -> np.ndarray:
    """sum_k w_k model(center + x_k) over Gauss-Hermite nodes of N(0, sigma^2).

    ``model`` takes a 1-d array of detunings and returns an array whose
    first axis runs over them; extra axes (e.g. time) are carried through.
    """
    offsets, weights = gaussian_quadrature(sigma, nodes)
    c = np.asarray(center, dtype=float)
    query = (c[..., np.newaxis] + offsets).reshape(-1)
    values = np.asarray(model(query))
    values = values.reshape(c.shape + (offsets.size,) + values.shape[1:])
    return np.tensordot(values, weights, axes=([c.ndim], [0]))


def broaden(s: Spectrum, sigma: float, nodes: int = 15) -> Spectrum:
    """Gaussian average over the cavity detuning, re-evaluating the model.

    The result replaces any earlier broadening; ``s.model`` is always the
    unbroadened model.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return s
    if s.model is None:
        raise AnalysisError(f"{s.kind} spectrum carries no model to re-evaluate")
    values = broaden_scalar(s.model, s.detunings, sigma, nodes)
    return replace(s, values=values, sigma_applied=float(sigma))


def anticorrelation(cavity: Spectrum, uv: Spectrum) -> float:
    """Pearson correlation of the two spectra; NaN when either is flat."""
    if cavity.values.shape != uv.values.shape:
        raise ValueError("spectra must share their detuning grid")
    if np.ptp(cavity.values) == 0 or np.ptp(uv.values) == 0:
        return float("nan")
    return float(np.corrcoef(cavity.values, uv.values)[0, 1])


def build_liouvillian(p: SystemParams):
    return assemble(build_hamiltonian(p), build_collapse_ops(p))


# --- shelving transients ----------------------------------------------------

def _transient_rate(task: Tuple[SystemParams, bool, TransientSettings]) -> np.ndarray:
    p, cavity_on, settings = task
    rho0 = steady_state(build_liouvillian(p))
    dark = p.with_repumpers_off()
    if not cavity_on:
        dark = dark.without_cavity()
        rho0 = reduce_to_atom(rho0, BASIS.dim)
    states = evolve(rho0, build_liouvillian(dark), settings.times(), rtol=settings.rtol, atol=settings.atol,
                    method=settings.evolve_method)
    observable = uv_fluorescence_observable(dark, settings.include_393)
    return np.clip(expect_series(observable, states).real, 0.0, None)


def _ensemble_rates(p: SystemParams, detunings: Sequence[float], settings: TransientSettings,
                    threads: Optional[int]) -> np.ndarray:
    tasks = [(p.with_detuning(d), True, settings) for d in detunings]
    return np.array(run_grid(_transient_rate, tasks, threads, label="transient"))


def _fit_transient(times: np.ndarray, rate: np.ndarray):
    """Fit from switch-off to five times the log-slope estimate of tau."""
    tau_est = estimate_decay_time(times, rate)
    stop = 5.0 * tau_est
    if stop > times[-1]:
        logging.warning(f"[shelve] fit window {stop * 1e9:.0f} ns exceeds the simulated {times[-1] * 1e9:.0f} ns")
    keep = max(int(np.searchsorted(times, stop, side="right")), MIN_POINTS)
    return fit_exponential(times[:keep], rate[:keep]), float(times[keep - 1])


def shelving_transient(p: SystemParams, cavity_on: bool = True, settings: TransientSettings = TransientSettings(),
                       threads: Optional[int] = 1) -> Transient:
    """UV fluorescence after the repumpers are switched off at t = 0.

    The initial state is the steady state with repumpers on. With the cavity
    off the coupling is dropped for t > 0. With the cavity on the rate is
    averaged over the Gaussian spread of cavity detunings before fitting.
    """
    times = settings.times()
    sigma = 0.0
    if cavity_on and settings.broaden and p.sigma_inhom > 0 and p.g_bar > 0:
        sigma = p.sigma_inhom
        model = partial(_ensemble_rates, p, settings=settings, threads=threads)
        rate = broaden_scalar(model, p.delta_cav, sigma, settings.quadrature_nodes)
    else:
        rate = _transient_rate((p, cavity_on, settings))
    fit, window = _fit_transient(times, rate)
    if fit.tau <= 0:
        raise FitError(f"Transient fit gave tau={fit.tau:.3g} s")
    logging.info(f"[shelve] cavity {'on' if cavity_on else 'off'}: tau = {fit.tau * 1e9:.1f} "
                 f"+/- {fit.tau_stderr * 1e9:.1f} ns (window {window * 1e9:.0f} ns)")
    return Transient(times=times, rate=rate, tau_fit=fit.tau, tau_stderr=fit.tau_stderr,
                     amplitude=fit.amplitude, offset=fit.offset, window=window, cavity_on=cavity_on,
                     include_393=settings.include_393, sigma_applied=sigma)


def calibrate_omega397(p: SystemParams, tau_off_target: float, settings: TransientSettings = TransientSettings(),
                       bracket: Tuple[float, float] = (5.0 * MHZ, 40.0 * MHZ)) -> float:
    """Omega_397 whose cavity-off shelving time equals ``tau_off_target``.

    tau_off falls monotonically with Omega_397 across the bracket, so a
    sign change of tau - target is located with Brent's method.
    """
    if tau_off_target <= 0:
        raise ValueError(f"tau_off_target must be > 0, got {tau_off_target}")
    lo, hi = bracket
    if not 0 < lo < hi:
        raise ValueError(f"invalid bracket {bracket}")

    def mismatch(omega: float) -> float:
        q = replace(p, l397=replace(p.l397, rabi=float(omega)))
        tau = shelving_transient(q, cavity_on=False, settings=settings).tau_fit
        logging.debug(f"[calibrate] Omega/2pi = {omega / MHZ:.4f} MHz -> tau = {tau * 1e9:.2f} ns")
        return tau - tau_off_target

    f_lo, f_hi = mismatch(lo), mismatch(hi)
    if f_lo * f_hi > 0:
        raise CalibrationError(
            f"tau_off target {tau_off_target * 1e9:.1f} ns is not reached for Omega_397/2pi in "
            f"[{lo / MHZ:.2f}, {hi / MHZ:.2f}] MHz",
            bracket=(lo, hi), values=(f_lo + tau_off_target, f_hi + tau_off_target))
    omega = brentq(mismatch, lo, hi, xtol=1e-5 * lo, rtol=1e-6)
    logging.info(f"[calibrate] Omega_397/2pi = {omega / MHZ:.3f} MHz for tau_off = {tau_off_target * 1e9:.1f} ns")
    return float(omega)


# --- cavity-detuning scans --------------------------------------------------

def _scan_point(task: Tuple[SystemParams, float]) -> Tuple[float, float, float]:
    """(cavity emission, UV with 393, UV at 397 only) in the steady state."""
    p, detuning = task
    q = p.with_detuning(detuning)
    try:
        rho = steady_state(build_liouvillian(q))
    except SolverError as e:
        raise SolverError(f"Steady state failed at Delta_cav/2pi = {detuning / MHZ:.4f} MHz: {e}",
                          residual=e.residual, detuning=detuning) from e
    return (expect(cavity_emission_observable(q), rho).real,
            expect(uv_fluorescence_observable(q, True), rho).real,
            expect(uv_fluorescence_observable(q, False), rho).real)


class ScanModel:
    """Memoized steady-state observables as a function of the cavity detuning."""

    COLUMNS = {CAVITY_EMISSION: 0, "uv_with_393": 1, "uv_397_only": 2}

    def __init__(self, p: SystemParams, threads: Optional[int] = 1) -> None:
        self.p = p
        self.threads = threads
        self._cache: Dict[float, Tuple[float, float, float]] = {}

    def evaluate(self, detunings) -> np.ndarray:
        d = np.asarray(detunings, dtype=float)
        keys = [float(x) for x in d.ravel()]
        missing = sorted(set(k for k in keys if k not in self._cache))
        if missing:
            results = run_grid(_scan_point, [(self.p, k) for k in missing], self.threads, label="scan")
            self._cache.update(zip(missing, results))
        return np.array([self._cache[k] for k in keys]).reshape(d.shape + (3,))

    def column(self, name: str, detunings) -> np.ndarray:
        return self.evaluate(detunings)[..., self.COLUMNS[name]]

    def uv(self, include_393: bool, detunings) -> np.ndarray:
        return self.column("uv_with_393" if include_393 else "uv_397_only", detunings)

    def uv_baseline(self, include_393: bool, reference_offset: float) -> float:
        """UV rate with the cavity detuned far from the Raman resonance.

        Averaged over both sides of the resonance, which cancels the
        dispersive part of the far wing.
        """
        center = self.p.l397.detuning
        baseline = float(np.mean(self.uv(include_393, [center - reference_offset, center + reference_offset])))
        if baseline <= 0:
            raise AnalysisError(f"Far-detuned UV baseline is {baseline:.3g}; cannot normalize")
        return baseline

    def normalized_uv(self, include_393: bool, baseline: float, detunings) -> np.ndarray:
        return self.uv(include_393, detunings) / baseline


def _check_scan_grid(p: SystemParams, grid: np.ndarray) -> None:
    if grid.ndim != 1 or grid.size < MIN_POINTS:
        raise ConfigurationError(f"scan grid needs at least {MIN_POINTS} detunings")
    if not grid.min() <= p.l397.detuning <= grid.max():
        raise ConfigurationError(
            f"scan grid [{grid.min() / MHZ:.2f}, {grid.max() / MHZ:.2f}] MHz does not span the Raman resonance "
            f"at {p.l397.detuning / MHZ:.2f} MHz")


def _locate_peak(spectrum: Spectrum) -> Spectrum:
    try:
        fit = fit_lorentzian(spectrum.detunings, spectrum.values)
    except FitError as e:
        logging.warning(f"[scan] no Lorentzian peak in the cavity emission: {e}")
        return spectrum
    return replace(spectrum, peak_detuning=fit.center, hwhm=fit.hwhm)


def cavity_scan(p: SystemParams, detunings=None, settings: ScanSettings = ScanSettings(),
                threads: Optional[int] = 1) -> Tuple[Spectrum, Spectrum]:
    """Broadened cavity-emission and normalized UV spectra versus Delta_cav."""
    grid = settings.detunings(p) if detunings is None else np.asarray(detunings, dtype=float)
    _check_scan_grid(p, grid)
    model = ScanModel(p, threads)
    baseline = model.uv_baseline(settings.include_393, settings.reference_offset)
    sigma, nodes = p.sigma_inhom, settings.quadrature_nodes

    emission_model = partial(model.column, CAVITY_EMISSION)
    uv_model = partial(model.normalized_uv, settings.include_393, baseline)
    cavity = Spectrum(grid, broaden_scalar(emission_model, grid, sigma, nodes), CAVITY_EMISSION,
                      sigma_applied=sigma, model=emission_model)
    cavity = _locate_peak(cavity)
    uv = Spectrum(grid, broaden_scalar(uv_model, grid, sigma, nodes), UV_NORMALIZED, sigma_applied=sigma,
                  peak_detuning=cavity.peak_detuning, include_393=settings.include_393, model=uv_model)

    edges = (uv.values[0], uv.values[-1])
    if max(abs(v - 1.0) for v in edges) > 0.02:
        logging.warning(f"[scan] normalized UV at the grid edges is {edges[0]:.4f}, {edges[1]:.4f}; widen the span")
    if cavity.hwhm is not None:
        logging.info(f"[scan] delta = {cavity.hwhm / MHZ:.3f} MHz, peak at {cavity.peak_detuning / MHZ:.3f} MHz, "
                     f"min UV = {uv.values.min():.4f}")
    return cavity, uv


def suppression_sweep(p: SystemParams, delta850_list: Sequence[float], settings: ScanSettings = ScanSettings(),
                      threads: Optional[int] = 1) -> SuppressionSweep:
    """1 - min(normalized UV) per 850 nm detuning, with and without 393 nm light."""
    points = []
    for d850 in delta850_list:
        q = replace(p, l850=replace(p.l850, detuning=float(d850)))
        grid = settings.detunings(q)
        _check_scan_grid(q, grid)
        model = ScanModel(q, threads)
        suppression = []
        for include_393 in (True, False):
            baseline = model.uv_baseline(include_393, settings.reference_offset)
            uv = broaden_scalar(partial(model.normalized_uv, include_393, baseline), grid, q.sigma_inhom,
                                settings.quadrature_nodes)
            suppression.append(max(0.0, 1.0 - float(np.min(uv))))
        point = SuppressionPoint(float(d850), suppression[0], suppression[1])
        logging.info(f"[suppress] Delta_850/2pi = {d850 / MHZ:+.2f} MHz: suppression {point.suppression_with_393:.3f} "
                     f"(397 only {point.suppression_397_only:.3f})")
        points.append(point)
    return SuppressionSweep(tuple(points))


# --- (g_bar, sigma) inversion -------------------------------------------------

@dataclass(frozen=True)
class _RowTask:
    p: SystemParams
    sigmas: Tuple[float, ...]
    transient: TransientSettings
    scan: ScanSettings
    inversion: InversionSettings


def _observable_row(task: _RowTask) -> Tuple[np.ndarray, np.ndarray]:
    """tau_on and delta for one g_bar and every sigma.

    Broadening averages run over cubic-spline surrogates in Delta_cav: one
    of the steady-state emission and one of the transient UV trace.
    """
    p, inv = task.p, task.inversion
    center = p.l397.detuning
    emission_grid = center + np.linspace(-inv.surrogate_span, inv.surrogate_span, inv.surrogate_points)
    emission = np.array([_scan_point((p, d))[0] for d in emission_grid])
    emission_spline = CubicSpline(emission_grid, emission)

    transient_span = max(NODE_REACH * max(task.sigmas), 1.0 * MHZ)
    transient_grid = center + np.linspace(-transient_span, transient_span, inv.transient_points)
    rates = np.array([_transient_rate((p.with_detuning(d), True, task.transient)) for d in transient_grid])
    rate_spline = CubicSpline(transient_grid, rates, axis=0)

    def clipped(spline, lo, hi):
        return lambda d: spline(np.clip(d, lo, hi))

    emission_model = clipped(emission_spline, emission_grid[0], emission_grid[-1])
    rate_model = clipped(rate_spline, transient_grid[0], transient_grid[-1])
    scan_grid = task.scan.detunings(p)
    times = task.transient.times()

    taus, deltas = [], []
    for sigma in task.sigmas:
        try:
            rate = broaden_scalar(rate_model, p.l397.detuning, sigma, task.transient.quadrature_nodes)
            taus.append(_fit_transient(times, np.clip(rate, 0.0, None))[0].tau)
        except FitError as e:
            logging.warning(f"[invert] tau fit failed at g/2pi={p.g_bar / MHZ:.3f}, sigma/2pi={sigma / MHZ:.3f}: {e}")
            taus.append(np.nan)
        try:
            spectrum = broaden_scalar(emission_model, scan_grid, sigma, task.scan.quadrature_nodes)
            deltas.append(fit_lorentzian(scan_grid, spectrum).hwhm)
        except FitError as e:
            logging.warning(f"[invert] delta fit failed at g/2pi={p.g_bar / MHZ:.3f}, sigma/2pi={sigma / MHZ:.3f}: {e}")
            deltas.append(np.nan)
    logging.debug(f"[invert] row g/2pi = {p.g_bar / MHZ:.3f} MHz done")
    return np.array(taus), np.array(deltas)


def observable_grid(p: SystemParams, g_values: Sequence[float], sigma_values: Sequence[float],
                    transient: TransientSettings = TransientSettings(), scan: ScanSettings = ScanSettings(),
                    inversion: InversionSettings = InversionSettings(),
                    threads: Optional[int] = 1) -> Tuple[np.ndarray, np.ndarray]:
    """tau_on[i, j] and delta[i, j] at (g_values[i], sigma_values[j]), Raman resonant cavity."""
    resonant = p.with_detuning(p.l397.detuning)
    tasks = [_RowTask(replace(resonant, g_bar=float(g)), tuple(float(s) for s in sigma_values),
                      transient, scan, inversion) for g in g_values]
    rows = run_grid(_observable_row, tasks, threads, label="invert")
    return np.array([r[0] for r in rows]), np.array([r[1] for r in rows])


def simulate_observables(p: SystemParams, transient: TransientSettings = TransientSettings(),
                         scan: ScanSettings = ScanSettings(),
                         inversion: InversionSettings = InversionSettings()) -> Tuple[float, float]:
    """(tau_on, delta) at p.g_bar and p.sigma_inhom, computed the way the inversion grid is."""
    taus, deltas = observable_grid(p, [p.g_bar], [p.sigma_inhom], transient, scan, inversion)
    return float(taus[0, 0]), float(deltas[0, 0])


def _level_set(grid: np.ndarray, level: float) -> List[np.ndarray]:
    """Marching-squares polylines in fractional (row, col) index space."""
    finite = np.isfinite(grid)
    if not finite.any():
        return []
    return find_contours(np.where(finite, grid, np.nanmean(grid)), level, mask=finite)


def _index_to_physical(contour: np.ndarray, g_values: np.ndarray, sigma_values: np.ndarray) -> np.ndarray:
    rows = np.interp(contour[:, 0], np.arange(g_values.size), g_values)
    cols = np.interp(contour[:, 1], np.arange(sigma_values.size), sigma_values)
    return np.column_stack([rows, cols])


def _segment_intersections(a: np.ndarray, b: np.ndarray) -> List[np.ndarray]:
    if len(a) < 2 or len(b) < 2:
        return []
    p, r = a[:-1, np.newaxis, :], (a[1:] - a[:-1])[:, np.newaxis, :]
    q, s = b[np.newaxis, :-1, :], (b[1:] - b[:-1])[np.newaxis, :, :]
    cross = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = q - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / cross
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / cross
    hit = (np.abs(cross) > 1e-14) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    i, j = np.nonzero(hit)
    return [a[k] + t[k, m] * (a[k + 1] - a[k]) for k, m in zip(i, j)]


def _polyline_distance(point: np.ndarray, lines: List[np.ndarray]) -> float:
    """Shortest distance from ``point`` to any of the polylines."""
    best = np.inf
    for line in lines:
        if len(line) == 1:
            best = min(best, float(np.hypot(*(line[0] - point))))
            continue
        start, step = line[:-1], np.diff(line, axis=0)
        length2 = np.einsum("ij,ij->i", step, step)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(length2 > 0, np.einsum("ij,ij->i", point - start, step) / length2, 0.0)
        nearest = start + np.clip(t, 0.0, 1.0)[:, np.newaxis] * step
        best = min(best, float(np.min(np.hypot(*(nearest - point).T))))
    return best


def _crossing(g_values, sigma_values, tau_grid, delta_grid, tau_meas, delta_meas):
    tau_lines = _level_set(tau_grid, tau_meas)
    delta_lines = _level_set(delta_grid, delta_meas)
    physical = partial(_index_to_physical, g_values=g_values, sigma_values=sigma_values)
    tau_contour = [physical(c) for c in tau_lines]
    delta_contour = [physical(c) for c in delta_lines]

    hits = [pt for a in tau_lines for b in delta_lines for pt in _segment_intersections(a, b)]
    if not hits:
        raise InversionError(
            f"tau_on = {tau_meas * 1e9:.1f} ns and delta/2pi = {delta_meas / MHZ:.3f} MHz contours do not cross "
            f"inside g/2pi in [{g_values[0] / MHZ:.2f}, {g_values[-1] / MHZ:.2f}] MHz, "
            f"sigma/2pi in [{sigma_values[0] / MHZ:.2f}, {sigma_values[-1] / MHZ:.2f}] MHz",
            tau_contour=tau_contour, delta_contour=delta_contour)

    tau_interp = RegularGridInterpolator((g_values, sigma_values), tau_grid)
    delta_interp = RegularGridInterpolator((g_values, sigma_values), delta_grid)

    def mismatch(point: np.ndarray) -> float:
        x = physical(point[np.newaxis, :])
        return float(np.hypot(tau_interp(x)[0] / tau_meas - 1.0, delta_interp(x)[0] / delta_meas - 1.0))

    scored = sorted((mismatch(pt), tuple(pt)) for pt in hits)
    if len({(round(pt[0], 3), round(pt[1], 3)) for _, pt in scored}) > 1:
        logging.warning(f"[invert] {len(scored)} contour crossings found; keeping the best matching one")
    best_mismatch, best = scored[0]
    point = np.array(best)
    gap = _polyline_distance(point, tau_lines) + _polyline_distance(point, delta_lines)
    return point, gap, best_mismatch, tau_contour, delta_contour


def invert_parameters(tau_on_meas: float, delta_meas: float, p: SystemParams,
                      grid: InversionSettings = InversionSettings(),
                      transient: TransientSettings = TransientSettings(), scan: ScanSettings = ScanSettings(),
                      threads: Optional[int] = 1) -> InversionResult:
    """(g_bar, sigma) where the measured tau_on and delta level sets cross."""
    if tau_on_meas <= 0 or delta_meas <= 0:
        raise ValueError("measured tau_on and delta must be positive")
    g_values, sigma_values = grid.g_values(), grid.sigma_values()
    tau_grid, delta_grid = observable_grid(p, g_values, sigma_values, transient, scan, grid, threads)
    point, gap, mismatch, tau_contour, delta_contour = _crossing(g_values, sigma_values, tau_grid, delta_grid,
                                                                 tau_on_meas, delta_meas)
    g_index, s_index = point
    g_bar = float(np.interp(g_index, np.arange(g_values.size), g_values))
    sigma = float(np.interp(s_index, np.arange(sigma_values.size), sigma_values))
    logging.info(f"[invert] coarse crossing g/2pi = {g_bar / MHZ:.3f} MHz, sigma/2pi = {sigma / MHZ:.3f} MHz")

    if grid.refine:
        dg = 2.0 * (g_values[1] - g_values[0])
        ds = 2.0 * (sigma_values[1] - sigma_values[0])
        fine = replace(grid, refine=False,
                       g_min=max(grid.g_min, g_bar - dg), g_max=min(grid.g_max, g_bar + dg),
                       sigma_min=max(grid.sigma_min, sigma - ds), sigma_max=min(grid.sigma_max, sigma + ds))
        try:
            return invert_parameters(tau_on_meas, delta_meas, p, fine, transient, scan, threads)
        except InversionError as e:
            logging.warning(f"[invert] refinement lost the crossing, keeping the coarse result: {e}")

    logging.info(f"[invert] g/2pi = {g_bar / MHZ:.3f} MHz, sigma/2pi = {sigma / MHZ:.3f} MHz, "
                 f"contour gap {gap:.2e} steps, relative mismatch {mismatch:.2e}")
    return InversionResult(g_bar=g_bar, sigma=sigma, tau_contour=tau_contour, delta_contour=delta_contour,
                           residual=gap, relative_mismatch=mismatch, g_values=g_values, sigma_values=sigma_values,
                           tau_grid=tau_grid, delta_grid=delta_grid, tau_on_measured=float(tau_on_meas),
                           delta_measured=float(delta_meas))
