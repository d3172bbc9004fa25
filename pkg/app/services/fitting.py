import logging
import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import OptimizeWarning, curve_fit

from app.errors import FitError

MIN_POINTS = 8
MAX_EVALUATIONS = 5000


def exponential(t, amplitude, tau, offset):
    return amplitude * np.exp(-t / tau) + offset


def lorentzian(x, center, hwhm, amplitude, offset):
    return amplitude / (1.0 + ((x - center) / hwhm) ** 2) + offset


@dataclass(frozen=True)
class ExponentialFit:
    """A exp(-(t - t0)/tau) + B, with t0 the first fitted sample."""

    amplitude: float
    tau: float
    offset: float
    amplitude_stderr: float
    tau_stderr: float
    offset_stderr: float
    t0: float = 0.0

    def __call__(self, t):
        return exponential(np.asarray(t) - self.t0, self.amplitude, self.tau, self.offset)


@dataclass(frozen=True)
class LorentzianFit:
    center: float
    hwhm: float
    amplitude: float
    offset: float
    center_stderr: float
    hwhm_stderr: float
    amplitude_stderr: float
    offset_stderr: float

    def __call__(self, x):
        return lorentzian(np.asarray(x), self.center, self.hwhm, self.amplitude, self.offset)


def _as_series(x, y) -> Tuple[np.ndarray, np.ndarray]:
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise FitError(f"x and y must be 1-d and of equal length, got {xa.shape} and {ya.shape}")
    if xa.size < MIN_POINTS:
        raise FitError(f"Need at least {MIN_POINTS} points, got {xa.size}")
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise FitError("Input contains non-finite values")
    if np.ptp(ya) <= 1e-12 * max(np.max(np.abs(ya)), 1e-300):
        raise FitError("Input is constant; nothing to fit")
    return xa, ya


def _run_curve_fit(model, x, y, p0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizeWarning)
        try:
            popt, pcov = curve_fit(model, x, y, p0=p0, method="lm", maxfev=MAX_EVALUATIONS,
                                   xtol=1e-14, ftol=1e-14)
        except (RuntimeError, ValueError) as e:
            raise FitError(f"Least-squares fit did not converge: {e}") from e
    stderr = np.sqrt(np.clip(np.diag(pcov), 0.0, None)) if np.all(np.isfinite(pcov)) else np.full(len(p0), np.nan)
    return popt, stderr


def estimate_decay_time(times, values) -> float:
    """tau from the log-slope of the first third above the tail mean.

    The signal must change faster over its first third than over its last.
    """
    t, y = _as_series(times, values)
    third = max(t.size // 3, 2)
    offset = float(np.mean(y[-third:]))
    amplitude = float(y[0] - offset)
    if amplitude == 0.0:
        raise FitError("Signal starts at its tail value; no decay to estimate")
    if abs(y[-1] - y[-third]) >= abs(y[third - 1] - y[0]):
        raise FitError("Signal moves away from its tail value; no decay to estimate")
    head = np.sign(amplitude) * (y[:third] - offset)
    usable = head > 0.05 * abs(amplitude)
    if usable.sum() < 2:
        raise FitError("Too few points above the tail to estimate a decay time")
    slope = np.polyfit(t[:third][usable] - t[0], np.log(head[usable]), 1)[0]
    if not np.isfinite(slope) or slope >= 0:
        raise FitError("Signal does not decay")
    return float(-1.0 / slope)


def fit_exponential(times, values) -> ExponentialFit:
    """Least-squares A exp(-t/tau) + B.

    Starts from B = tail mean, A = head minus tail and tau from the log-slope
    of the first third; time and value axes are rescaled to O(1) for the
    Levenberg-Marquardt iteration.
    """
    t, y = _as_series(times, values)
    tau0 = estimate_decay_time(t, y)
    third = max(t.size // 3, 2)
    offset0 = float(np.mean(y[-third:]))
    amplitude0 = float(y[0] - offset0)

    span = float(t[-1] - t[0])
    yscale = float(np.max(np.abs(y)))
    ts = (t - t[0]) / span
    ys = y / yscale
    p0 = [amplitude0 / yscale, tau0 / span, offset0 / yscale]
    popt, stderr = _run_curve_fit(exponential, ts, ys, p0)
    amplitude, tau, offset = popt
    if not np.isfinite(tau) or tau <= 0:
        raise FitError(f"Fitted time constant is not positive (tau={tau * span:.3g} s)")
    result = ExponentialFit(
        amplitude=float(amplitude * yscale),
        tau=float(tau * span),
        offset=float(offset * yscale),
        amplitude_stderr=float(stderr[0] * yscale),
        tau_stderr=float(stderr[1] * span),
        offset_stderr=float(stderr[2] * yscale),
        t0=float(t[0]),
    )
    logging.debug(f"[fit] exponential tau={result.tau:.6g} +/- {result.tau_stderr:.3g}")
    return result


def _half_width(x: np.ndarray, y: np.ndarray, peak: int, half: float, sign: float) -> float:
    above = sign * (y - half) >= 0
    left = peak
    while left > 0 and above[left - 1]:
        left -= 1
    right = peak
    while right < x.size - 1 and above[right + 1]:
        right += 1
    if left == 0 or right == x.size - 1:
        return 0.1 * float(x[-1] - x[0])

    def crossing(i_out: int, i_in: int) -> float:
        frac = (half - y[i_out]) / (y[i_in] - y[i_out])
        return float(x[i_out] + frac * (x[i_in] - x[i_out]))

    return 0.5 * abs(crossing(right + 1, right) - crossing(left - 1, left))


def fit_lorentzian(detunings, values) -> LorentzianFit:
    """Least-squares A / (1 + ((x - x0)/w)^2) + B for a peak or a dip.

    The half width w is the HWHM reported as delta.
    """
    x, y = _as_series(detunings, values)
    steps = np.diff(y)
    if np.all(steps >= 0) or np.all(steps <= 0):
        raise FitError("Input is monotone; no resonance to fit")
    median = float(np.median(y))
    sign = 1.0 if (y.max() - median) >= (median - y.min()) else -1.0
    peak = int(np.argmax(sign * y))
    if peak in (0, x.size - 1):
        raise FitError("Extremum sits on the edge of the grid")
    edge = max(1, x.size // 10)
    offset0 = float(np.mean(np.concatenate([y[:edge], y[-edge:]])))
    amplitude0 = float(y[peak] - offset0)
    hwhm0 = _half_width(x, y, peak, offset0 + 0.5 * amplitude0, sign)

    xscale = float(x[-1] - x[0])
    yscale = float(np.max(np.abs(y)))
    xs = (x - x[peak]) / xscale
    ys = y / yscale
    p0 = [0.0, hwhm0 / xscale, amplitude0 / yscale, offset0 / yscale]
    popt, stderr = _run_curve_fit(lorentzian, xs, ys, p0)
    center, hwhm, amplitude, offset = popt
    result = LorentzianFit(
        center=float(center * xscale + x[peak]),
        hwhm=float(abs(hwhm) * xscale),
        amplitude=float(amplitude * yscale),
        offset=float(offset * yscale),
        center_stderr=float(stderr[0] * xscale),
        hwhm_stderr=float(stderr[1] * xscale),
        amplitude_stderr=float(stderr[2] * yscale),
        offset_stderr=float(stderr[3] * yscale),
    )
    logging.debug(f"[fit] lorentzian center={result.center:.6g} hwhm={result.hwhm:.6g}")
    return result


def gaussian_quadrature(sigma: float, nodes: int = 15) -> Tuple[np.ndarray, np.ndarray]:
    """Offsets x_k and weights w_k with sum_k w_k f(x_k) ~ E[f(X)], X ~ N(0, sigma^2)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if nodes < 1:
        raise ValueError(f"nodes must be >= 1, got {nodes}")
    if sigma == 0:
        return np.zeros(1), np.ones(1)
    t, w = hermgauss(nodes)
    return np.sqrt(2.0) * sigma * t, w / np.sqrt(np.pi)
