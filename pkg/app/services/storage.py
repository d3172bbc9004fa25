import logging
import pathlib
from functools import singledispatch
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from app import __version__
from .atom_cavity_model import MHZ
from .effective_three_level import Eq1Table
from .experiments import InversionResult, Spectrum, SuppressionSweep, Transient

FLOAT_FORMAT = "%.9g"


def _metadata_block(kind: str, metadata: Optional[Dict[str, Any]], config_text: Optional[str]) -> str:
    lines = [f"# artifact: ion-cavity {__version__}", f"# result: {kind}"]
    for key, value in (metadata or {}).items():
        lines.append(f"# {key}: {value}")
    if config_text:
        lines.append("# config:")
        lines.extend(f"#   {line}" if line else "#" for line in config_text.rstrip("\n").split("\n"))
    return "\n".join(lines) + "\n"


def write_frame(frame: pd.DataFrame, path, kind: str, metadata: Optional[Dict[str, Any]] = None,
                config_text: Optional[str] = None) -> pathlib.Path:
    """Metadata comment block, then the table with 9 significant digits."""
    target = pathlib.Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(_metadata_block(kind, metadata, config_text))
            frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise OSError(f"cannot write {target}: {e}") from e
    logging.info(f"[storage] wrote {len(frame)} row(s) to {target}")
    return target


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", float_precision="round_trip")


def read_metadata(path) -> Dict[str, str]:
    """Top-level ``# key: value`` entries of the metadata block."""
    meta: Dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].rstrip("\n")
            if body.startswith(" ") and not body.startswith("  ") and ":" in body:
                key, _, value = body[1:].partition(":")
                meta[key.strip()] = value.strip()
    return meta


@singledispatch
def to_frame(result) -> pd.DataFrame:
    raise TypeError(f"no CSV layout for {type(result).__name__}")


@to_frame.register
def _(result: Spectrum) -> pd.DataFrame:
    return pd.DataFrame({
        "detuning_over_2pi_MHz": result.detunings / MHZ,
        "relative_detuning_over_2pi_MHz": result.relative_detunings / MHZ,
        "value": result.values,
        "kind": result.kind,
    })


@to_frame.register
def _(result: Transient) -> pd.DataFrame:
    return pd.DataFrame({"time_ns": result.times * 1e9, "rate_per_s": result.rate})


@to_frame.register
def _(result: SuppressionSweep) -> pd.DataFrame:
    return pd.DataFrame({
        "delta_850_over_2pi_MHz": [pt.delta_850 / MHZ for pt in result.points],
        "suppression_with_393": [pt.suppression_with_393 for pt in result.points],
        "suppression_397_only": [pt.suppression_397_only for pt in result.points],
    })


@to_frame.register
def _(result: Eq1Table) -> pd.DataFrame:
    v, w = np.meshgrid(result.v_values, result.w_values, indexing="ij")
    return pd.DataFrame({"v": v.ravel(), "w": w.ravel(), "normalized_fluorescence": result.values.ravel()})


def contour_frame(tau_contour, delta_contour) -> pd.DataFrame:
    """Level-set polylines, one row per vertex, in MHz_2pi units."""
    rows: List[Dict[str, Any]] = []
    for name, contour in (("tau_on", tau_contour), ("delta", delta_contour)):
        for segment, line in enumerate(contour):
            for g, sigma in line:
                rows.append({"contour": name, "segment": segment, "g_bar_over_2pi_MHz": g / MHZ,
                             "sigma_over_2pi_MHz": sigma / MHZ})
    return pd.DataFrame(rows, columns=["contour", "segment", "g_bar_over_2pi_MHz", "sigma_over_2pi_MHz"])


@to_frame.register
def _(result: InversionResult) -> pd.DataFrame:
    return contour_frame(result.tau_contour, result.delta_contour)


def inversion_grid_frame(result: InversionResult) -> pd.DataFrame:
    """Both observable grids in long form, the two panels of the contour plot."""
    g, sigma = np.meshgrid(result.g_values, result.sigma_values, indexing="ij")
    return pd.DataFrame({
        "g_bar_over_2pi_MHz": g.ravel() / MHZ,
        "sigma_over_2pi_MHz": sigma.ravel() / MHZ,
        "tau_on_ns": result.tau_grid.ravel() * 1e9,
        "delta_over_2pi_MHz": result.delta_grid.ravel() / MHZ,
    })


@singledispatch
def summary(result) -> Dict[str, Any]:
    return {}


@summary.register
def _(result: Spectrum) -> Dict[str, Any]:
    out: Dict[str, Any] = {"kind": result.kind, "sigma_over_2pi_MHz": FLOAT_FORMAT % (result.sigma_applied / MHZ)}
    if result.peak_detuning is not None:
        out["peak_detuning_over_2pi_MHz"] = FLOAT_FORMAT % (result.peak_detuning / MHZ)
    if result.hwhm is not None:
        out["hwhm_over_2pi_MHz"] = FLOAT_FORMAT % (result.hwhm / MHZ)
    if result.include_393 is not None:
        out["include_393"] = str(result.include_393).lower()
    return out


@summary.register
def _(result: Transient) -> Dict[str, Any]:
    return {
        "cavity": "on" if result.cavity_on else "off",
        "include_393": str(result.include_393).lower(),
        "fit": "A*exp(-t/tau)+B",
        "tau_ns": FLOAT_FORMAT % (result.tau_fit * 1e9),
        "tau_stderr_ns": FLOAT_FORMAT % (result.tau_stderr * 1e9),
        "amplitude_per_s": FLOAT_FORMAT % result.amplitude,
        "offset_per_s": FLOAT_FORMAT % result.offset,
        "fit_window_ns": FLOAT_FORMAT % (result.window * 1e9),
        "sigma_over_2pi_MHz": FLOAT_FORMAT % (result.sigma_applied / MHZ),
    }


@summary.register
def _(result: InversionResult) -> Dict[str, Any]:
    return {
        "tau_on_measured_ns": FLOAT_FORMAT % (result.tau_on_measured * 1e9),
        "delta_measured_over_2pi_MHz": FLOAT_FORMAT % (result.delta_measured / MHZ),
        "g_bar_over_2pi_MHz": FLOAT_FORMAT % (result.g_bar / MHZ),
        "sigma_over_2pi_MHz": FLOAT_FORMAT % (result.sigma / MHZ),
        "contour_gap_grid_steps": FLOAT_FORMAT % result.residual,
        "relative_mismatch": FLOAT_FORMAT % result.relative_mismatch,
    }


@summary.register
def _(result: Eq1Table) -> Dict[str, Any]:
    return {"gamma1_per_s": FLOAT_FORMAT % result.gamma1, "pump_per_s": FLOAT_FORMAT % result.pump}


def emit_csv(result, path, metadata: Optional[Dict[str, Any]] = None,
             config_text: Optional[str] = None) -> pathlib.Path:
    """Write ``result`` as UTF-8 CSV headed by its fit summary and the resolved config."""
    meta = dict(summary(result))
    meta.update(metadata or {})
    return write_frame(to_frame(result), path, type(result).__name__, meta, config_text)
