import configparser
import logging
import os
import pathlib
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from app.errors import ConfigParseError, ConfigurationError, UnitError
from .atom_cavity_model import (GAUSS, MHZ, NORMALIZATIONS, POLARIZATIONS, TWO_PI, DecayRates, LaserParams,
                                SystemParams, check_cavity_configuration)
from .experiments import InversionSettings, ScanSettings, TransientSettings

SCHEMA_VERSION = "1"
CONFIG_ENV = "ION_CAVITY_CONFIG"
DEFAULT_CONFIG_PATH = pathlib.Path(__file__).resolve().parents[2] / "default.cfg"

# kind -> {suffix: factor to SI}; the first suffix is the canonical one used by render()
UNITS: Dict[str, Dict[str, float]] = {
    "frequency": {"MHz_2pi": MHZ, "kHz_2pi": TWO_PI * 1e3},
    "time": {"ns": 1e-9, "us": 1e-6},
    "field": {"G": GAUSS, "T": 1.0},
}

_DECAY = DecayRates()

# section -> key -> (kind, default in canonical human units)
SCHEMA: Dict[str, Dict[str, Tuple[str, Any]]] = {
    "meta": {
        "schema_version": ("str", SCHEMA_VERSION),
    },
    "laser_397": {
        "rabi": ("frequency", 18.2),
        "detuning": ("frequency", -11.4),
        "polarization": ("polarization", "pi"),
    },
    "laser_850": {
        "rabi": ("frequency", 6.5),
        "detuning": ("frequency", -1.1),
        "polarization": ("polarization", "sigma_pair"),
    },
    "laser_854": {
        "rabi": ("frequency", 8.9),
        "detuning": ("frequency", 24.8),
        "polarization": ("polarization", "sigma_pair"),
    },
    "cavity": {
        "g_bar": ("frequency", 5.3),
        "kappa": ("frequency", 4.2),
        "detuning": ("frequency", -11.4),
        "sigma_inhom": ("frequency", 3.1),
        "modes": ("int", 2),
        "fock_cutoff": ("int", 1),
        "polarizations": ("polarization_list", ("sigma_plus", "sigma_minus")),
    },
    "atom": {
        "b_field": ("field", 0.78),
        "coupling_normalization": ("str", "strongest"),
    },
    "decay": {name: ("frequency", rate / MHZ) for name, rate in _DECAY.channels_by_name().items()},
    "transient": {
        "duration": ("time", 8000.0),
        "points": ("int", 801),
        "include_393": ("bool", True),
        "broaden": ("bool", True),
        "quadrature_nodes": ("int", 15),
        "evolve_method": ("str", "expm"),
        "rtol": ("float", 1e-9),
        "atol": ("float", 1e-12),
        "tau_off_target": ("time", 1246.0),
        "omega_min": ("frequency", 5.0),
        "omega_max": ("frequency", 40.0),
    },
    "scan": {
        "span": ("frequency", 120.0),
        "points": ("int", 121),
        "reference_offset": ("frequency", 80.0),
        "quadrature_nodes": ("int", 15),
        "include_393": ("bool", True),
    },
    "inversion": {
        "tau_on": ("time", 292.0),
        "delta": ("frequency", 10.3),
        "g_min": ("frequency", 3.0),
        "g_max": ("frequency", 8.0),
        "g_points": ("int", 21),
        "sigma_min": ("frequency", 0.0),
        "sigma_max": ("frequency", 6.0),
        "sigma_points": ("int", 21),
        "refine": ("bool", True),
        "surrogate_span": ("frequency", 150.0),
        "surrogate_points": ("int", 301),
        "transient_points": ("int", 41),
    },
    "suppression": {
        "delta_850": ("frequency_list", (-1.1, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)),
        "span": ("frequency", 120.0),
        "points": ("int", 121),
    },
    "eq1": {
        "v_values": ("float_list", (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)),
        "w_values": ("float_list", (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)),
    },
    "output": {
        "directory": ("str", "results"),
    },
}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:\s#;\[][^=:]*?)\s*[=:]")
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass(frozen=True)
class RunConfig:
    """Resolved run configuration; SI angular units inside, human units in ``entries``."""

    system: SystemParams
    transient: TransientSettings
    scan: ScanSettings
    inversion: InversionSettings
    suppression_scan: ScanSettings
    tau_off_target: float
    omega_bracket: Tuple[float, float]
    tau_on_measured: float
    delta_measured: float
    delta_850: Tuple[float, ...]
    eq1_v: Tuple[float, ...]
    eq1_w: Tuple[float, ...]
    output_directory: str
    schema_version: str
    entries: Dict[str, Dict[str, Any]] = field(repr=False)
    defaults_filled: Tuple[str, ...] = ()
    warnings: Tuple[str, ...] = ()
    source: Optional[str] = None

    def render(self) -> str:
        """Canonical text of every key; loading it back gives the same run."""
        lines: List[str] = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (kind, _) in keys.items():
                lines.append(f"{key} = {_format_value(kind, self.entries[section][key])}")
            lines.append("")
        return "\n".join(lines).rstrip("\n") + "\n"


def _format_number(x: float) -> str:
    return f"{x:.12g}"


def _format_value(kind: str, value: Any) -> str:
    if kind in UNITS:
        return f"{_format_number(value)} {next(iter(UNITS[kind]))}"
    if kind == "frequency_list":
        return ", ".join(_format_number(v) for v in value) + f" {next(iter(UNITS['frequency']))}"
    if kind == "float_list":
        return ", ".join(_format_number(v) for v in value)
    if kind == "polarization_list":
        return ", ".join(value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return _format_number(value)
    return str(value)


def _split_list(raw: str) -> List[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def _parse_number(text: str, line: Optional[int], key: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigParseError(f"'{text}' is not a number", line=line, key=key) from None


def _parse_dimensional(kind: str, raw: str, line: Optional[int], key: str) -> float:
    """Value in canonical human units, e.g. '250 kHz_2pi' -> 0.25 (MHz_2pi)."""
    parts = raw.split()
    if len(parts) != 2:
        raise UnitError(f"'{raw}' needs a number and a {kind} unit ({', '.join(UNITS[kind])})", line=line, key=key)
    number, unit = parts
    if unit not in UNITS[kind]:
        raise UnitError(f"unit '{unit}' is not a {kind} unit ({', '.join(UNITS[kind])})", line=line, key=key)
    canonical = next(iter(UNITS[kind].values()))
    value = _parse_number(number, line, key)
    return value if UNITS[kind][unit] == canonical else value * UNITS[kind][unit] / canonical


def _parse_value(kind: str, raw: str, line: Optional[int], key: str) -> Any:
    raw = raw.strip()
    if kind in UNITS:
        return _parse_dimensional(kind, raw, line, key)
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigParseError(f"'{raw}' is not an integer", line=line, key=key) from None
    if kind == "float":
        if len(raw.split()) > 1:
            raise UnitError(f"'{raw}' is dimensionless and takes no unit", line=line, key=key)
        return _parse_number(raw, line, key)
    if kind == "bool":
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ConfigParseError(f"'{raw}' is not a boolean", line=line, key=key)
    if kind == "polarization":
        if raw not in POLARIZATIONS:
            raise ConfigParseError(f"unknown polarization '{raw}' ({', '.join(POLARIZATIONS)})", line=line, key=key)
        return raw
    if kind == "polarization_list":
        names = tuple(_split_list(raw))
        for name in names:
            if name not in POLARIZATIONS:
                raise ConfigParseError(f"unknown polarization '{name}'", line=line, key=key)
        return names
    if kind == "frequency_list":
        # one shared unit after the last number: "-1.1, 10, 20 MHz_2pi"
        body, _, unit = raw.rpartition(" ")
        if not body or unit not in UNITS["frequency"]:
            raise UnitError(f"'{raw}' needs a trailing frequency unit", line=line, key=key)
        return tuple(_parse_dimensional("frequency", f"{x} {unit}", line, key) for x in _split_list(body))
    if kind == "float_list":
        return tuple(_parse_number(x, line, key) for x in _split_list(raw))
    return raw


def _line_numbers(text: str) -> Dict[Tuple[str, str], int]:
    """(section, key) -> 1-based line number; section headers map to key ''."""
    numbers: Dict[Tuple[str, str], int] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        header = _SECTION_RE.match(line)
        if header:
            section = header.group(1).strip()
            numbers.setdefault((section, ""), lineno)
            continue
        key = _KEY_RE.match(line)
        if key and section:
            numbers.setdefault((section, key.group(1).strip()), lineno)
    return numbers


def _read_parser(text: str, source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), strict=True,
                                       empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigParseError("key outside of any [section]", line=e.lineno) from e
    except configparser.DuplicateSectionError as e:
        raise ConfigParseError(f"duplicate section [{e.section}]", line=e.lineno) from e
    except configparser.DuplicateOptionError as e:
        raise ConfigParseError("duplicate key", line=e.lineno, key=e.option) from e
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigParseError(f"cannot parse {line!r}", line=lineno) from e
    return parser


def resolve_config_path(path: Optional[str] = None) -> pathlib.Path:
    """--config, then $ION_CAVITY_CONFIG, then the shipped default.cfg."""
    if path:
        return pathlib.Path(path)
    env_path = os.getenv(CONFIG_ENV)
    if env_path:
        return pathlib.Path(env_path)
    return DEFAULT_CONFIG_PATH


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = _read_parser(text, source)
    lines = _line_numbers(text)
    entries: Dict[str, Dict[str, Any]] = {}
    filled: List[str] = []
    warnings: List[str] = []

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigParseError(f"unknown section [{section}]", line=lines.get((section, "")), key=section)
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigParseError("unknown key", line=lines.get((section, key)), key=f"{section}.{key}")

    for section, keys in SCHEMA.items():
        entries[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                entries[section][key] = _parse_value(kind, parser.get(section, key), lines.get((section, key)),
                                                     f"{section}.{key}")
            else:
                entries[section][key] = default
                filled.append(f"{section}.{key}")

    if not parser.sections():
        warnings.append("configuration is empty; every key takes its default")
    elif filled:
        warnings.append(f"{len(filled)} key(s) missing, defaults used: {', '.join(filled)}")
    for message in warnings:
        logging.warning(f"[config] {source}: {message}")

    if entries["meta"]["schema_version"] != SCHEMA_VERSION:
        raise ConfigParseError(f"schema_version '{entries['meta']['schema_version']}' is not supported "
                               f"(expected '{SCHEMA_VERSION}')", line=lines.get(("meta", "schema_version")),
                               key="meta.schema_version")
    return _build(entries, tuple(filled), tuple(warnings), source)


def _laser(block: Dict[str, Any]) -> LaserParams:
    return LaserParams(block["rabi"] * MHZ, block["detuning"] * MHZ, POLARIZATIONS[block["polarization"]])


def _build(entries: Dict[str, Dict[str, Any]], filled: Tuple[str, ...], warnings: Tuple[str, ...],
           source: str) -> RunConfig:
    cav, atom, tr, sc, inv, sup = (entries[s] for s in ("cavity", "atom", "transient", "scan", "inversion",
                                                        "suppression"))
    if cav["kappa"] <= 0:
        raise ConfigurationError(f"cavity.kappa must be > 0, got {cav['kappa']} MHz_2pi")
    if cav["modes"] not in (1, 2):
        raise ConfigurationError(f"cavity.modes must be 1 or 2, got {cav['modes']}")
    if atom["coupling_normalization"] not in NORMALIZATIONS:
        raise ConfigurationError(f"atom.coupling_normalization must be one of {NORMALIZATIONS}")
    if tr["evolve_method"] not in ("RK45", "DOP853", "expm"):
        raise ConfigurationError(f"transient.evolve_method '{tr['evolve_method']}' is not RK45, DOP853 or expm")
    if tr["points"] < 8 or sc["points"] < 8 or sup["points"] < 8:
        raise ConfigurationError("transient, scan and suppression grids need at least 8 points")
    if inv["g_points"] < 2 or inv["sigma_points"] < 2:
        raise ConfigurationError("inversion grid needs at least 2 points per axis")

    polarizations = tuple(POLARIZATIONS[name] for name in cav["polarizations"])
    system = SystemParams(
        l397=_laser(entries["laser_397"]),
        l850=_laser(entries["laser_850"]),
        l854=_laser(entries["laser_854"]),
        g_bar=cav["g_bar"] * MHZ,
        kappa=cav["kappa"] * MHZ,
        sigma_inhom=cav["sigma_inhom"] * MHZ,
        delta_cav=cav["detuning"] * MHZ,
        b_field=atom["b_field"] * GAUSS,
        decay=DecayRates(**{name: value * MHZ for name, value in entries["decay"].items()}),
        fock_cutoff=cav["fock_cutoff"],
        cavity_modes=cav["modes"],
        cavity_polarizations=polarizations,
        coupling_normalization=atom["coupling_normalization"],
    )
    check_cavity_configuration(system)

    transient = TransientSettings(duration=tr["duration"] * 1e-9, points=tr["points"], include_393=tr["include_393"],
                                  broaden=tr["broaden"], quadrature_nodes=tr["quadrature_nodes"],
                                  evolve_method=tr["evolve_method"], rtol=tr["rtol"], atol=tr["atol"])
    scan = ScanSettings(span=sc["span"] * MHZ, points=sc["points"], reference_offset=sc["reference_offset"] * MHZ,
                        quadrature_nodes=sc["quadrature_nodes"], include_393=sc["include_393"])
    inversion = InversionSettings(g_min=inv["g_min"] * MHZ, g_max=inv["g_max"] * MHZ, g_points=inv["g_points"],
                                  sigma_min=inv["sigma_min"] * MHZ, sigma_max=inv["sigma_max"] * MHZ,
                                  sigma_points=inv["sigma_points"], refine=inv["refine"],
                                  surrogate_span=inv["surrogate_span"] * MHZ,
                                  surrogate_points=inv["surrogate_points"],
                                  transient_points=inv["transient_points"])
    suppression_scan = ScanSettings(span=sup["span"] * MHZ, points=sup["points"],
                                    reference_offset=sc["reference_offset"] * MHZ,
                                    quadrature_nodes=sc["quadrature_nodes"], include_393=True)
    return RunConfig(
        system=system,
        transient=transient,
        scan=scan,
        inversion=inversion,
        suppression_scan=suppression_scan,
        tau_off_target=tr["tau_off_target"] * 1e-9,
        omega_bracket=(tr["omega_min"] * MHZ, tr["omega_max"] * MHZ),
        tau_on_measured=inv["tau_on"] * 1e-9,
        delta_measured=inv["delta"] * MHZ,
        delta_850=tuple(d * MHZ for d in sup["delta_850"]),
        eq1_v=tuple(entries["eq1"]["v_values"]),
        eq1_w=tuple(entries["eq1"]["w_values"]),
        output_directory=entries["output"]["directory"],
        schema_version=entries["meta"]["schema_version"],
        entries=entries,
        defaults_filled=filled,
        warnings=warnings,
        source=source,
    )


def load_config(path=None) -> RunConfig:
    resolved = resolve_config_path(path)
    try:
        text = resolved.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {resolved}") from None
    except OSError as e:
        raise ConfigurationError(f"cannot read config {resolved}: {e}") from e
    logging.info(f"[config] loading {resolved}")
    return parse_config(text, source=str(resolved))
