import argparse
import logging
import os
import pathlib
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional

from app.errors import EXIT_OK, EXIT_VALIDATION, InversionError, IonCavityError, exit_code_for
from app.services.atom_cavity_model import (BASIS, MHZ, TRANSITIONS, atomic_dipole_decay, cooperativity,
                                            purcell_enhancement, purcell_rate)
from app.services.config import RunConfig, load_config
from app.services.effective_three_level import (effective_rates_from_full, eq1_table, estimate_pump_rate,
                                                exact_normalized_fluorescence, normalized_fluorescence_eq1)
from app.services.experiments import (anticorrelation, calibrate_omega397, cavity_scan, invert_parameters,
                                      shelving_transient, suppression_sweep)
from app.services.storage import contour_frame, emit_csv, inversion_grid_frame, write_frame
from app.services.validation import run_validation
from app.worker import resolve_threads

LOG_LEVEL_ENV = "ION_CAVITY_LOG_LEVEL"


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the validation code instead of argparse's 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    lowered = value.lower()
    if lowered not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {value!r}")
    return lowered == "on"


def _true_false(value: str) -> bool:
    lowered = value.lower()
    if lowered not in ("true", "false"):
        raise argparse.ArgumentTypeError(f"expected true|false, got {value!r}")
    return lowered == "true"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (default: $ION_CAVITY_CONFIG, then default.cfg)")
    common.add_argument("--out", help="output directory (default: output.directory of the config)")
    common.add_argument("--threads", type=int, default=None, help="worker processes, 0 = one per CPU")
    common.add_argument("--include-393", type=_true_false, default=None,
                        help="count 393 nm photons (default: from the config; ignored by eq1, validate and derive)")

    parser = _Parser(prog="ion_cavity", description="Ion-cavity anti-correlated emission toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    shelve = sub.add_parser("shelve", parents=[common], help="shelving transients and tau_on / tau_off")
    shelve.add_argument("--cavity", type=_on_off, default=None, help="on|off (default: both)")

    sub.add_parser("scan", parents=[common], help="cavity-detuning scan: emission and normalized UV")

    sub.add_parser("invert", parents=[common], help="(g_bar, sigma) from the measured tau_on and delta")
    sub.add_parser("suppress", parents=[common], help="maximum UV suppression versus Delta_850")

    eq1 = sub.add_parser("eq1", parents=[common], help="effective three-level normalized fluorescence table")
    eq1.add_argument("--from-model", action="store_true", help="also map the full model onto effective rates")

    sub.add_parser("validate", parents=[common], help="run the property suite")
    sub.add_parser("calibrate", parents=[common], help="Omega_397 reproducing transient.tau_off_target")
    sub.add_parser("derive", parents=[common], help="cooperativity and related figures")
    return parser


def configure_logging() -> None:
    level = os.getenv(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(message)s")


def _output_dir(args: argparse.Namespace, cfg: RunConfig) -> pathlib.Path:
    return pathlib.Path(args.out or cfg.output_directory)


def _metadata(cfg: RunConfig, command: str) -> Dict[str, Any]:
    # --threads is left out: output must not depend on it
    meta: Dict[str, Any] = {"command": command}
    meta["defaults_filled"] = ", ".join(cfg.defaults_filled) or "none"
    return meta


def _emit(result, path: pathlib.Path, cfg: RunConfig, command: str) -> None:
    emit_csv(result, path, metadata=_metadata(cfg, command), config_text=cfg.render())


def _counted_photons(args, settings):
    if args.include_393 is None:
        return settings
    return replace(settings, include_393=args.include_393)


def _run_shelve(args, cfg: RunConfig, threads: int) -> int:
    settings = _counted_photons(args, cfg.transient)
    modes = [args.cavity] if args.cavity is not None else [False, True]
    taus = {}
    for cavity_on in modes:
        transient = shelving_transient(cfg.system, cavity_on=cavity_on, settings=settings, threads=threads)
        label = "on" if cavity_on else "off"
        taus[label] = transient.tau_fit
        _emit(transient, _output_dir(args, cfg) / f"shelve_cavity_{label}.csv", cfg,
              f"shelve --cavity {label} --include-393 {str(settings.include_393).lower()}")
        print(f"tau_{label} = {transient.tau_fit * 1e9:.1f} +/- {transient.tau_stderr * 1e9:.1f} ns")
    if len(taus) == 2:
        print(f"tau_off / tau_on = {purcell_enhancement(taus['off'], taus['on']):.2f}")
    return EXIT_OK


def _run_scan(args, cfg: RunConfig, threads: int) -> int:
    settings = _counted_photons(args, cfg.scan)
    cavity, uv = cavity_scan(cfg.system, settings=settings, threads=threads)
    command = f"scan --include-393 {str(settings.include_393).lower()}"
    out = _output_dir(args, cfg)
    _emit(cavity, out / "scan_cavity_emission.csv", cfg, command)
    _emit(uv, out / "scan_uv_normalized.csv", cfg, command)
    if cavity.hwhm is not None:
        print(f"delta = {cavity.hwhm / MHZ:.3f} MHz (peak at {cavity.peak_detuning / MHZ:.3f} MHz)")
    print(f"min normalized UV = {uv.values.min():.4f}, correlation = {anticorrelation(cavity, uv):.3f}")
    return EXIT_OK


def _run_invert(args, cfg: RunConfig, threads: int) -> int:
    out = _output_dir(args, cfg)
    try:
        result = invert_parameters(cfg.tau_on_measured, cfg.delta_measured, cfg.system, cfg.inversion,
                                   _counted_photons(args, cfg.transient), _counted_photons(args, cfg.scan),
                                   threads=threads)
    except InversionError as e:
        write_frame(contour_frame(e.tau_contour, e.delta_contour), out / "inversion_contours.csv",
                    "InversionContours", _metadata(cfg, "invert"), cfg.render())
        raise
    _emit(result, out / "inversion_contours.csv", cfg, "invert")
    write_frame(inversion_grid_frame(result), out / "inversion_grids.csv", "InversionGrids",
                _metadata(cfg, "invert"), cfg.render())
    print(f"g_bar = 2pi * {result.g_bar / MHZ:.3f} MHz, sigma = 2pi * {result.sigma / MHZ:.3f} MHz "
          f"(contour gap {result.residual:.2e} grid steps, relative mismatch {result.relative_mismatch:.2e})")
    return EXIT_OK


def _run_suppress(args, cfg: RunConfig, threads: int) -> int:
    settings = _counted_photons(args, cfg.suppression_scan)
    sweep = suppression_sweep(cfg.system, cfg.delta_850, settings=settings, threads=threads)
    _emit(sweep, _output_dir(args, cfg) / "suppression.csv", cfg,
          f"suppress --include-393 {str(settings.include_393).lower()}")
    for pt in sweep.points:
        print(f"Delta_850 = {pt.delta_850 / MHZ:+7.2f} MHz: {pt.suppression_with_393:.3f} "
              f"(397 nm only {pt.suppression_397_only:.3f})")
    best = sweep.best(settings.include_393)
    counted = "397 + 393 nm" if settings.include_393 else "397 nm only"
    print(f"maximum suppression ({counted}) {best.suppression(settings.include_393):.3f} "
          f"at Delta_850 = {best.delta_850 / MHZ:+.2f} MHz")
    return EXIT_OK


def _run_eq1(args, cfg: RunConfig, threads: int) -> int:
    gamma1 = cfg.system.decay.p12_s12
    pump, _ = estimate_pump_rate(cfg.system)
    table = eq1_table(cfg.eq1_v, cfg.eq1_w, gamma1, pump)
    _emit(table, _output_dir(args, cfg) / "eq1.csv", cfg, "eq1")
    print("v \\ w  " + " ".join(f"{w:>7.3g}" for w in table.w_values))
    for v, row in zip(table.v_values, table.values):
        print(f"{v:<6.3g} " + " ".join(f"{x:7.4f}" for x in row))
    if args.from_model:
        rates = effective_rates_from_full(cfg.system, cfg.transient)
        v, w = min(rates.v, 1.0), rates.w
        print(f"model: V = {rates.pump:.4g}/s, Gamma_3 = {rates.gamma3:.4g}/s, Gamma_2' = {rates.gamma2_prime:.4g}/s")
        closed_form = normalized_fluorescence_eq1(v, w, gamma1, rates.pump)
        print(f"model: v = {v:.3f}, w = {w:.3f}, closed form {closed_form:.4f}, "
              f"rate equations {exact_normalized_fluorescence(rates):.4f}")
    return EXIT_OK


def _run_validate(args, cfg: RunConfig, threads: int) -> int:
    results = run_validation(cfg.system, threads=threads)
    for r in results:
        print(f"{'ok    ' if r.passed else 'FAILED'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


def _run_calibrate(args, cfg: RunConfig, threads: int) -> int:
    omega = calibrate_omega397(cfg.system, cfg.tau_off_target, _counted_photons(args, cfg.transient),
                               bracket=cfg.omega_bracket)
    print(f"Omega_397 = 2pi * {omega / MHZ:.3f} MHz for tau_off = {cfg.tau_off_target * 1e9:.1f} ns")
    return EXIT_OK


def _run_derive(args, cfg: RunConfig, threads: int) -> int:
    p = cfg.system
    print(f"cooperativity C = {cooperativity(p):.4f}")
    print(f"gamma = 2pi * {atomic_dipole_decay(p) / MHZ:.4f} MHz")
    print(f"cavity-limited P1/2 -> D3/2 rate 2C(Gamma_1 + Gamma_2) = {purcell_rate(p):.4g} /s")
    for name in TRANSITIONS:
        lower, upper, _ = TRANSITIONS[name]
        print(f"{name} nm line: {lower} - {upper}, {BASIS.transition_wavelength_nm(name):.3f} nm")
    return EXIT_OK


COMMANDS = {
    "shelve": _run_shelve,
    "scan": _run_scan,
    "invert": _run_invert,
    "suppress": _run_suppress,
    "eq1": _run_eq1,
    "validate": _run_validate,
    "calibrate": _run_calibrate,
    "derive": _run_derive,
}


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        threads = resolve_threads(args.threads)
        return COMMANDS[args.command](args, cfg, threads)
    except (IonCavityError, ValueError, OSError) as e:
        logging.debug(f"[cli] {args.command} failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
