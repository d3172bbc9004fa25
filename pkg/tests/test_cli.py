import numpy as np
import pytest

import app.cli as cli
from app.errors import EXIT_OK, EXIT_SOLVER, EXIT_VALIDATION, InversionError, SolverError
from app.services.atom_cavity_model import MHZ
from app.services.experiments import CAVITY_EMISSION, UV_NORMALIZED, Spectrum, SuppressionPoint, SuppressionSweep
from app.services.storage import read_csv, read_metadata
from app.services.validation import CheckResult


def _run(default_cfg_path, tmp_path, *argv):
    return cli.main(list(argv) + ["--config", str(default_cfg_path), "--out", str(tmp_path)])


def _spectra():
    d = -11.4 * MHZ + np.linspace(-40, 40, 9) * MHZ
    bump = np.exp(-((d + 11.4 * MHZ) / (10 * MHZ)) ** 2)
    return (Spectrum(d, bump, CAVITY_EMISSION, peak_detuning=-11.4 * MHZ, hwhm=10.3 * MHZ),
            Spectrum(d, 1.0 - 0.2 * bump, UV_NORMALIZED, peak_detuning=-11.4 * MHZ, include_393=True))


def test_unknown_command_is_a_usage_error(capsys):
    assert cli.main(["teleport"]) == EXIT_VALIDATION
    assert "invalid choice" in capsys.readouterr().err


def test_bad_flag_value_is_a_usage_error(default_cfg_path, tmp_path):
    assert _run(default_cfg_path, tmp_path, "shelve", "--cavity", "maybe") == EXIT_VALIDATION


def test_help_exits_cleanly(capsys):
    assert cli.main(["--help"]) == EXIT_OK
    assert "shelve" in capsys.readouterr().out


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["derive", "--config", str(tmp_path / "absent.cfg")]) == EXIT_VALIDATION
    assert "error:" in capsys.readouterr().err


def test_derive_prints_cooperativity(default_cfg_path, tmp_path, capsys):
    assert _run(default_cfg_path, tmp_path, "derive") == EXIT_OK
    out = capsys.readouterr().out
    assert "cooperativity C = 0.298" in out
    assert "866 nm line" in out


def test_scan_writes_both_spectra_without_thread_count(default_cfg_path, tmp_path, monkeypatch, capsys):
    seen = {}

    def fake_scan(p, settings=None, threads=1):
        seen["include_393"] = settings.include_393
        seen["threads"] = threads
        return _spectra()

    monkeypatch.setattr(cli, "cavity_scan", fake_scan)
    assert _run(default_cfg_path, tmp_path, "scan", "--include-393", "false", "--threads", "3") == EXIT_OK
    assert seen == {"include_393": False, "threads": 3}
    meta = read_metadata(tmp_path / "scan_uv_normalized.csv")
    assert meta["command"] == "scan --include-393 false"
    assert meta["defaults_filled"] == "none"
    assert len(read_csv(tmp_path / "scan_cavity_emission.csv")) == 9
    assert "correlation = -1.000" in capsys.readouterr().out


def test_solver_failure_maps_to_exit_two(default_cfg_path, tmp_path, monkeypatch, capsys):
    def failing(*args, **kwargs):
        raise SolverError("Steady state did not converge", residual=1e-3, detuning=0.0)

    monkeypatch.setattr(cli, "cavity_scan", failing)
    assert _run(default_cfg_path, tmp_path, "scan") == EXIT_SOLVER
    assert "did not converge" in capsys.readouterr().err


def test_failed_inversion_still_writes_contours(default_cfg_path, tmp_path, monkeypatch):
    contour = [np.array([[4 * MHZ, 1 * MHZ], [5 * MHZ, 2 * MHZ]])]

    def no_crossing(*args, **kwargs):
        raise InversionError("contours do not cross", tau_contour=contour, delta_contour=[])

    monkeypatch.setattr(cli, "invert_parameters", no_crossing)
    assert _run(default_cfg_path, tmp_path, "invert") == EXIT_SOLVER
    frame = read_csv(tmp_path / "inversion_contours.csv")
    assert set(frame["contour"]) == {"tau_on"}
    assert len(frame) == 2


def test_eq1_table_is_written(default_cfg_path, tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "estimate_pump_rate", lambda p: (2 * np.pi * 10e6, (0.5, 0.1, 0.4)))
    assert _run(default_cfg_path, tmp_path, "eq1") == EXIT_OK
    frame = read_csv(tmp_path / "eq1.csv")
    assert len(frame) == 10 * 8
    assert frame["normalized_fluorescence"].max() == pytest.approx(1.0)


@pytest.mark.parametrize("passed, code", [(True, EXIT_OK), (False, EXIT_VALIDATION)])
def test_validate_exit_code(default_cfg_path, tmp_path, monkeypatch, capsys, passed, code):
    monkeypatch.setattr(cli, "run_validation",
                        lambda p, threads=2: [CheckResult("superoperator", True, "fine"),
                                              CheckResult("fock_cutoff", passed, "changes by 0.1%")])
    assert _run(default_cfg_path, tmp_path, "validate") == code
    out = capsys.readouterr().out
    assert "superoperator" in out
    assert ("FAILED" in out) is (not passed)


def test_calibrate_prints_rabi_frequency(default_cfg_path, tmp_path, monkeypatch, capsys):
    seen = {}

    def fake_calibrate(p, target, settings, bracket):
        seen["target"], seen["bracket"] = target, bracket
        return 18.2 * MHZ

    monkeypatch.setattr(cli, "calibrate_omega397", fake_calibrate)
    assert _run(default_cfg_path, tmp_path, "calibrate") == EXIT_OK
    assert seen["target"] == pytest.approx(1246e-9)
    assert seen["bracket"] == pytest.approx((5 * MHZ, 40 * MHZ))
    assert "2pi * 18.200 MHz" in capsys.readouterr().out


def test_suppress_reports_the_counted_photons(default_cfg_path, tmp_path, monkeypatch, capsys):
    sweep = SuppressionSweep((SuppressionPoint(-1.1 * MHZ, 0.50, 0.55), SuppressionPoint(30 * MHZ, 0.66, 0.60)))
    monkeypatch.setattr(cli, "suppression_sweep", lambda p, delta850_list, settings=None, threads=1: sweep)
    assert _run(default_cfg_path, tmp_path, "suppress", "--include-393", "false") == EXIT_OK
    assert "maximum suppression (397 nm only) 0.600 at Delta_850 = +30.00 MHz" in capsys.readouterr().out
    assert read_metadata(tmp_path / "suppression.csv")["command"] == "suppress --include-393 false"
    assert len(read_csv(tmp_path / "suppression.csv")) == 2


def test_include_393_is_accepted_by_every_command(default_cfg_path, tmp_path):
    assert _run(default_cfg_path, tmp_path, "derive", "--include-393", "true") == EXIT_OK
