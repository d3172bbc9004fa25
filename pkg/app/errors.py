from typing import Any, List, Optional, Sequence


class IonCavityError(Exception):
    """Base class for every error raised by the toolkit."""


class QuantumNumberError(IonCavityError, ValueError):
    pass


class ConfigurationError(IonCavityError, ValueError):
    pass


class ConfigParseError(ConfigurationError):
    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key:
            where.append(f"key '{key}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class UnitError(ConfigParseError):
    pass


class DimensionError(IonCavityError, ValueError):
    pass


class DomainError(IonCavityError, ValueError):
    pass


class SolverError(IonCavityError, RuntimeError):
    def __init__(self, message: str, residual: Optional[float] = None, detuning: Optional[float] = None):
        self.residual = residual
        self.detuning = detuning
        super().__init__(message)


class StiffnessError(SolverError):
    pass


class AnalysisError(IonCavityError, RuntimeError):
    pass


class FitError(AnalysisError):
    pass


class CalibrationError(AnalysisError):
    def __init__(self, message: str, bracket: Optional[Sequence[float]] = None,
                 values: Optional[Sequence[float]] = None):
        self.bracket = tuple(bracket) if bracket is not None else None
        self.values = tuple(values) if values is not None else None
        super().__init__(message)


class InversionError(AnalysisError):
    def __init__(self, message: str, tau_contour: Optional[List[Any]] = None,
                 delta_contour: Optional[List[Any]] = None):
        # both contours are kept so the caller can plot why they missed
        self.tau_contour = tau_contour or []
        self.delta_contour = delta_contour or []
        super().__init__(message)


class DegenerateSystemError(AnalysisError):
    pass


class ExtractionError(AnalysisError):
    pass


# Exit codes used by the CLI driver
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (SolverError, AnalysisError, DimensionError)):
        return EXIT_SOLVER
    return EXIT_VALIDATION
