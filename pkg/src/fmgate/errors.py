"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, infeasible design requests with 3, and simulation failures with 4.
"""


class FMGateError(Exception):
    """Base class for all package errors."""


class ConfigError(FMGateError):
    """Bad, missing, or unknown configuration input."""


class ConvergenceError(FMGateError):
    """An iterative solve failed to reach its tolerance."""


class UnstableChainError(FMGateError):
    """Mode spectrum has a non-positive eigenvalue (trap too weak)."""


class InfeasiblePulseError(FMGateError):
    """No pulse satisfying the constraints was found.

    Carries the best residual seen and the Rabi frequency it would need,
    so callers can report how far from feasible the request was.
    """

    def __init__(self, message, best_residual=None, required_rabi_khz=None):
        super().__init__(message)
        self.best_residual = best_residual
        self.required_rabi_khz = required_rabi_khz


class DegeneratePulseError(FMGateError):
    """Pulse accumulates (numerically) zero geometric phase."""


class TruncationOverflowError(FMGateError):
    """Motional population reached the top of the Fock truncation."""


class SimulationError(FMGateError):
    """Generic dynamics failure (integrator, invalid state, ...)."""


class BoundInvalidError(FMGateError):
    """Analytic bound evaluated outside its regime of validity."""


class LostBeamError(FMGateError):
    """Pointing calibration scan never saw appreciable transfer."""


class AmbiguousFitError(FMGateError):
    """A lineshape fit could not separate candidate peaks.

    Carries the candidate peak positions (MHz) seen before the fit
    gave up, so callers can re-scan a narrower band.
    """

    def __init__(self, message, candidates=None):
        super().__init__(message)
        self.candidates = list(candidates or [])


class CalibrationFailedError(FMGateError):
    """Calibration loop terminated without meeting its tolerance."""


class FitError(FMGateError):
    """Least-squares fit failed or is degenerate."""


class OutOfModelError(FMGateError):
    """Data falls outside the regime the analysis model can invert."""


class ModelViolationError(FMGateError):
    """Extracted parameters contradict the assumed model (e.g. negative
    per-gate error)."""
