"""Ion-chain statics: equilibrium positions, radial normal modes, Lamb-Dicke factors.

Positions are solved in the standard dimensionless units where length is
scaled by l0 = (q^2/(4 pi eps0 M wz^2))^(1/3); normal modes come from the
eigendecomposition of the (mass-scaled) Hessian of the total potential about
equilibrium, evaluated analytically.
"""

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import (
    ATOMIC_MASS_KG,
    COULOMB_CONSTANT,
    ELEMENTARY_CHARGE,
    HBAR,
    MHZ,
    NM,
    TWO_PI,
    UM,
)
from .errors import ConfigError, ConvergenceError, UnstableChainError

NEWTON_MAX_ITER = 200
FORCE_TOL = 1e-12  # dimensionless residual force


@dataclass(frozen=True)
class TrapConfig:
    """Trap and addressing parameters that fix the chain's mode structure."""

    ion_count: int
    axial_freq_mhz: float
    radial_freq_1_mhz: float
    radial_freq_2_mhz: float
    ion_mass_amu: float = 171.0
    raman_wavelength_nm: float = 355.0
    beam_geometry_factor: float = math.sqrt(2.0)

    def __post_init__(self):
        if self.ion_count < 1:
            raise ConfigError("ion_count must be >= 1")
        for name in ("axial_freq_mhz", "radial_freq_1_mhz", "radial_freq_2_mhz",
                     "ion_mass_amu", "raman_wavelength_nm", "beam_geometry_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if min(self.radial_freq_1_mhz, self.radial_freq_2_mhz) <= self.axial_freq_mhz:
            raise ConfigError("radial frequencies must exceed the axial frequency")

    @property
    def ion_mass_kg(self):
        return self.ion_mass_amu * ATOMIC_MASS_KG


@dataclass(frozen=True)
class Mode:
    """One normal mode: frequency, participation vector, per-ion Lamb-Dicke."""

    frequency_mhz: float
    participation: np.ndarray
    lamb_dicke: np.ndarray | None = None


@dataclass(frozen=True)
class ModeSpectrum:
    modes: tuple = field(default_factory=tuple)

    @property
    def frequencies_mhz(self) -> np.ndarray:
        return np.array([m.frequency_mhz for m in self.modes])

    @property
    def ion_count(self) -> int:
        return len(self.modes[0].participation)

    def eta_matrix(self) -> np.ndarray:
        """Lamb-Dicke parameters as a (mode, ion) array."""
        if any(m.lamb_dicke is None for m in self.modes):
            raise ConfigError("Lamb-Dicke parameters not filled; call lamb_dicke()")
        return np.array([m.lamb_dicke for m in self.modes])


def length_scale_m(trap: TrapConfig) -> float:
    """Characteristic Coulomb length (q^2 / (4 pi eps0 M wz^2))^(1/3) in meters."""
    wz = TWO_PI * trap.axial_freq_mhz * MHZ
    return (COULOMB_CONSTANT * ELEMENTARY_CHARGE**2
            / (trap.ion_mass_kg * wz**2)) ** (1.0 / 3.0)


def _force(u):
    # gradient of V(u) = sum u^2/2 + sum_{i<j} 1/|u_i-u_j|, dimensionless
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    return u - np.sum(np.sign(diff) / diff**2, axis=1)


def _force_jacobian(u):
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    inv3 = 1.0 / np.abs(diff) ** 3
    jac = -2.0 * inv3
    np.fill_diagonal(jac, 1.0 + 2.0 * inv3.sum(axis=1))
    return jac


def equilibrium_positions(trap: TrapConfig) -> np.ndarray:
    """Axial equilibrium positions in micrometers, sorted ascending.

    Damped Newton iteration on the dimensionless force, started from the
    uniform-spacing ansatz; converged when the largest residual force
    component is below 1e-12.
    """
    n = trap.ion_count
    if n == 1:
        return np.array([0.0])

    # uniform-spacing start (empirical minimum-spacing scaling with N)
    spacing = 2.018 / n**0.559
    u = (np.arange(n) - (n - 1) / 2.0) * spacing

    f = _force(u)
    res = np.max(np.abs(f))
    for _ in range(NEWTON_MAX_ITER):
        if res < FORCE_TOL:
            break
        step = np.linalg.solve(_force_jacobian(u), f)
        scale = 1.0
        while scale > 1e-6:
            u_new = u - scale * step
            if np.all(np.diff(u_new) > 0):
                f_new = _force(u_new)
                res_new = np.max(np.abs(f_new))
                if res_new < res:
                    u, f, res = u_new, f_new, res_new
                    break
            scale *= 0.5
        else:
            raise ConvergenceError(
                f"equilibrium solve stalled, residual force {res:.3e}")
    else:
        raise ConvergenceError(
            f"equilibrium solve hit {NEWTON_MAX_ITER} iterations, "
            f"residual force {res:.3e}")

    u = 0.5 * (u - u[::-1])  # enforce the exact reflection symmetry
    return np.sort(u) * length_scale_m(trap) / UM


def _dimensionless_positions(trap):
    return equilibrium_positions(trap) * UM / length_scale_m(trap)


def _radial_matrix(trap, radial_freq_mhz):
    u = _dimensionless_positions(trap)
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    inv3 = 1.0 / np.abs(diff) ** 3
    r2 = (radial_freq_mhz / trap.axial_freq_mhz) ** 2
    mat = inv3.copy()
    np.fill_diagonal(mat, r2 - inv3.sum(axis=1))
    return mat


def _axial_matrix(trap):
    u = _dimensionless_positions(trap)
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    inv3 = 1.0 / np.abs(diff) ** 3
    mat = -2.0 * inv3
    np.fill_diagonal(mat, 1.0 + 2.0 * inv3.sum(axis=1))
    return mat


def dynamical_matrix(trap: TrapConfig, principal_axis: str = "radial_1") -> np.ndarray:
    """Mass-scaled Hessian about equilibrium, in units of (2 pi axial_freq)^2."""
    if principal_axis == "radial_1":
        return _radial_matrix(trap, trap.radial_freq_1_mhz)
    if principal_axis == "radial_2":
        return _radial_matrix(trap, trap.radial_freq_2_mhz)
    if principal_axis == "axial":
        return _axial_matrix(trap)
    raise ConfigError(f"unknown principal_axis {principal_axis!r}")


def mode_spectrum(trap: TrapConfig, principal_axis: str = "radial_1") -> ModeSpectrum:
    """Normal modes along the selected principal axis, sorted by descending
    frequency (center-of-mass first for the radial branches).
    """
    mat = dynamical_matrix(trap, principal_axis)
    evals, evecs = np.linalg.eigh(mat)
    if evals[0] <= 0:
        raise UnstableChainError(
            f"non-positive squared mode frequency {evals[0]:.3e} "
            f"(axial confinement too strong for a stable linear chain)")

    order = np.argsort(evals)[::-1]
    modes = []
    for idx in order:
        vec = evecs[:, idx].copy()
        if vec[np.argmax(np.abs(vec))] < 0:
            vec = -vec
        freq = trap.axial_freq_mhz * math.sqrt(evals[idx])
        modes.append(Mode(frequency_mhz=freq, participation=vec))
    return ModeSpectrum(modes=tuple(modes))


def lamb_dicke(trap: TrapConfig, spectrum: ModeSpectrum) -> ModeSpectrum:
    """Fill per-ion Lamb-Dicke parameters.

    eta_{j,i} = participation_{j,i} * dk * sqrt(hbar / (2 M w_j)) with
    dk = beam_geometry_factor * 2 pi / wavelength and w_j the angular mode
    frequency.
    """
    dk = trap.beam_geometry_factor * TWO_PI / (trap.raman_wavelength_nm * NM)
    filled = []
    for m in spectrum.modes:
        w = TWO_PI * m.frequency_mhz * MHZ
        x0 = math.sqrt(HBAR / (2.0 * trap.ion_mass_kg * w))
        filled.append(replace(m, lamb_dicke=m.participation * dk * x0))
    return ModeSpectrum(modes=tuple(filled))


def chain_modes(trap: TrapConfig, principal_axis: str = "radial_1") -> ModeSpectrum:
    """Convenience: mode_spectrum with Lamb-Dicke parameters filled."""
    return lamb_dicke(trap, mode_spectrum(trap, principal_axis))


def spectrum_fingerprint(spectrum: ModeSpectrum) -> str:
    """Short stable hash of frequencies and Lamb-Dicke values (for pulse files)."""
    h = hashlib.sha256()
    for m in spectrum.modes:
        h.update(f"{m.frequency_mhz:.9f}".encode())
        vals = m.lamb_dicke if m.lamb_dicke is not None else m.participation
        for v in vals:
            h.update(f"{v:.9e}".encode())
    return h.hexdigest()[:12]


def spectrum_to_csv(spectrum: ModeSpectrum) -> str:
    """CSV rows: mode index, frequency, participation..., eta... per ion."""
    n = spectrum.ion_count
    cols = (["mode_index", "frequency_mhz"]
            + [f"participation_{i}" for i in range(n)]
            + [f"eta_{i}" for i in range(n)])
    lines = [",".join(cols)]
    for j, m in enumerate(spectrum.modes):
        eta = m.lamb_dicke if m.lamb_dicke is not None else [math.nan] * n
        row = [str(j), f"{m.frequency_mhz:.9f}"]
        row += [f"{b:.12g}" for b in m.participation]
        row += [f"{e:.12g}" for e in eta]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
