"""Per-source gate error budget and detuning/amplitude scan maps.

Builds the standard error table for a calibrated pulse by switching on
one noise channel at a time, plus two planning maps: closed-system gate
error versus static detuning offset, and the offset that best cancels a
given Rabi-amplitude drift.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundInvalidError, ConfigError
from .dynamics import (ErrorChannels, bell_fidelity, concatenate_gates,
                       gate_infidelity, monte_carlo_intensity,
                       simulate_gate_lindblad, simulate_gate_unitary)

# Canonical row labels, in reporting order.  These feed the CSV output
# directly, so they are load-bearing strings: downstream diffing relies
# on the exact spelling.
LABEL_LASER = "Laser dephasing"
LABEL_MOTIONAL = "Motional dephasing"
LABEL_INTENSITY = "Raman beam intensity fluctuation"
LABEL_OFFRES = "Off-resonant coupling"
LABEL_HEATING = "Motional heating"
LABEL_SPONT = "Spontaneous emission"
LABEL_FM = "FM Solution imperfection"

ROW_ORDER = (LABEL_LASER, LABEL_MOTIONAL, LABEL_INTENSITY, LABEL_OFFRES,
             LABEL_HEATING, LABEL_SPONT, LABEL_FM)

METHOD_TAGS = ("lindblad", "monte-carlo", "analytic-bound", "pass-through")


@dataclass(frozen=True)
class BudgetEntry:
    """One error source: label, infidelity in units of 1e-3, method tag."""

    label: str
    infidelity_milli: float
    method: str

    def __post_init__(self):
        if self.method not in METHOD_TAGS:
            raise ConfigError(f"unknown method tag {self.method!r}")
        if not np.isfinite(self.infidelity_milli) or self.infidelity_milli < 0:
            raise ConfigError(
                f"budget entry {self.label!r} must be finite and >= 0")


@dataclass(frozen=True)
class ErrorBudget:
    """Ordered per-source error table; values in units of 1e-3."""

    entries: tuple = ()
    total_milli: float = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        s = float(sum(e.infidelity_milli for e in self.entries))
        if self.total_milli is None:
            object.__setattr__(self, "total_milli", s)
        elif abs(self.total_milli - s) > 1e-12:
            raise ConfigError("budget total does not match the entry sum")

    def __getitem__(self, label: str) -> BudgetEntry:
        for e in self.entries:
            if e.label == label:
                return e
        raise KeyError(label)

    @property
    def total(self) -> float:
        """Summed infidelity as a plain fraction (not 1e-3 units)."""
        return self.total_milli * 1e-3

    def to_csv_text(self) -> str:
        lines = ["source,infidelity_1e-3,method"]
        for e in self.entries:
            lines.append(f"{e.label},{e.infidelity_milli:.6f},{e.method}")
        lines.append(f"Total,{self.total_milli:.6f},sum")
        return "\n".join(lines) + "\n"


def carrier_coupling_bound(carrier_rabi_khz: float,
                           min_carrier_detuning_khz: float) -> float:
    """Upper bound on off-resonant carrier excitation, as an infidelity.

    Each of the two ions sees two tones at +-delta from the carrier;
    every tone leaves at most (Omega_c / (sqrt(2) delta))^2 population
    in the wrong spin state, so the four contributions add to
    2 (Omega_c / delta)^2.  Perturbative, hence only trusted when the
    detuning dominates the drive by an order of magnitude.
    """
    if carrier_rabi_khz < 0:
        raise ConfigError("carrier_rabi_khz must be non-negative")
    if min_carrier_detuning_khz <= 0:
        raise ConfigError("min_carrier_detuning_khz must be positive")
    if carrier_rabi_khz == 0.0:
        return 0.0
    if min_carrier_detuning_khz < 10.0 * carrier_rabi_khz:
        raise BoundInvalidError(
            "carrier bound needs detuning >= 10x carrier Rabi "
            f"(got {min_carrier_detuning_khz:.1f} kHz vs "
            f"{carrier_rabi_khz:.1f} kHz)")
    return 2.0 * (carrier_rabi_khz / min_carrier_detuning_khz) ** 2


def build_budget(pulse, spectrum, channels: ErrorChannels,
                 spont_emission_bound: float = 0.25e-3, *,
                 carrier_rabi_khz: float | None = None,
                 intensity_shots: int = 200, seed: int = 0,
                 n_max: int = 12, substeps: int = 4) -> ErrorBudget:
    """One-channel-at-a-time error budget for a calibrated pulse.

    channels supplies the full noise model (heating rates are required;
    a missing coherence time means that dephasing row is zero).  The
    off-resonant row is an analytic bound on the pulse's own carrier
    drive unless carrier_rabi_khz overrides it; spontaneous emission is
    passed through as given.  Values are reported in units of 1e-3.
    """
    if channels.heating_rates_phonons_per_s is None:
        raise ConfigError("build_budget needs per-mode heating rates")
    if not 0.0 <= spont_emission_bound < 1.0:
        raise ConfigError("spont_emission_bound must be a probability")

    def lindblad_row(**kw):
        rho = simulate_gate_lindblad(pulse, spectrum, ErrorChannels(**kw),
                                     n_max=n_max, substeps=substeps)
        return gate_infidelity(rho, pulse)

    rows = []
    if channels.laser_coherence_time_ms is None:
        laser = 0.0
    else:
        laser = lindblad_row(
            laser_coherence_time_ms=channels.laser_coherence_time_ms)
    rows.append(BudgetEntry(LABEL_LASER, laser * 1e3, "lindblad"))

    if channels.motional_coherence_time_ms is None:
        motional = 0.0
    else:
        motional = lindblad_row(
            motional_coherence_time_ms=channels.motional_coherence_time_ms)
    rows.append(BudgetEntry(LABEL_MOTIONAL, motional * 1e3, "lindblad"))

    mc = monte_carlo_intensity(pulse, spectrum, channels.intensity_rms,
                               shots=max(100, intensity_shots), seed=seed,
                               n_max=n_max)
    rows.append(BudgetEntry(LABEL_INTENSITY, mc.mean_infidelity * 1e3,
                            "monte-carlo"))

    if carrier_rabi_khz is None:
        carrier_rabi_khz = pulse.carrier_rabi_khz
    offres = carrier_coupling_bound(carrier_rabi_khz,
                                    float(np.min(pulse.detunings_khz)))
    rows.append(BudgetEntry(LABEL_OFFRES, offres * 1e3, "analytic-bound"))

    heating = lindblad_row(
        heating_rates_phonons_per_s=channels.heating_rates_phonons_per_s)
    rows.append(BudgetEntry(LABEL_HEATING, heating * 1e3, "lindblad"))

    rows.append(BudgetEntry(LABEL_SPONT, spont_emission_bound * 1e3,
                            "pass-through"))

    # Zero-rate master equation coincides with the unitary path, so the
    # solution-imperfection row keeps the lindblad tag.
    ideal = simulate_gate_unitary(pulse, spectrum, n_max=n_max)
    fm = gate_infidelity(ideal.spin_density, pulse)
    rows.append(BudgetEntry(LABEL_FM, fm * 1e3, "lindblad"))

    return ErrorBudget(entries=tuple(rows))


def sequence_error(spin_density: np.ndarray, pulse, n_gates: int) -> float:
    """Bell-state error of an odd n_gates sequence.

    Each period adds a quarter-turn of two-qubit phase, so the target
    alternates between the two Bell states as n mod 4 walks 1 -> 3.
    """
    sign = pulse.phase_sign if n_gates % 4 == 1 else -pulse.phase_sign
    return 1.0 - bell_fidelity(spin_density, sign)


def detuning_scan(pulse, spectrum, gate_counts, offsets_khz, *,
                  n_max: int = 12) -> np.ndarray:
    """Closed-system gate error vs static detuning offset.

    Returns a matrix with one row per entry of gate_counts and one
    column per offset; each cell is the Bell-state error after that
    many back-to-back gates with the whole detuning table shifted by
    the column's offset.
    """
    gate_counts = [int(n) for n in np.atleast_1d(gate_counts)]
    offsets_khz = np.atleast_1d(np.asarray(offsets_khz, dtype=float))
    if np.any(np.abs(offsets_khz) > 2.0):
        raise ConfigError("detuning offsets beyond +-2 kHz leave the "
                          "regime the scan is meant for")
    out = np.empty((len(gate_counts), offsets_khz.size))
    for j, off in enumerate(offsets_khz):
        ch = ErrorChannels(detuning_offset_khz=float(off))
        for i, n in enumerate(gate_counts):
            rho = concatenate_gates(pulse, spectrum, ch, n_gates=n,
                                    n_max=n_max)
            out[i, j] = sequence_error(rho, pulse, n)
    return out


def scan_csv_text(gate_counts, offsets_khz, errors: np.ndarray) -> str:
    """CSV rendering of a detuning_scan matrix (offsets as columns)."""
    offsets_khz = np.atleast_1d(np.asarray(offsets_khz, dtype=float))
    header = "n_gates," + ",".join(f"{o:+.4f}kHz" for o in offsets_khz)
    lines = [header]
    for n, row in zip(np.atleast_1d(gate_counts), np.atleast_2d(errors)):
        lines.append(str(int(n)) + "," +
                     ",".join(f"{v:.6e}" for v in row))
    return "\n".join(lines) + "\n"


def compensation_map(pulse, spectrum, rabi_deviations, offsets_khz, *,
                     n_gates: int = 21, n_max: int = 12) -> np.ndarray:
    """Optimal detuning offset for each fractional Rabi deviation.

    For every deviation the pulse amplitude is rescaled by (1 + dev),
    the closed-system error of an n_gates sequence is evaluated over
    the offset grid, and the minimizing offset is refined by a local
    parabola through the bracketing grid points.  Returns offsets in
    kHz, one per deviation.
    """
    rabi_deviations = np.atleast_1d(np.asarray(rabi_deviations, dtype=float))
    offsets_khz = np.atleast_1d(np.asarray(offsets_khz, dtype=float))
    if np.any(np.abs(rabi_deviations) > 0.02):
        raise ConfigError("amplitude deviations beyond +-2 percent are "
                          "outside the compensation model")
    if offsets_khz.size < 3 or np.any(np.diff(offsets_khz) <= 0):
        raise ConfigError("offsets_khz must be an increasing grid of "
                          "at least three points")
    if np.any(np.abs(offsets_khz) > 2.0):
        raise ConfigError("detuning offsets beyond +-2 kHz leave the "
                          "regime the scan is meant for")

    best = np.empty(rabi_deviations.size)
    for i, dev in enumerate(rabi_deviations):
        scaled = pulse.with_rabi(pulse.rabi_khz * (1.0 + dev))
        errs = detuning_scan(scaled, spectrum, [n_gates], offsets_khz,
                             n_max=n_max)[0]
        k = int(np.argmin(errs))
        if 0 < k < errs.size - 1:
            num = errs[k + 1] - errs[k - 1]
            den = errs[k + 1] - 2.0 * errs[k] + errs[k - 1]
            if den > 0:
                # parabolic refinement on a locally uniform grid
                h = 0.5 * (offsets_khz[k + 1] - offsets_khz[k - 1])
                shift = -0.5 * h * num / den
                best[i] = np.clip(offsets_khz[k] + shift,
                                  offsets_khz[k - 1], offsets_khz[k + 1])
                continue
        best[i] = offsets_khz[k]
    return best
