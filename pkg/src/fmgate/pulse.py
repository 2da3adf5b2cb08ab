"""Discrete frequency-modulated pulse and its mode-response integrals.

A pulse is a piecewise-constant modulation of the sideband drive
frequency: K equal-length segments, each with its own absolute detuning
(kHz from the qubit carrier).  Everything the designer and the error
budget need from a pulse -- the coherent displacement driven on each
motional mode, the running time-average of that displacement, and the
accumulated two-qubit phase -- reduces to closed-form sums over
segments.  This module evaluates those sums and their derivatives with
respect to the segment detunings, switching to series expansions where
the direct expressions cancel badly.

Conventions.  For a mode at f_n, let xi(t) = theta(t) - w_n t where
theta is the accumulated drive phase (plus any common drive offset).
Per segment k the phase rate is delta_k = 2 pi (f_k - f_n) (rad/us) and
phi_k = delta_k dt.  With E_k = dt e^{i phi/2} sinc(phi/2) and
cumulative phases c_k,

    displacement integral        I    = sum_k e^{i c_k} E_k
    time integral of running I   intA = sum_l (G_l dt + e^{i c_l} S_l)
    phase double integral        D    = sum_k Im[e^{i c_k} E_k conj(G_k) + S_k]

where G_l is the prefix sum of e^{i c} E and S = -(e^{i phi}-1-i phi)/delta^2.
The physical responses follow as

    alpha_n(t)  = (eta_n W / 2) * running I      (phase-space trajectory)
    Theta       = (W^2 / 2) sum_n eta_{1,n} eta_{2,n} D_n

with W the carrier-referenced angular Rabi frequency (rad/us).  The
stored amplitude `rabi_khz` is the sideband Rabi frequency referenced to
the strongest mode pair, so W = 2 pi (rabi_khz / eta_ref) * 1e-3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .chain import Mode, ModeSpectrum
from .constants import TWO_PI
from .errors import ConfigError, DegeneratePulseError

_SMALL_PHI = 0.05


@dataclass
class FMPulse:
    """A segmented FM gate pulse with equal-duration segments.

    detunings_khz : absolute drive detuning per segment, kHz (near the
        radial sidebands, i.e. a few thousand kHz from the carrier).
    segment_duration_us : common length of every segment, us.
    rabi_khz      : sideband Rabi frequency referenced to the strongest
        mode pair (carrier-referenced value is rabi_khz / eta_ref).
    symmetric     : whether the detuning list is mirror-symmetric.
    ion_pair      : zero-based indices of the two target ions.
    eta_ref       : Lamb-Dicke reference used for the sideband referencing.
    phase_sign    : sign of the designed two-qubit phase (+1 or -1).
    spectrum_hash : fingerprint of the mode spectrum the pulse was
        designed against (see chain.spectrum_fingerprint).
    """

    detunings_khz: np.ndarray
    segment_duration_us: float
    rabi_khz: float
    symmetric: bool = True
    ion_pair: tuple = (0, 1)
    eta_ref: float = 1.0
    phase_sign: int = 1
    spectrum_hash: str = ""

    def __post_init__(self):
        self.detunings_khz = np.atleast_1d(
            np.asarray(self.detunings_khz, dtype=float))
        if self.detunings_khz.size == 0:
            raise ConfigError("pulse needs at least one segment")
        if self.segment_duration_us <= 0:
            raise ConfigError("segment_duration_us must be positive")
        if self.rabi_khz <= 0:
            raise ConfigError("rabi_khz must be positive")
        if self.eta_ref <= 0:
            raise ConfigError("eta_ref must be positive")
        if self.symmetric and np.any(
                self.detunings_khz != self.detunings_khz[::-1]):
            raise ConfigError("pulse marked symmetric but detunings are not")
        i, j = self.ion_pair
        if i == j or i < 0 or j < 0:
            raise ConfigError("ion_pair must be two distinct ion indices")
        self.ion_pair = (int(i), int(j))
        if self.phase_sign not in (-1, 1):
            raise ConfigError("phase_sign must be +1 or -1")

    @property
    def segment_count(self) -> int:
        return len(self.detunings_khz)

    @property
    def durations_us(self) -> np.ndarray:
        return np.full(self.segment_count, self.segment_duration_us)

    @property
    def gate_time_us(self) -> float:
        return self.segment_count * self.segment_duration_us

    @property
    def carrier_rabi_khz(self) -> float:
        return self.rabi_khz / self.eta_ref

    def with_rabi(self, rabi_khz: float) -> "FMPulse":
        return replace(self, rabi_khz=rabi_khz,
                       detunings_khz=self.detunings_khz.copy())

    def with_drive_offset(self, offset_khz: float) -> "FMPulse":
        """Copy with every segment detuning shifted by a common offset."""
        return replace(self, detunings_khz=self.detunings_khz + offset_khz)


@dataclass
class PhaseTrajectory:
    """Phase-space trajectory of one motional mode under a pulse."""

    mode_index: int
    times_us: np.ndarray
    samples: np.ndarray                  # complex alpha(t), dimensionless
    terminal_displacement: complex       # alpha(T)
    time_averaged_displacement: complex  # (1/T) integral alpha dt

    def __post_init__(self):
        if abs(self.samples[0]) > 1e-12:
            raise ConfigError("trajectory must start at the origin")


# ------------------------------------------------------------------ phase

def detuning_at(pulse: FMPulse, times_us) -> np.ndarray:
    """Instantaneous drive detuning (kHz) at the given times."""
    edges = np.concatenate([[0.0], np.cumsum(pulse.durations_us)])
    t = np.atleast_1d(np.asarray(times_us, dtype=float))
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0,
                  pulse.segment_count - 1)
    return pulse.detunings_khz[idx]


def phase_at(pulse: FMPulse, times_us) -> np.ndarray:
    """Accumulated drive phase theta(t) in radians."""
    edges = np.concatenate([[0.0], np.cumsum(pulse.durations_us)])
    rates = TWO_PI * pulse.detunings_khz * 1e-3  # rad/us
    theta_edges = np.concatenate(
        [[0.0], np.cumsum(rates * pulse.durations_us)])
    t = np.atleast_1d(np.asarray(times_us, dtype=float))
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0,
                  pulse.segment_count - 1)
    return theta_edges[idx] + rates[idx] * (t - edges[idx])


# ------------------------------------------------ segment building blocks

def _series(phi, coeffs):
    z = 1j * phi
    acc = np.full_like(z, coeffs[-1])
    for c in coeffs[-2::-1]:
        acc = acc * z + c
    return acc


def _e_integral(delta, phi, dur):
    # E = (e^{i phi} - 1)/(i delta) = dt e^{i phi/2} sinc(phi/2); exact for
    # all phi via np.sinc
    return dur * np.exp(0.5j * phi) * np.sinc(phi / (2.0 * np.pi))


_S_COEFFS = [1 / 2, 1 / 6, 1 / 24, 1 / 120, 1 / 720, 1 / 5040, 1 / 40320]
_DE_COEFFS = [1 / 2, 1 / 3, 1 / 8, 1 / 30, 1 / 144, 1 / 840, 1 / 5760]
_DS_COEFFS = [1 / 6, 1 / 12, 1 / 40, 1 / 180, 1 / 1008, 1 / 6720]


def _s_integral(delta, phi, dur):
    # S = -(e^{i phi} - 1 - i phi)/delta^2, series for small phi
    small = np.abs(phi) < _SMALL_PHI
    safe = np.where(small, 1.0, delta)
    direct = -(np.exp(1j * phi) - 1.0 - 1j * phi) / safe**2
    series = dur**2 * _series(phi, _S_COEFFS)
    return np.where(small, series, direct)


def _de_integral(delta, phi, dur, E):
    # dE/ddelta = (dt e^{i phi} - E)/delta
    small = np.abs(phi) < _SMALL_PHI
    safe = np.where(small, 1.0, delta)
    direct = (dur * np.exp(1j * phi) - E) / safe
    series = 1j * dur**2 * _series(phi, _DE_COEFFS)
    return np.where(small, series, direct)


def _ds_integral(delta, phi, dur, E, S, dE):
    # dS/ddelta = -(i dE + S)/delta
    small = np.abs(phi) < _SMALL_PHI
    safe = np.where(small, 1.0, delta)
    direct = -(1j * dE + S) / safe
    series = 1j * dur**3 * _series(phi, _DS_COEFFS)
    return np.where(small, series, direct)


@dataclass
class ModeSums:
    """Closed-form response of one mode to a segmented pulse."""

    displacement: complex        # I = integral e^{i xi} dt  (us)
    time_integral: complex       # integral of the running integral (us^2)
    phase_integral: float        # D = Im double integral     (us^2)
    d_displacement: np.ndarray | None = None   # dI/d(detuning_khz)
    d_time_integral: np.ndarray | None = None  # d intA/d(detuning_khz)


def angular_detunings(det_khz, mode_freq_mhz):
    """Segment phase rates relative to a mode, rad/us."""
    return TWO_PI * (np.asarray(det_khz, dtype=float) * 1e-3 - mode_freq_mhz)


def mode_sums(det_khz, dur_us, mode_freq_mhz, grad: bool = False) -> ModeSums:
    """Evaluate I, intA and D for one mode; optionally their gradients.

    Gradients are with respect to the segment detunings in kHz.
    """
    dur = np.asarray(dur_us, dtype=float)
    delta = angular_detunings(det_khz, mode_freq_mhz)
    phi = delta * dur
    E = _e_integral(delta, phi, dur)
    S = _s_integral(delta, phi, dur)
    c = np.concatenate([[0.0], np.cumsum(phi)])[:-1]
    eic = np.exp(1j * c)
    terms = eic * E
    G = np.concatenate([[0.0], np.cumsum(terms)])  # length K+1
    disp = G[-1]
    int_a = np.sum(G[:-1] * dur) + np.sum(eic * S)
    phase = float(np.sum(np.imag(terms * np.conj(G[:-1]) + S)))
    if not grad:
        return ModeSums(disp, int_a, phase)

    dE = _de_integral(delta, phi, dur, E)
    dS = _ds_integral(delta, phi, dur, E, S, dE)
    # suffix sums over segments after k
    rev = slice(None, None, -1)
    tail_time = np.concatenate([np.cumsum(dur[rev])[rev][1:], [0.0]])
    tail_tg = np.concatenate(
        [np.cumsum((dur * G[:-1])[rev])[rev][1:], [0.0]])
    tail_es = np.concatenate([np.cumsum((eic * S)[rev])[rev][1:], [0.0]])

    d_disp = eic * dE + 1j * dur * (disp - G[1:])
    d_int = (eic * dE * tail_time
             + 1j * dur * (tail_tg - tail_time * G[1:])
             + eic * dS + 1j * dur * tail_es)
    scale = TWO_PI * 1e-3  # d(delta rad/us) / d(detuning kHz)
    return ModeSums(disp, int_a, phase,
                    d_displacement=d_disp * scale,
                    d_time_integral=d_int * scale)


# ------------------------------------------------------- physical response

def _carrier_angular(pulse: FMPulse) -> float:
    return TWO_PI * pulse.carrier_rabi_khz * 1e-3  # rad/us


def _pair_eta(pulse: FMPulse, mode: Mode) -> float:
    if mode.lamb_dicke is None:
        raise ConfigError("mode lacks Lamb-Dicke parameters")
    i, j = pulse.ion_pair
    if max(i, j) >= len(mode.lamb_dicke):
        raise ConfigError("pulse ion_pair outside the mode's ion range")
    return max(abs(mode.lamb_dicke[i]), abs(mode.lamb_dicke[j]))


def displacement_trajectory(pulse: FMPulse, mode: Mode,
                            detuning_offset_khz: float = 0.0,
                            mode_index: int = 0,
                            sample_count: int = 513) -> PhaseTrajectory:
    """Phase-space trajectory alpha(t) of one mode under the pulse.

    alpha(t) = (eta W / 2) int_0^t e^{i xi} with eta the larger
    Lamb-Dicke magnitude of the two target ions; the optional offset is
    added to every segment detuning (a common drive-frequency shift).
    """
    det = pulse.detunings_khz + detuning_offset_khz
    dur = pulse.durations_us
    t = np.linspace(0.0, pulse.gate_time_us, sample_count)
    edges = np.concatenate([[0.0], np.cumsum(dur)])
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0,
                  pulse.segment_count - 1)
    delta = angular_detunings(det, mode.frequency_mhz)
    phi = delta * dur
    E = _e_integral(delta, phi, dur)
    S = _s_integral(delta, phi, dur)
    c = np.concatenate([[0.0], np.cumsum(phi)])[:-1]
    eic = np.exp(1j * c)
    G = np.concatenate([[0.0], np.cumsum(eic * E)])
    s_loc = t - edges[idx]
    running = G[idx] + eic[idx] * _e_integral(delta[idx], delta[idx] * s_loc,
                                              s_loc)
    int_a = np.sum(G[:-1] * dur) + np.sum(eic * S)
    pref = 0.5 * _pair_eta(pulse, mode) * _carrier_angular(pulse)
    return PhaseTrajectory(
        mode_index=mode_index,
        times_us=t,
        samples=pref * running,
        terminal_displacement=complex(pref * G[-1]),
        time_averaged_displacement=complex(pref * int_a
                                           / pulse.gate_time_us))


def final_displacements(pulse: FMPulse, spectrum: ModeSpectrum,
                        drive_offset_khz: float = 0.0) -> np.ndarray:
    """Terminal displacement alpha_n(T) per mode (pair-referenced eta)."""
    det = pulse.detunings_khz + drive_offset_khz
    w = _carrier_angular(pulse)
    out = np.zeros(len(spectrum.modes), dtype=complex)
    for n, mode in enumerate(spectrum.modes):
        s = mode_sums(det, pulse.durations_us, mode.frequency_mhz)
        out[n] = 0.5 * _pair_eta(pulse, mode) * w * s.displacement
    return out


def closure_sum(pulse: FMPulse, spectrum: ModeSpectrum,
                drive_offset_khz: float = 0.0) -> float:
    """Loop-closure metric sum_n |alpha_n(T)|^2 (dimensionless)."""
    return float(np.sum(np.abs(
        final_displacements(pulse, spectrum, drive_offset_khz)) ** 2))


def displacement_exposure(pulse: FMPulse, spectrum: ModeSpectrum,
                          drive_offset_khz: float = 0.0) -> np.ndarray:
    """Per-mode integral of |alpha_n(t)|^2 over the gate, in us.

    This is the lever arm for heating- and dephasing-induced branch
    decoherence: a dissipator acting on mode n at rate G produces an
    infidelity of roughly 4 G x exposure, so low-exposure solutions
    keep trajectories in tight loops near the origin.
    """
    det = pulse.detunings_khz + drive_offset_khz
    dur = pulse.durations_us
    out = np.zeros(len(spectrum.modes))
    for n, mode in enumerate(spectrum.modes):
        delta = angular_detunings(det, mode.frequency_mhz)
        phi = delta * dur
        E = _e_integral(delta, phi, dur)
        eic = np.exp(1j * np.concatenate([[0.0], np.cumsum(phi)])[:-1])
        G = np.concatenate([[0.0], np.cumsum(eic * E)])[:-1]
        small = np.abs(phi) < _SMALL_PHI
        d_safe = np.where(small, 1.0, delta)
        p_safe = np.where(small, 1.0, phi)
        z = 1j * phi
        f1_series = dur ** 2 * _series(z, [1.0 / 2, 1.0 / 6, 1.0 / 24,
                                           1.0 / 120, 1.0 / 720,
                                           1.0 / 5040])
        f1_exact = -(np.exp(1j * phi) - 1.0 - 1j * phi) / d_safe ** 2
        f1 = np.where(small, f1_series, f1_exact)
        f2_series = dur ** 3 * (1.0 / 6 - phi ** 2 / 120 + phi ** 4 / 5040)
        f2_exact = dur ** 3 * (phi - np.sin(phi)) / p_safe ** 3
        f2 = np.where(small, f2_series, f2_exact)
        seg = (np.abs(G) ** 2 * dur
               + 2.0 * np.real(np.conj(G) * eic * f1) + 2.0 * f2)
        pref = 0.5 * _pair_eta(pulse, mode) * _carrier_angular(pulse)
        out[n] = pref ** 2 * float(np.sum(seg))
    return out


def robustness_profile(pulse: FMPulse, spectrum: ModeSpectrum,
                       offsets_khz, nbar=None) -> list:
    """Residual-entanglement error versus common drive offset.

    Returns [(offset_khz, residual), ...] ordered by offset.  The
    residual weights each unclosed loop by the motional population
    factor (nbar + 1/2); nbar defaults to the ground state.
    """
    offsets = np.sort(np.atleast_1d(np.asarray(offsets_khz, dtype=float)))
    if nbar is None:
        nbar = np.zeros(len(spectrum.modes))
    nbar = np.asarray(nbar, dtype=float)
    out = []
    for ofs in offsets:
        alpha = final_displacements(pulse, spectrum, drive_offset_khz=ofs)
        out.append((float(ofs),
                    float(np.sum((nbar + 0.5) * np.abs(alpha) ** 2))))
    return out


def worst_residual(pulse: FMPulse, spectrum: ModeSpectrum,
                   offsets_khz, nbar=None) -> float:
    return max(r for _, r in robustness_profile(pulse, spectrum,
                                                offsets_khz, nbar))


def geometric_phase(pulse: FMPulse, spectrum: ModeSpectrum,
                    ion_pair=None, drive_offset_khz: float = 0.0) -> float:
    """Accumulated two-qubit phase Theta (radians).

    Theta = (W^2/2) sum_n eta_{1,n} eta_{2,n} D_n with D_n the
    per-mode double integral of sin(xi(t) - xi(t')) over t' < t.
    """
    det = pulse.detunings_khz + drive_offset_khz
    w = _carrier_angular(pulse)
    eta = spectrum.eta_matrix()
    i, j = ion_pair if ion_pair is not None else pulse.ion_pair
    theta = 0.0
    for n, mode in enumerate(spectrum.modes):
        s = mode_sums(det, pulse.durations_us, mode.frequency_mhz)
        theta += eta[n, i] * eta[n, j] * s.phase_integral
    return 0.5 * w**2 * theta


def required_rabi_khz(pulse: FMPulse, spectrum: ModeSpectrum,
                      ion_pair=None) -> float:
    """Sideband Rabi frequency that makes |Theta| = pi/4 (kHz)."""
    unit = pulse.with_rabi(1.0)
    theta = geometric_phase(unit, spectrum, ion_pair)
    if abs(theta) < 1e-12:
        raise DegeneratePulseError(
            "pulse accumulates no two-qubit phase at unit Rabi frequency")
    return math.sqrt((math.pi / 4.0) / abs(theta))


def calibrated(pulse: FMPulse, spectrum: ModeSpectrum) -> FMPulse:
    """Copy of the pulse with rabi set for |Theta| = pi/4 and sign recorded."""
    out = pulse.with_rabi(required_rabi_khz(pulse, spectrum))
    out.phase_sign = 1 if geometric_phase(out, spectrum) >= 0 else -1
    return out


def drive_offset_slope(pulse: FMPulse, spectrum: ModeSpectrum,
                       step_khz: float = 0.05) -> float:
    """d ln|Theta| / d(common drive-frequency offset), per Hz.

    A positive slope means a small upward drive shift increases the
    accumulated phase, which is what compensates an amplitude deficit.
    """
    up = abs(geometric_phase(pulse, spectrum, drive_offset_khz=step_khz))
    dn = abs(geometric_phase(pulse, spectrum, drive_offset_khz=-step_khz))
    return (math.log(up) - math.log(dn)) / (2.0 * step_khz * 1e3)


# ---------------------------------------------------------------- file io

def to_dds_text(pulse: FMPulse) -> str:
    """Serialize to the waveform-generator table format.

    Header comments carry the gate time, the calibrated Rabi frequency
    and the spectrum fingerprint; the table holds one row per segment
    with the duration (10 ns resolution) and the detuning rounded to
    integer Hz.
    """
    lines = ["# fm_pulse v1",
             f"# gate_time_us={pulse.gate_time_us:.2f}",
             f"# rabi_khz={pulse.rabi_khz:.9g}",
             f"# eta_ref={pulse.eta_ref:.9g}",
             f"# symmetric={int(pulse.symmetric)}",
             f"# ion_pair={pulse.ion_pair[0]},{pulse.ion_pair[1]}",
             f"# phase_sign={pulse.phase_sign:+d}",
             f"# spectrum={pulse.spectrum_hash}",
             "segment_index,duration_us,detuning_hz"]
    for k in range(pulse.segment_count):
        hz = int(round(pulse.detunings_khz[k] * 1e3))
        lines.append(f"{k},{pulse.segment_duration_us:.2f},{hz}")
    return "\n".join(lines) + "\n"


def from_dds_text(text: str) -> FMPulse:
    """Parse a waveform table written by to_dds_text."""
    header = {}
    rows = []
    saw_columns = False
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if "=" in body:
                key, _, val = body.partition("=")
                header[key.strip()] = val.strip()
            continue
        if line.startswith("segment_index"):
            saw_columns = True
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ConfigError(f"malformed pulse row: {raw!r}")
        try:
            rows.append((int(parts[0]), float(parts[1]), int(parts[2])))
        except ValueError as exc:
            raise ConfigError(f"malformed pulse row: {raw!r}") from exc
    if not saw_columns or not rows:
        raise ConfigError("pulse table missing segment rows")
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise ConfigError("segment indices must be 0..K-1 without gaps")
    durations = {r[1] for r in rows}
    if len(durations) != 1:
        raise ConfigError("segment durations must be equal")
    try:
        rabi = float(header["rabi_khz"])
    except KeyError as exc:
        raise ConfigError("pulse header missing rabi_khz") from exc
    pair = tuple(int(x) for x in header.get("ion_pair", "0,1").split(","))
    pulse = FMPulse(
        detunings_khz=np.array([r[2] * 1e-3 for r in rows]),
        segment_duration_us=rows[0][1],
        rabi_khz=rabi,
        symmetric=bool(int(header.get("symmetric", 0))),
        ion_pair=pair,
        eta_ref=float(header.get("eta_ref", 1.0)),
        phase_sign=int(header.get("phase_sign", 1)),
        spectrum_hash=header.get("spectrum", ""))
    stated = float(header.get("gate_time_us", pulse.gate_time_us))
    if abs(stated - pulse.gate_time_us) > 0.011 * pulse.segment_count:
        raise ConfigError("gate_time_us header disagrees with segment table")
    return pulse


def save_dds(pulse: FMPulse, path) -> None:
    with open(path, "w") as f:
        f.write(to_dds_text(pulse))


def load_dds(path) -> FMPulse:
    with open(path) as f:
        return from_dds_text(f.read())
