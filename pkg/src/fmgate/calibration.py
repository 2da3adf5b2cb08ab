"""Simulated-hardware calibration pipeline and fidelity extraction.

HardwareOracle hides the true machine parameters (mode frequencies,
Rabi scale, beam pointing, SPAM) behind shot-sampled measurement
operations; the calibration routines here recover those parameters the
way the experiment does, and the parity/population protocol turns
sampled measurements into a SPAM-free per-gate infidelity.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import curve_fit

from .beam import BeamProfile, rabi_crosstalk
from .chain import ModeSpectrum
from .dynamics import ErrorChannels, NO_NOISE, concatenate_gates
from .errors import (AmbiguousFitError, CalibrationFailedError, ConfigError,
                     FitError, LostBeamError, ModelViolationError)

EPOCH_MINUTES = 30.0        # rough-calibration cadence


# ------------------------------------------------------------ the oracle

@dataclass
class _Truth:
    """Hidden machine state; never exposed through the public API."""

    mode_offsets_hz: np.ndarray
    rabi_scale: float
    pointing_um: np.ndarray
    prep_error: float
    detection_error: float


class HardwareOracle:
    """Simulated ion-trap hardware with hidden parameters.

    All public methods return binomially sampled measurement outcomes;
    the underlying truth (mode-frequency offsets, Rabi scale, pointing
    miscalibration, SPAM fractions) stays in private state.  A fixed
    seed plus a fixed call sequence reproduces every sample exactly.

    prep_error / detection_error are quoted as two-qubit totals; each
    qubit flips independently with half the stated probability.  Hidden
    parameters drift only when advance_clock is called: mode offsets
    move linearly at freq_drift_hz_per_min plus a bounded random-walk
    step per 30-minute epoch, and the Rabi scale moves linearly at
    rabi_drift_per_min.
    """

    def __init__(self, spectrum: ModeSpectrum, channels=None, *,
                 beam: BeamProfile | None = None, seed: int = 0,
                 rabi_scale: float = 1.0, pointing_offsets_um=None,
                 mode_offsets_hz=None, prep_error: float = 0.0124,
                 detection_error: float = 0.0098,
                 freq_drift_hz_per_min: float = 2.0,
                 rabi_drift_per_min: float = 0.0,
                 walk_step_hz: float = 30.0, walk_bound_hz: float = 150.0,
                 ion_spacing_um: float = 5.0, n_ions: int | None = None,
                 n_max: int = 10, substeps: int = 2, joint_modes: int = 1):
        n_modes = len(spectrum.modes)
        if n_ions is None:
            n_ions = spectrum.modes[0].lamb_dicke.size
        if not 0 <= prep_error < 0.5 or not 0 <= detection_error < 0.5:
            raise ConfigError("SPAM fractions must lie in [0, 0.5)")
        self.nominal_spectrum = spectrum
        self._channels = channels or NO_NOISE
        self.beam = beam or BeamProfile(waist_radius_um=2.2)
        self.ion_spacing_um = float(ion_spacing_um)
        self.n_ions = int(n_ions)
        self.clock_minutes = 0.0
        self.shots_used = 0
        self._freq_drift = float(freq_drift_hz_per_min)
        self._rabi_drift = float(rabi_drift_per_min)
        self._walk_step = float(walk_step_hz)
        self._walk_bound = float(walk_bound_hz)
        self._walk_hz = 0.0
        offs = np.zeros(n_modes) if mode_offsets_hz is None else \
            np.broadcast_to(np.asarray(mode_offsets_hz, float),
                            (n_modes,)).copy()
        pts = np.zeros(self.n_ions) if pointing_offsets_um is None else \
            np.broadcast_to(np.asarray(pointing_offsets_um, float),
                            (self.n_ions,)).copy()
        self._truth = _Truth(mode_offsets_hz=offs,
                             rabi_scale=float(rabi_scale),
                             pointing_um=pts,
                             prep_error=float(prep_error),
                             detection_error=float(detection_error))
        self._rng = np.random.default_rng(
            np.random.SeedSequence((int(seed), 0xCA11)))
        self._rho_cache = {}
        self.pointing_corrections_um = np.zeros(self.n_ions)
        # gate-simulation resolution: measurement outcomes are shot-noise
        # limited, so a coarser integrator than the analysis default is
        # both adequate and much cheaper here
        self.sim_n_max = int(n_max)
        self.sim_substeps = int(substeps)
        self.sim_joint_modes = int(joint_modes)

    # -- clock / drift ----------------------------------------------

    def advance_clock(self, minutes: float):
        """Let hidden parameters drift; epoch boundaries add walk steps."""
        if minutes < 0:
            raise ConfigError("time only runs forward")
        old = self.clock_minutes
        self.clock_minutes = old + minutes
        self._truth.mode_offsets_hz += self._freq_drift * minutes
        self._truth.rabi_scale += self._rabi_drift * minutes
        crossings = (int(self.clock_minutes // EPOCH_MINUTES)
                     - int(old // EPOCH_MINUTES))
        for _ in range(crossings):
            self._walk_hz = float(np.clip(
                self._walk_hz + self._walk_step * self._rng.standard_normal(),
                -self._walk_bound, self._walk_bound))

    def apply_pointing_correction(self, ion_index: int, offset_um: float):
        """Fold a measured pointing offset into the steering table."""
        if not 0 <= ion_index < self.n_ions:
            raise ConfigError("ion_index out of range")
        self.pointing_corrections_um[ion_index] = float(offset_um)

    # -- hidden helpers ----------------------------------------------

    def _true_spectrum(self) -> ModeSpectrum:
        shift_mhz = (self._truth.mode_offsets_hz + self._walk_hz) * 1e-6
        modes = tuple(replace(m, frequency_mhz=m.frequency_mhz + s)
                      for m, s in zip(self.nominal_spectrum.modes, shift_mhz))
        return ModeSpectrum(modes=modes)

    def _flip_chance(self) -> float:
        # prep/detection fractions are two-qubit totals; each qubit
        # flips independently with half the stated probability
        p, d = (0.5 * self._truth.prep_error,
                0.5 * self._truth.detection_error)
        return p + d - 2.0 * p * d

    def _confuse(self, probs4: np.ndarray) -> np.ndarray:
        q = self._flip_chance()
        m1 = np.array([[1.0 - q, q], [q, 1.0 - q]])
        m = np.kron(m1, m1)
        out = m @ probs4
        return np.clip(out.real, 0.0, None) / max(out.real.sum(), 1e-12)

    def _sample_binomial(self, p: float, shots: int) -> float:
        self.shots_used += shots
        p = min(max(float(p), 0.0), 1.0)
        return self._rng.binomial(shots, p) / shots

    def _sample_multinomial(self, probs4, shots: int) -> np.ndarray:
        self.shots_used += shots
        return self._rng.multinomial(shots, probs4) / shots

    def _gate_density(self, pulse, n_gates: int, offset_khz: float,
                      rabi_command: float) -> np.ndarray:
        eff_rabi = pulse.rabi_khz * rabi_command * self._truth.rabi_scale
        # residual beam mispointing weakens each gate ion's drive
        w = self.beam.waist_radius_um
        resid = (self._truth.pointing_um - self.pointing_corrections_um)
        factors = np.exp(-((resid / w) ** 2))
        imb = tuple(float(factors[i] - 1.0) for i in pulse.ion_pair)
        key = (tuple(np.round(pulse.detunings_khz, 9)),
               round(eff_rabi, 12), int(n_gates),
               round(float(offset_khz), 9),
               tuple(np.round(imb, 9)),
               tuple(np.round(self._truth.mode_offsets_hz
                              + self._walk_hz, 6)))
        if key not in self._rho_cache:
            eff = pulse.with_rabi(eff_rabi)
            base = np.asarray(self._channels.rabi_imbalance, dtype=float)
            ch = replace(self._channels,
                         detuning_offset_khz=(self._channels
                                              .detuning_offset_khz
                                              + float(offset_khz)),
                         rabi_imbalance=(float(base[0] + imb[0]),
                                         float(base[1] + imb[1])))
            self._rho_cache[key] = concatenate_gates(
                eff, self._true_spectrum(), ch, n_gates=n_gates,
                n_max=self.sim_n_max, substeps=self.sim_substeps,
                joint_modes=self.sim_joint_modes)
        return self._rho_cache[key]

    # -- measurement operations --------------------------------------

    def measure_transfer(self, target_ion: int, command_um: float,
                         rotation_pi: float, shots: int,
                         measure_ion: int | None = None) -> float:
        """Population transferred by a single-qubit rotation.

        The beam is steered command_um from the target ion's nominal
        position; the rotation angle is rotation_pi half-turns at
        perfect alignment and unit Rabi scale.
        """
        if not 0 <= target_ion < self.n_ions:
            raise ConfigError("target_ion out of range")
        if measure_ion is None:
            measure_ion = target_ion
        center = (target_ion * self.ion_spacing_um + command_um
                  + self._truth.pointing_um[target_ion]
                  - self.pointing_corrections_um[target_ion])
        pos = measure_ion * self.ion_spacing_um
        f = math.exp(-((pos - center) / self.beam.waist_radius_um) ** 2)
        angle = rotation_pi * math.pi * self._truth.rabi_scale * f
        p1 = math.sin(0.5 * angle) ** 2
        q = self._flip_chance()
        return self._sample_binomial(q + (1.0 - 2.0 * q) * p1, shots)

    def measure_sideband(self, probe_khz: float, shots: int,
                         probe_rabi_khz: float = 0.5,
                         ion_index: int = 0) -> float:
        """Weak fixed-duration sideband probe at probe_khz (abs freq)."""
        etas = np.array([abs(m.lamb_dicke[ion_index])
                         for m in self.nominal_spectrum.modes])
        rel = etas / etas.max()
        w_drive = 2.0 * math.pi * probe_rabi_khz * 1e-3  # rad/us
        t_probe = math.pi / w_drive                      # pi at peak
        p = 0.0
        for mode, r in zip(self._true_spectrum().modes, rel):
            omega = w_drive * r * self._truth.rabi_scale
            delta = 2.0 * math.pi * (probe_khz - mode.frequency_mhz * 1e3) \
                * 1e-3
            w = math.hypot(omega, delta)
            if w == 0.0:
                p += 1.0
                continue
            p += (omega / w) ** 2 * math.sin(0.5 * w * t_probe) ** 2
        q = self._flip_chance()
        return self._sample_binomial(q + (1.0 - 2.0 * q) * min(p, 1.0),
                                     shots)

    def measure_gate_populations(self, pulse, n_gates: int,
                                 offset_khz: float, shots: int,
                                 rabi_command: float = 1.0) -> np.ndarray:
        """Sampled computational-basis populations after n_gates."""
        rho = self._gate_density(pulse, n_gates, offset_khz, rabi_command)
        probs = self._confuse(np.diag(rho).real.copy())
        return self._sample_multinomial(probs, shots)

    def measure_parity(self, pulse, n_gates: int, phase_rad: float,
                       shots: int, offset_khz: float = 0.0,
                       rabi_command: float = 1.0) -> float:
        """Parity after an analysis pi/2 pulse of the given phase."""
        rho = self._gate_density(pulse, n_gates, offset_khz, rabi_command)
        u1 = _analysis_half_turn(phase_rad)
        u = np.kron(u1, u1)
        probs = self._confuse(np.diag(u @ rho @ u.conj().T).real.copy())
        frac = self._sample_multinomial(probs, shots)
        return float(frac[0] + frac[3] - frac[1] - frac[2])


def _analysis_half_turn(phase_rad: float) -> np.ndarray:
    c, s = math.cos(phase_rad), math.sin(phase_rad)
    sx = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
    sy = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
    axis = c * sx + s * sy
    return math.cos(math.pi / 4) * np.eye(2) \
        - 1.0j * math.sin(math.pi / 4) * axis


# ----------------------------------------------------------- calibration

def pointing_calibration(oracle: HardwareOracle, ion_index: int, *,
                         scan_halfwidth_um: float = 3.0, points: int = 31,
                         shots: int = 500,
                         rotation_pi: float = 10.0) -> float:
    """Recover the beam-pointing miscalibration for one ion.

    Scans the steering command through the ion while driving a long
    (many-half-turn) rotation whose fringes pin the beam center
    sharply; a grid-seeded least-squares fit of the fringe pattern
    returns the offset to subtract from future commands.
    """
    w = oracle.beam.waist_radius_um
    cmds = np.linspace(-scan_halfwidth_um, scan_halfwidth_um, points)
    meas = np.array([oracle.measure_transfer(ion_index, c, rotation_pi,
                                             shots) for c in cmds])
    if meas.max() - meas.min() < 0.08:
        raise LostBeamError("no population response across the scan; "
                            "beam is not hitting the ion")

    def model(c, mu, scale):
        f = np.exp(-((c - mu) / w) ** 2)
        return np.sin(0.5 * rotation_pi * math.pi * scale * f) ** 2

    best = None
    for mu0 in cmds[::3]:
        for s0 in (0.9, 1.0, 1.1):
            try:
                popt, _ = curve_fit(
                    model, cmds, meas, p0=(mu0, s0),
                    bounds=([-scan_halfwidth_um, 0.5],
                            [scan_halfwidth_um, 1.5]), maxfev=5000)
            except RuntimeError:
                continue
            sse = float(np.sum((model(cmds, *popt) - meas) ** 2))
            if best is None or sse < best[0]:
                best = (sse, popt)
    if best is None:
        raise LostBeamError("fringe fit failed everywhere on the scan")
    mu = best[1][0]
    # beam center sits at command + offset, so the miscalibration is
    # minus the command that centered it
    return float(-mu)


def sideband_scan(oracle: HardwareOracle, band_khz, step_hz: float, *,
                  shots: int = 200, probe_rabi_khz: float = 0.5):
    """Locate motional modes inside band_khz = (lo, hi), in kHz.

    Returns a list of (frequency_mhz, stderr_mhz) sorted descending.
    Peaks are found on the sampled scan and each is refined with a
    grid-seeded least-squares fit of the power-broadened lineshape.
    """
    lo, hi = (float(band_khz[0]), float(band_khz[1]))
    if hi <= lo:
        raise ConfigError("band must be (low, high) in kHz")
    freqs = np.arange(lo, hi + 1e-9, step_hz * 1e-3)
    resp = np.array([oracle.measure_sideband(f, shots,
                                             probe_rabi_khz=probe_rabi_khz)
                     for f in freqs])
    # peak detection on a lightly smoothed trace
    k = np.ones(3) / 3.0
    smooth = np.convolve(resp, k, mode="same")
    floor = np.median(smooth)
    thresh = floor + 0.35 * (smooth.max() - floor)
    if smooth.max() - floor < 0.15:
        raise AmbiguousFitError("no resolvable sideband peaks in band",
                                candidates=[])
    idx = [i for i in range(1, len(freqs) - 1)
           if smooth[i] >= thresh
           and smooth[i] >= smooth[i - 1] and smooth[i] >= smooth[i + 1]]
    # merge plateau neighbors
    groups = []
    for i in idx:
        if groups and (freqs[i] - freqs[groups[-1][-1]]) * 1e3 \
                <= 3.0 * step_hz:
            groups[-1].append(i)
        else:
            groups.append([i])
    centers = [int(g[np.argmax(resp[g])]) for g in groups]

    halfwidth_khz = 2.0 * probe_rabi_khz
    fitted = []
    for c in centers:
        sel = np.abs(freqs - freqs[c]) <= halfwidth_khz
        if sel.sum() < 5:
            sel = slice(max(0, c - 4), c + 5)
        ff, rr = freqs[sel], resp[sel]
        w_drive = 2.0 * math.pi * probe_rabi_khz * 1e-3
        t_probe = math.pi / w_drive

        def line(f, f0, amp):
            delta = 2.0 * math.pi * (f - f0) * 1e-3
            w = np.hypot(w_drive, delta)
            return amp * (w_drive / w) ** 2 * np.sin(0.5 * w * t_probe) ** 2

        try:
            popt, pcov = curve_fit(line, ff, rr,
                                   p0=(freqs[c], max(rr.max(), 0.2)),
                                   bounds=([ff[0], 0.05], [ff[-1], 1.2]),
                                   maxfev=5000)
        except RuntimeError:
            raise AmbiguousFitError(
                "sideband peak would not fit",
                candidates=[freqs[c] * 1e-3 for c in centers])
        err = math.sqrt(max(pcov[0, 0], 0.0))
        fitted.append((popt[0] * 1e-3, max(err, 1e-9) * 1e-3))
    fitted.sort(key=lambda p: -p[0])
    for (fa, _), (fb, _) in zip(fitted, fitted[1:]):
        if (fa - fb) * 1e3 < 2.5 * probe_rabi_khz:
            raise AmbiguousFitError(
                "peaks overlap within the power-broadened linewidth",
                candidates=[f for f, _ in fitted])
    return fitted


def amplitude_calibration(oracle: HardwareOracle, ion_index: int = 0, *,
                          pointing_um: float = 0.0, shots: int = 1000,
                          span: float = 0.07, points: int = 15) -> float:
    """Recover the Rabi scale from the half-transfer working point.

    Commands a nominal 3.5 half-turn rotation at a grid of amplitude
    factors; the survival probability crosses one half exactly where
    the commanded and actual amplitudes cancel, and the local slope
    there is steep, so a linear fit through the crossing pins the
    scale.
    """
    us = np.linspace(1.0 - span, 1.0 + span, points)
    p0 = np.array([1.0 - oracle.measure_transfer(
        ion_index, pointing_um, 3.5 * u, shots) for u in us])
    signs = np.sign(p0 - 0.5)
    crossings = [i for i in range(len(us) - 1)
                 if signs[i] < 0 <= signs[i + 1]]
    if len(crossings) != 1:
        raise CalibrationFailedError(
            f"expected one rising half-transfer crossing, found "
            f"{len(crossings)}")
    i = crossings[0]
    sel = slice(max(0, i - 2), min(len(us), i + 3))
    coef = np.polyfit(us[sel], p0[sel], 1)
    if coef[0] <= 0:
        raise CalibrationFailedError("response is not rising through "
                                     "the working point")
    u_root = (0.5 - coef[1]) / coef[0]
    if not us[0] <= u_root <= us[-1]:
        raise CalibrationFailedError("crossing extrapolates outside "
                                     "the scanned amplitude range")
    return 1.0 / float(u_root)


def fine_detuning_calibration(oracle: HardwareOracle, pulse, *,
                              halfwidth_hz: float = 500.0,
                              tol_hz: float = 10.0, shots: int = 600,
                              rabi_command: float = 1.0) -> float:
    """Zero the 21-gate population imbalance by bisecting the offset.

    Returns the detuning offset (Hz) at which the |00> and |11>
    populations balance after 21 concatenated gates.
    """

    def imbalance(off_hz):
        p = oracle.measure_gate_populations(pulse, 21, off_hz * 1e-3,
                                            shots,
                                            rabi_command=rabi_command)
        return p[0] - p[3]

    lo, hi = -halfwidth_hz, halfwidth_hz
    g_lo, g_hi = imbalance(lo), imbalance(hi)
    if g_lo == 0.0:
        return lo
    if g_hi == 0.0:
        return hi
    if np.sign(g_lo) == np.sign(g_hi):
        raise CalibrationFailedError(
            "population imbalance does not change sign within "
            f"+-{halfwidth_hz:.0f} Hz")
    while hi - lo > tol_hz:
        mid = 0.5 * (lo + hi)
        g_mid = imbalance(mid)
        if g_mid == 0.0:
            return mid
        if np.sign(g_mid) == np.sign(g_lo):
            lo, g_lo = mid, g_mid
        else:
            hi, g_hi = mid, g_mid
    return 0.5 * (lo + hi)


# --------------------------------------------------- parity and fidelity

@dataclass(frozen=True)
class ParityFit:
    contrast: float
    contrast_stderr: float
    phase_rad: float


def parity_scan(state_or_oracle, analysis_phases, *, pulse=None,
                n_gates: int = 1, shots: int | None = None,
                offset_khz: float = 0.0,
                rabi_command: float = 1.0) -> ParityFit:
    """Fit parity(phi) = C sin(2 phi + phi0) over the phase scan.

    Accepts either a 4x4 two-qubit density matrix (exact parities,
    optionally shot-sampled by a given shots count is not supported in
    that mode) or a HardwareOracle plus pulse/n_gates, in which case
    each phase point is measured with `shots` samples.
    """
    phases = np.asarray(analysis_phases, dtype=float)
    if phases.size < 8:
        raise ConfigError("need at least 8 analysis phases")
    if phases.max() - phases.min() < 0.9 * math.pi:
        raise ConfigError("phase scan must span a full parity period")
    if isinstance(state_or_oracle, HardwareOracle):
        if pulse is None:
            raise ConfigError("oracle mode needs a pulse")
        shots = 500 if shots is None else int(shots)
        vals = np.array([state_or_oracle.measure_parity(
            pulse, n_gates, ph, shots, offset_khz=offset_khz,
            rabi_command=rabi_command) for ph in phases])
        sig = np.sqrt(np.clip(1.0 - vals ** 2, 0.05, None) / shots)
    else:
        rho = np.asarray(state_or_oracle)
        if rho.shape == (4,):
            rho = np.outer(rho, rho.conj())
        if rho.shape != (4, 4):
            raise ConfigError("state must be a 4x4 density matrix or "
                              "a 4-component pure state")
        z = np.array([1.0, -1.0, -1.0, 1.0])
        vals = np.empty(phases.size)
        for k, ph in enumerate(phases):
            u1 = _analysis_half_turn(ph)
            u = np.kron(u1, u1)
            vals[k] = float(z @ np.diag(u @ rho @ u.conj().T).real)
        sig = np.full(phases.size, 1e-6)

    design = np.column_stack([np.sin(2.0 * phases), np.cos(2.0 * phases)])
    wgt = 1.0 / sig ** 2
    ata = design.T @ (design * wgt[:, None])
    try:
        cov = np.linalg.inv(ata)
    except np.linalg.LinAlgError:
        raise FitError("degenerate parity fit (phases collinear)")
    ab = cov @ design.T @ (vals * wgt)
    a, b = ab
    contrast = float(math.hypot(a, b))
    if contrast > 1e-12:
        jac = np.array([a, b]) / contrast
        err = float(math.sqrt(jac @ cov @ jac))
    else:
        err = float(math.sqrt(0.5 * (cov[0, 0] + cov[1, 1])))
    return ParityFit(contrast=min(contrast, 1.0),
                     contrast_stderr=err,
                     phase_rad=float(math.atan2(b, a)))


@dataclass(frozen=True)
class FidelityPoint:
    n_gates: int
    fidelity: float
    stderr: float
    populations_00_11: float
    contrast: float


@dataclass(frozen=True)
class GateFidelityFit:
    per_gate_infidelity: float
    infidelity_stderr: float
    spam_offset: float
    spam_stderr: float
    quadratic_term: float
    quadratic_stderr: float
    coherent_warning: bool


def extract_gate_fidelity(points) -> GateFidelityFit:
    """SPAM-free per-gate infidelity from a gate-count series.

    Weighted least squares of 1-F(N) = s + eps*N; the quadratic term
    of a cubic-free refit flags coherent error accumulation when it is
    resolved at two sigma.
    """
    rows = []
    for p in points:
        if isinstance(p, FidelityPoint):
            rows.append((p.n_gates, 1.0 - p.fidelity, p.stderr))
        else:
            rows.append((int(p[0]), float(p[1]), float(p[2])))
    if len(rows) < 3:
        raise ConfigError("need at least 3 gate counts")
    n = np.array([r[0] for r in rows], dtype=float)
    y = np.array([r[1] for r in rows])
    s = np.array([r[2] for r in rows])
    if np.any(s <= 0):
        raise ConfigError("stderr must be positive")
    w = 1.0 / s ** 2

    def wls(design):
        ata = design.T @ (design * w[:, None])
        cov = np.linalg.inv(ata)
        beta = cov @ design.T @ (y * w)
        return beta, cov

    beta, cov = wls(np.column_stack([np.ones_like(n), n]))
    spam, eps = beta
    if eps < 0:
        raise ModelViolationError(
            f"fitted per-gate infidelity is negative ({eps:.2e})")
    quad_term = quad_err = 0.0
    warning = False
    if len(rows) >= 4:
        beta2, cov2 = wls(np.column_stack([np.ones_like(n), n, n ** 2]))
        quad_term = float(beta2[2])
        quad_err = float(math.sqrt(max(cov2[2, 2], 0.0)))
        warning = quad_err > 0 and abs(quad_term) > 2.0 * quad_err
    return GateFidelityFit(
        per_gate_infidelity=float(eps),
        infidelity_stderr=float(math.sqrt(max(cov[1, 1], 0.0))),
        spam_offset=float(spam),
        spam_stderr=float(math.sqrt(max(cov[0, 0], 0.0))),
        quadratic_term=quad_term, quadratic_stderr=quad_err,
        coherent_warning=bool(warning))


def fidelity_protocol(oracle: HardwareOracle, pulse,
                      gate_counts=(1, 5, 13, 21), *, shots: int = 500,
                      n_phases: int = 12, offset_khz: float = 0.0,
                      rabi_command: float = 1.0):
    """Populations + parity contrast per gate count, then the SPAM-free
    linear fit.  Returns (points, fit)."""
    phases = np.linspace(0.0, math.pi, n_phases, endpoint=False)
    points = []
    for ng in gate_counts:
        frac = oracle.measure_gate_populations(pulse, ng, offset_khz,
                                               shots,
                                               rabi_command=rabi_command)
        pops = float(frac[0] + frac[3])
        var_pops = max(pops * (1.0 - pops), 1e-6) / shots
        par = parity_scan(oracle, phases, pulse=pulse, n_gates=ng,
                          shots=shots, offset_khz=offset_khz,
                          rabi_command=rabi_command)
        fid = 0.5 * pops + 0.5 * par.contrast
        err = 0.5 * math.sqrt(var_pops + par.contrast_stderr ** 2)
        points.append(FidelityPoint(n_gates=int(ng), fidelity=fid,
                                    stderr=err, populations_00_11=pops,
                                    contrast=par.contrast))
    return points, extract_gate_fidelity(points)


# --------------------------------------------------------------- report

@dataclass(frozen=True)
class CalibrationReport:
    mode_frequencies_mhz: tuple
    mode_stderrs_mhz: tuple
    rabi_scale: float
    pointing_offsets_um: tuple
    fine_offset_hz: float
    clock_minutes: float
    shots_used: int

    def __post_init__(self):
        if any(e <= 0 for e in self.mode_stderrs_mhz):
            raise ConfigError("stderr fields must be positive")

    def to_text(self) -> str:
        lines = []
        for k, (f, e) in enumerate(zip(self.mode_frequencies_mhz,
                                       self.mode_stderrs_mhz)):
            lines.append(f"mode_{k}_mhz = {f:.9f} +- {e:.9f}")
        lines.append(f"rabi_scale = {self.rabi_scale:.6f}")
        for k, p in enumerate(self.pointing_offsets_um):
            lines.append(f"pointing_{k}_um = {p:.4f}")
        lines.append(f"fine_offset_hz = {self.fine_offset_hz:.2f}")
        lines.append(f"clock_minutes = {self.clock_minutes:.2f}")
        lines.append(f"shots_used = {self.shots_used}")
        return "\n".join(lines) + "\n"


def trace_csv_text(x_label: str, y_label: str, xs, ys) -> str:
    """Measurement trace (scan axis, sampled response) as CSV text."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ConfigError("trace columns must be equal-length 1d")
    lines = [f"{x_label},{y_label}"]
    lines += [f"{x:.6f},{y:.6e}" for x, y in zip(xs, ys)]
    return "\n".join(lines) + "\n"


def calibrate(oracle: HardwareOracle, pulse, *, band_khz=None,
              step_hz: float = 100.0, with_fine: bool = True,
              ions=None) -> CalibrationReport:
    """Full pipeline: pointing per ion, sideband scan, amplitude, and
    (optionally) fine detuning offset on the supplied pulse."""
    ions = list(range(oracle.n_ions)) if ions is None else list(ions)
    pointing = []
    for i in ions:
        off = pointing_calibration(oracle, i)
        oracle.apply_pointing_correction(i, off)
        pointing.append(off)
    if band_khz is None:
        nominal = [m.frequency_mhz * 1e3
                   for m in oracle.nominal_spectrum.modes]
        band_khz = (min(nominal) - 20.0, max(nominal) + 20.0)
    modes = sideband_scan(oracle, band_khz, step_hz)
    scale = amplitude_calibration(oracle, ions[0])
    fine = 0.0
    if with_fine:
        fine = fine_detuning_calibration(oracle, pulse,
                                         rabi_command=1.0 / scale)
    return CalibrationReport(
        mode_frequencies_mhz=tuple(f for f, _ in modes),
        mode_stderrs_mhz=tuple(e for _, e in modes),
        rabi_scale=float(scale),
        pointing_offsets_um=tuple(pointing),
        fine_offset_hz=float(fine),
        clock_minutes=float(oracle.clock_minutes),
        shots_used=int(oracle.shots_used))
