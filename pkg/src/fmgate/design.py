"""FM pulse design: close every mode loop, null drift sensitivity.

solve_fm searches over mirror-symmetric segment detunings for a pulse
that (a) returns every motional mode to its phase-space origin at the
gate end and (b) nulls the time-averaged displacement, which removes
the first-order sensitivity of the loop closure to a common shift of
the drive frequency.  The cost and its analytic gradient come from the
closed-form segment sums in pulse.py; a multi-start L-BFGS-B handles
the non-convexity.

Each restart runs two stages.  The first minimizes the cost sampled at
a few drive offsets, which flattens the closure residual across the
expected drift band instead of only at its center; with K/2 free
parameters that compromise cannot reach zero, so a second stage
re-minimizes the unsampled cost from the stage-one point, driving the
nominal closure to numerical zero without leaving the robust basin.
The result is snapped to the synthesizer's 1 Hz grid and a short
coordinate descent over +-1 Hz steps absorbs the rounding error.

Because reflecting the detuning pattern about the middle of the mode
band flips the sign of the phase response to a common drive offset
while barely changing closure, robustness or the required drive power,
every restart also contributes the reflected, re-polished candidate.
A positive response is what lets a small upward frequency offset
compensate an amplitude deficit, so the selection prefers candidates
whose logarithmic slope lies in a usable positive band.

Among those, the tie-breaker is decoherence exposure rather than drive
power: anomalous heating couples to a uniform fluctuating field, so a
mode heats roughly in proportion to the squared sum of its ion
participations, and the resulting gate error grows with the time the
mode's trajectory spends away from the origin.  The selection
minimizes the heating-weighted sum of per-mode exposures
int |alpha_n(t)|^2 dt, which steers the design toward tight loops
around the quiet (alternating-participation) modes and away from slow
excursions around the in-phase mode.  Because nothing in the closure
cost itself favors such basins, the search runs a second, banded phase
whose starts and box bounds confine the detunings to a window around
the quietest well-coupled mode; its candidates compete in the same
selection, so the banded phase wins exactly when it finds a feasible
low-exposure solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .chain import ModeSpectrum, spectrum_fingerprint
from .errors import ConfigError, InfeasiblePulseError
from .pulse import (
    FMPulse,
    calibrated,
    closure_sum,
    displacement_exposure,
    drive_offset_slope,
    mode_sums,
    worst_residual,
)

# log-slope band (per Hz of drive offset) preferred for drift compensation;
# a slope of ~1.6e-4/Hz turns a -0.8% amplitude error into a +100 Hz offset
SLOPE_BAND = (1.2e-4, 2.2e-4)
SLOPE_BAND_WIDE = (0.8e-4, 3.0e-4)

CLOSURE_TOL = 1e-6          # on sum_n |alpha_n(T)|^2 at the nominal spectrum
ROBUSTNESS_TOL = 1e-4       # on the residual across the drift band


@dataclass
class CandidateSummary:
    """One feasible search candidate, for selection diagnostics."""

    rabi_khz: float
    slope_per_hz: float
    closure: float
    band_residual: float
    weighted_exposure_us: float
    detunings_khz: np.ndarray


@dataclass
class DesignResult:
    """solve_fm outcome plus the diagnostics used to choose it."""

    pulse: FMPulse
    closure: float              # sum_n |alpha_n(T)|^2 at nominal
    band_residual: float        # worst residual over the check offsets
    drive_slope_per_hz: float   # d ln|Theta| / d(drive offset)
    required_rabi_khz: float
    cost: float
    feasible_count: int
    restarts: int
    exposure_us: np.ndarray | None = None   # per-mode int |alpha|^2 dt
    weighted_exposure_us: float = 0.0       # heating-weighted sum
    pool: list = field(default_factory=list)  # CandidateSummary entries


def heating_weights(spectrum: ModeSpectrum) -> np.ndarray:
    """Relative heating susceptibility per mode, max-normalized.

    A spatially uniform fluctuating field drives each mode through the
    sum of its ion participations, so the in-phase mode takes nearly
    all the anomalous heating and alternating modes almost none.
    Measured rates on out-of-phase modes still sit one to two orders
    below the in-phase mode rather than at zero, so a small floor keeps
    the selection from treating any mode's exposure as free.
    """
    w = np.array([abs(np.sum(m.participation)) ** 2
                  for m in spectrum.modes])
    return np.maximum(w / w.max(), 0.05)


def _mirror(half: np.ndarray, k: int) -> np.ndarray:
    return np.concatenate([half, half[::-1]])


def _fold_gradient(full: np.ndarray, k: int) -> np.ndarray:
    half = k // 2
    return full[:half] + full[:half - 1 - k:-1]


def _seed_bank(rng, restarts, dim, lo, hi):
    mid = 0.5 * (lo + hi)
    span = hi - lo
    seeds = [np.full(dim, mid),
             np.linspace(lo + 0.2 * span, hi - 0.2 * span, dim),
             np.linspace(hi - 0.2 * span, lo + 0.2 * span, dim),
             np.full(dim, lo + 0.25 * span),
             np.full(dim, hi - 0.25 * span)]
    while len(seeds) < restarts:
        seeds.append(rng.uniform(lo, hi, size=dim))
    return seeds[:restarts]


# banded-phase geometry (kHz): window kept around the quietest mode and
# the stand-off clearance from any strongly heating mode
_QUIET_BELOW = 30.0
_QUIET_ABOVE = 22.0
_HOT_CLEARANCE = 34.0


def _quiet_band(freqs_khz, heat_w, pair_eta, eta_ref):
    """Detuning window hugging the quietest well-coupled mode, or None."""
    coupled = pair_eta >= 0.2 * eta_ref
    if not np.any(coupled):
        return None
    score = np.where(coupled, heat_w, np.inf)
    q = int(np.argmin(score))
    lo = freqs_khz[q] - _QUIET_BELOW
    hi = freqs_khz[q] + _QUIET_ABOVE
    for f, w in zip(freqs_khz, heat_w):
        if w > 0.3 and f != freqs_khz[q]:
            if f > freqs_khz[q]:
                hi = min(hi, f - _HOT_CLEARANCE)
            else:
                lo = max(lo, f + _HOT_CLEARANCE)
    if hi - lo < 10.0:
        return None
    return lo, hi


def design_search(spectrum: ModeSpectrum,
                  gate_time_us: float = 200.0,
                  segment_count: int = 20,
                  rabi_cap_khz: float = 7.0,
                  ion_pair=(0, 1),
                  symmetric: bool = True,
                  restarts: int = 48,
                  seed: int = 7,
                  avg_weight: float = 1.0,
                  offset_samples_khz=(0.0, -0.5, 0.5, -1.0, 1.0),
                  offset_sample_weight: float = 0.1,
                  band_margin_khz: float = 50.0,
                  check_offsets_khz=None,
                  initial_detunings_khz=None,
                  detuning_bounds_khz=None) -> DesignResult:
    """Run the full multi-start search and report the chosen candidate.

    solve_fm is the thin contract wrapper around this.
    """
    if segment_count < 1:
        raise ConfigError("segment_count must be positive")
    if symmetric and segment_count % 2 != 0:
        raise ConfigError("symmetric pulses need an even segment count")
    if gate_time_us <= 0:
        raise ConfigError("gate_time_us must be positive")
    n_ions = spectrum.ion_count
    i, j = ion_pair
    if not (0 <= i < n_ions and 0 <= j < n_ions) or i == j:
        raise ConfigError(f"ion_pair {ion_pair} invalid for {n_ions} ions")

    eta = spectrum.eta_matrix()
    pair_eta = np.sqrt(np.abs(eta[:, i] * eta[:, j]))
    if np.max(pair_eta) <= 0:
        raise ConfigError("ion pair couples to no mode")
    eta_ref = float(np.max(pair_eta))
    freqs = spectrum.frequencies_mhz
    if detuning_bounds_khz is not None:
        lo, hi = (float(v) for v in detuning_bounds_khz)
        if not lo < hi:
            raise ConfigError("detuning bounds must satisfy lo < hi")
    else:
        lo = freqs.min() * 1e3 - band_margin_khz
        hi = freqs.max() * 1e3 + band_margin_khz

    k = segment_count
    dim = k // 2 if symmetric else k
    dur = np.full(k, gate_time_us / k)
    total = gate_time_us
    weights = np.maximum(np.abs(eta[:, i]), np.abs(eta[:, j])) ** 2
    weights = weights / weights.sum()
    offsets = np.atleast_1d(np.asarray(offset_samples_khz, dtype=float))
    sample_w = np.where(offsets == 0.0, 1.0, offset_sample_weight)

    def expand(params):
        return _mirror(params, k) if symmetric else params

    def fold(grad):
        return _fold_gradient(grad, k) if symmetric else grad

    def cost_only(det):
        c = 0.0
        for n in range(len(freqs)):
            s = mode_sums(det, dur, freqs[n])
            c += weights[n] * (abs(s.displacement / total) ** 2
                               + avg_weight
                               * abs(s.time_integral / total**2) ** 2)
        return c

    def make_cost(offs, offs_w):
        # dimensionless: |I/T|^2 keeps the initial cost O(1) so the
        # optimizer's relative tolerances behave
        def cost_grad(params):
            det = expand(params)
            c = 0.0
            g = np.zeros(k)
            for ofs, sw in zip(offs, offs_w):
                for n in range(len(freqs)):
                    s = mode_sums(det + ofs, dur, freqs[n], grad=True)
                    a = weights[n] * sw
                    c += a * (abs(s.displacement / total) ** 2
                              + avg_weight
                              * abs(s.time_integral / total**2) ** 2)
                    g += (2 * a / total**2) * np.real(
                        np.conj(s.displacement) * s.d_displacement)
                    g += (2 * a * avg_weight / total**4) * np.real(
                        np.conj(s.time_integral) * s.d_time_integral)
            return c, fold(g)
        return cost_grad

    stage_a = make_cost(offsets, sample_w)
    stage_b = make_cost(np.array([0.0]), np.array([1.0]))

    def polish_on_grid(det):
        # +-1 Hz coordinate descent absorbs the synthesizer rounding
        best = cost_only(det)
        half = dim
        for _ in range(4):
            improved = False
            for m in range(half):
                for step in (1e-3, -1e-3):
                    trial = det.copy()
                    trial[m] += step
                    if symmetric:
                        trial[k - 1 - m] += step
                    c = cost_only(trial)
                    if c < best:
                        best, det, improved = c, trial, True
            if not improved:
                break
        return det, best

    if check_offsets_khz is None:
        check_offsets_khz = np.linspace(-1.0, 1.0, 9)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    fingerprint = spectrum_fingerprint(spectrum)
    heat_w = heating_weights(spectrum)
    starts = [(x, (lo, hi))
              for x in _seed_bank(rng, restarts, dim, lo, hi)]
    if detuning_bounds_khz is None:
        quiet = _quiet_band(freqs * 1e3, heat_w, pair_eta, eta_ref)
        if quiet is not None:
            qlo, qhi = max(quiet[0], lo), min(quiet[1], hi)
            if qhi - qlo >= 10.0:
                n_q = max(4, restarts // 2)
                starts += [(x, (qlo, qhi))
                           for x in _seed_bank(rng, n_q, dim, qlo, qhi)]
    if initial_detunings_khz is not None:
        guess = np.asarray(initial_detunings_khz, dtype=float)
        starts.insert(0, (guess[:dim].copy(), (lo, hi)))

    def refine(x, box):
        res = minimize(stage_b, x, jac=True, method="L-BFGS-B",
                       bounds=[box] * dim,
                       options={"maxiter": 600, "ftol": 1e-18,
                                "gtol": 1e-14})
        det = np.round(expand(res.x) * 1e3) / 1e3  # 1 Hz synthesizer grid
        det, cost = polish_on_grid(det)
        trial = FMPulse(detunings_khz=det,
                        segment_duration_us=gate_time_us / k,
                        rabi_khz=1.0, symmetric=symmetric, ion_pair=(i, j),
                        eta_ref=eta_ref, spectrum_hash=fingerprint)
        return calibrated(trial, spectrum), cost

    candidates = []
    best_residual = math.inf
    best_rabi = math.inf
    for start, box in starts:
        res_a = minimize(stage_a, start, jac=True, method="L-BFGS-B",
                         bounds=[box] * dim,
                         options={"maxiter": 800, "ftol": 1e-16,
                                  "gtol": 1e-12})
        mid_khz = 0.5 * (box[0] + box[1])
        for x in (res_a.x, 2.0 * mid_khz - res_a.x):
            try:
                cal, cost = refine(x, box)
            except Exception:
                continue
            clo = closure_sum(cal, spectrum)
            residual = worst_residual(cal, spectrum, check_offsets_khz)
            best_residual = min(best_residual, residual)
            if clo <= CLOSURE_TOL and residual <= ROBUSTNESS_TOL:
                best_rabi = min(best_rabi, cal.rabi_khz)
                if cal.rabi_khz <= rabi_cap_khz:
                    slope = drive_offset_slope(cal, spectrum)
                    expo = displacement_exposure(cal, spectrum)
                    candidates.append((cal, clo, residual, slope,
                                       cal.rabi_khz, cost, expo,
                                       float(heat_w @ expo)))
            elif cal.rabi_khz < best_rabi:
                best_rabi = cal.rabi_khz

    if not candidates:
        raise InfeasiblePulseError(
            f"no pulse met closure {CLOSURE_TOL:g} / residual "
            f"{ROBUSTNESS_TOL:g} under the {rabi_cap_khz:g} kHz cap "
            f"(best residual {best_residual:.3g}, best required Rabi "
            f"{best_rabi:.3g} kHz)",
            best_residual=best_residual,
            required_rabi_khz=best_rabi)

    def calmest_in(band):
        pool = [c for c in candidates if band[0] <= c[3] <= band[1]]
        return min(pool, key=lambda c: c[7]) if pool else None

    chosen = calmest_in(SLOPE_BAND) or calmest_in(SLOPE_BAND_WIDE) \
        or min(candidates, key=lambda c: c[2])
    cal, clo, residual, slope, rabi, cost, expo, wx = chosen
    pool = [CandidateSummary(rabi_khz=c[4], slope_per_hz=c[3],
                             closure=c[1], band_residual=c[2],
                             weighted_exposure_us=c[7],
                             detunings_khz=c[0].detunings_khz)
            for c in candidates]
    return DesignResult(pulse=cal, closure=clo, band_residual=residual,
                        drive_slope_per_hz=slope, required_rabi_khz=rabi,
                        cost=cost, feasible_count=len(candidates),
                        restarts=len(starts), exposure_us=expo,
                        weighted_exposure_us=wx, pool=pool)


def solve_fm(spectrum: ModeSpectrum,
             gate_time_us: float = 200.0,
             segment_count: int = 20,
             rabi_cap_khz: float = 7.0,
             ion_pair=(0, 1),
             **kwargs) -> FMPulse:
    """Design a calibrated FM pulse for one ion pair.

    Returns the chosen pulse; raises InfeasiblePulseError (carrying the
    best residual and required Rabi seen) when no restart satisfies the
    post-conditions under the cap.
    """
    return design_search(spectrum, gate_time_us=gate_time_us,
                         segment_count=segment_count,
                         rabi_cap_khz=rabi_cap_khz,
                         ion_pair=ion_pair, **kwargs).pulse
