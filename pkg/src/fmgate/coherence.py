"""Carrier Rabi-frequency reduction from thermal motion and Ramsey fits.

A hot radial mode shrinks the effective carrier Rabi frequency (the
motional wavepacket smears the field the ion samples), which bends
Ramsey contrast down in addition to genuine dephasing.  This module
evaluates that reduction factor, corrects measured contrasts for it,
and fits exponential coherence times to raw or corrected data.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .errors import ConfigError, FitError, OutOfModelError

TAIL_WEIGHT = 1e-10         # thermal series truncation


def laguerre_sequence(x: float, n_max: int) -> np.ndarray:
    """L_0(x)..L_n_max(x) by the ascending three-term recurrence."""
    if n_max < 0:
        raise ConfigError("n_max must be non-negative")
    vals = np.empty(n_max + 1)
    vals[0] = 1.0
    if n_max == 0:
        return vals
    vals[1] = 1.0 - x
    for k in range(1, n_max):
        vals[k + 1] = ((2.0 * k + 1.0 - x) * vals[k]
                       - k * vals[k - 1]) / (k + 1.0)
    return vals


def _check_eta(eta):
    if not 0.0 < eta < 0.5:
        raise ConfigError("lamb_dicke must lie in (0, 0.5)")


def debye_waller_factor(n: int, eta: float) -> float:
    """Rabi reduction for Fock state n: exp(-eta^2/2) L_n(eta^2).

    Positive and <= 1 while eta^2 stays below the first zero of L_n
    (eta = 0.1 keeps that true through n ~ 140); larger n or eta can
    legitimately go negative as the Laguerre polynomial oscillates.
    """
    if n < 0 or n != int(n):
        raise ConfigError("n must be a non-negative integer")
    _check_eta(eta)
    x = eta * eta
    return math.exp(-0.5 * x) * laguerre_sequence(x, int(n))[int(n)]


def thermal_mean_rabi(nbar: float, eta: float) -> float:
    """Thermal average of the Rabi reduction factor.

    Sums P_n = nbar^n / (1+nbar)^(n+1) against debye_waller_factor
    until the remaining thermal weight drops below TAIL_WEIGHT.
    """
    if nbar < 0:
        raise ConfigError("nbar must be non-negative")
    _check_eta(eta)
    x = eta * eta
    if nbar == 0.0:
        return math.exp(-0.5 * x)
    q = nbar / (1.0 + nbar)
    n_cut = max(10, int(math.ceil(math.log(TAIL_WEIGHT) / math.log(q))))
    weights = (1.0 - q) * q ** np.arange(n_cut + 1)
    return math.exp(-0.5 * x) * float(
        weights @ laguerre_sequence(x, n_cut))


def contrast_attenuation(nbar: float, eta: float) -> float:
    """Ramsey-contrast factor from an imperfect second pi/2 pulse.

    The analysis pulse rotates by pi/2 times the reduced mean Rabi
    ratio, costing sin(pi r / 2)^2 of the fringe contrast.
    """
    r = thermal_mean_rabi(nbar, eta)
    s = math.sin(0.5 * math.pi * r)
    return s * s


@dataclass(frozen=True)
class RamseyDataset:
    """Ramsey contrast vs interval time, plus the heating model.

    times in ms, heating rate in phonons/s; stderrs may be None for
    unweighted fitting.
    """

    times_ms: np.ndarray
    contrasts: np.ndarray
    stderrs: np.ndarray | None = None
    heating_rate_phonons_per_s: float = 0.0
    lamb_dicke: float = 0.1
    initial_nbar: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times_ms, dtype=float)
        c = np.asarray(self.contrasts, dtype=float)
        object.__setattr__(self, "times_ms", t)
        object.__setattr__(self, "contrasts", c)
        if t.ndim != 1 or t.size != c.size:
            raise ConfigError("times and contrasts must be 1d and equal "
                              "length")
        if t.size and np.any(np.diff(t) <= 0):
            raise ConfigError("interval times must be strictly increasing")
        if np.any((c < 0) | (c > 1)):
            raise ConfigError("contrasts must lie in [0, 1]")
        if self.stderrs is not None:
            s = np.asarray(self.stderrs, dtype=float)
            object.__setattr__(self, "stderrs", s)
            if s.shape != t.shape or np.any(s <= 0):
                raise ConfigError("stderrs must be positive, one per point")
        if self.heating_rate_phonons_per_s < 0:
            raise ConfigError("heating rate must be non-negative")
        if self.initial_nbar < 0:
            raise ConfigError("initial_nbar must be non-negative")
        _check_eta(self.lamb_dicke)

    def nbar_at(self, t_ms) -> np.ndarray:
        return (self.initial_nbar
                + self.heating_rate_phonons_per_s * 1e-3
                * np.asarray(t_ms, dtype=float))


def ramsey_dataset_from_csv(path_or_text, *, heating_rate_phonons_per_s,
                            lamb_dicke, initial_nbar=0.0) -> RamseyDataset:
    """Load (t_ms, contrast[, stderr]) rows; first line is a header."""
    if "\n" in str(path_or_text):
        fh = io.StringIO(path_or_text)
    else:
        fh = open(path_or_text, newline="")
    with fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or len(rows) < 2:
        raise ConfigError("CSV needs a header and at least one data row")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    if data.shape[1] not in (2, 3):
        raise ConfigError("expected columns t_ms,contrast[,stderr]")
    stderrs = data[:, 2] if data.shape[1] == 3 else None
    return RamseyDataset(times_ms=data[:, 0], contrasts=data[:, 1],
                         stderrs=stderrs,
                         heating_rate_phonons_per_s=heating_rate_phonons_per_s,
                         lamb_dicke=lamb_dicke, initial_nbar=initial_nbar)


def synthesize_ramsey_contrasts(times_ms, tau_ms, *,
                                heating_rate_phonons_per_s,
                                lamb_dicke, initial_nbar=0.0,
                                amplitude=1.0) -> np.ndarray:
    """Forward model: exponential decay times the thermal Rabi penalty."""
    times_ms = np.asarray(times_ms, dtype=float)
    if tau_ms <= 0:
        raise ConfigError("tau_ms must be positive")
    nbars = initial_nbar + heating_rate_phonons_per_s * 1e-3 * times_ms
    att = np.array([contrast_attenuation(nb, lamb_dicke) for nb in nbars])
    return amplitude * np.exp(-times_ms / tau_ms) * att


@dataclass(frozen=True)
class CorrectedContrast:
    contrasts: np.ndarray
    clipped: bool


def correct_ramsey_contrast(dataset: RamseyDataset) -> CorrectedContrast:
    """Divide out the thermal Rabi penalty per point.

    Refuses to correct once the attenuation passes below 0.5 — beyond
    that the division amplifies noise past the point of usefulness and
    the linear heating model itself is suspect.
    """
    nbars = dataset.nbar_at(dataset.times_ms)
    att = np.array([contrast_attenuation(nb, dataset.lamb_dicke)
                    for nb in nbars])
    if np.any(att < 0.5):
        worst = float(att.min())
        raise OutOfModelError(
            f"attenuation {worst:.3f} below 0.5; the correction is not "
            "trustworthy this deep into heating")
    corrected = dataset.contrasts / att
    clipped = bool(np.any(corrected > 1.0))
    return CorrectedContrast(contrasts=np.clip(corrected, 0.0, 1.0),
                             clipped=clipped)


def fit_coherence_time(times_ms, contrasts, stderrs=None):
    """Weighted exponential fit C(t) = C0 exp(-t/tau); returns (tau, err).

    stderrs weight the fit when provided.  Data that do not decay
    (non-negative trend) are rejected rather than fitted.
    """
    t = np.asarray(times_ms, dtype=float)
    c = np.asarray(contrasts, dtype=float)
    if t.size < 4:
        raise ConfigError("need at least 4 points to fit")
    if np.polyfit(t, c, 1)[0] >= 0:
        raise FitError("contrast does not decay with time")

    def model(tt, c0, tau):
        return c0 * np.exp(-tt / tau)

    # crude starting tau from the endpoint ratio
    drop = max(c[0] / max(c[-1], 1e-9), 1.0 + 1e-6)
    tau0 = float(np.clip((t[-1] - t[0]) / math.log(drop), 1e-2, 1e5))
    p0 = (min(1.0, max(float(c.max()), 1e-3)), tau0)
    try:
        popt, pcov = curve_fit(model, t, c, p0=p0, sigma=stderrs,
                               absolute_sigma=stderrs is not None,
                               bounds=([1e-9, 1e-3], [1.0, 1e7]),
                               maxfev=20000)
    except RuntimeError as exc:
        raise FitError(f"exponential fit failed to converge: {exc}")
    tau = float(popt[1])
    err = float(np.sqrt(pcov[1, 1]))
    if not np.isfinite(err) or tau >= 1e6:
        raise FitError("fit degenerate: coherence time unbounded")
    return tau, err


def fit_report(label: str, tau_ms: float, stderr_ms: float,
               n_points: int) -> str:
    return (f"{label}: tau_ms={tau_ms:.4f} stderr_ms={stderr_ms:.4f} "
            f"points={n_points}")
