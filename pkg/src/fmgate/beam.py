"""Gaussian addressing-beam model: crosstalk and addressability.

The individual-addressing beams are clean Gaussians, so neighbor
crosstalk is set by the waist-to-spacing ratio alone.  Intensity
crosstalk falls as exp(-2 d^2/w^2) and amplitude (Rabi) crosstalk as
its square root.
"""

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class BeamProfile:
    """Addressing beam: 1/e^2 intensity radius, power, pointing error."""

    waist_radius_um: float
    peak_power_mw: float = 1.5
    pointing_offset_um: float = 0.0

    def __post_init__(self):
        if self.waist_radius_um <= 0:
            raise ConfigError("waist_radius_um must be positive")
        if self.peak_power_mw < 0:
            raise ConfigError("peak_power_mw must be non-negative")


def relative_intensity(beam: BeamProfile, distance_um: float) -> float:
    """Intensity at distance_um from the target ion, relative to peak.

    The pointing offset shifts the beam center off the target, so the
    relevant displacement is measured from the actual center.
    """
    if distance_um < 0:
        raise ConfigError("distance_um must be non-negative")
    d = abs(distance_um - beam.pointing_offset_um)
    r = d / beam.waist_radius_um
    return math.exp(-2.0 * r * r)


def rabi_crosstalk(beam: BeamProfile, distance_um: float) -> float:
    """Neighbor-to-target Rabi ratio: the field ratio exp(-d^2/w^2)."""
    return math.sqrt(relative_intensity(beam, distance_um))


def addressable_count(max_deflection_um: float,
                      ion_spacing_um: float) -> int:
    """How many ions the steering range reaches at the given spacing.

    The deflection spans +-max_deflection_um about the chain center;
    every multiple of the spacing inside that span is reachable, plus
    the center ion itself.
    """
    if ion_spacing_um <= 0:
        raise ConfigError("ion_spacing_um must be positive")
    if max_deflection_um < 0:
        raise ConfigError("max_deflection_um must be non-negative")
    return int(math.floor(2.0 * max_deflection_um / ion_spacing_um)) + 1


@dataclass(frozen=True)
class CrosstalkReport:
    """Point values plus a band from +-0.25 um spacing uncertainty."""

    intensity: float
    intensity_band: tuple
    rabi: float
    rabi_band: tuple


def crosstalk_report(beam: BeamProfile, ion_spacing_um: float,
                     spacing_halfwidth_um: float = 0.25) -> CrosstalkReport:
    if ion_spacing_um <= spacing_halfwidth_um:
        raise ConfigError("spacing must exceed its uncertainty halfwidth")
    lo = ion_spacing_um - spacing_halfwidth_um
    hi = ion_spacing_um + spacing_halfwidth_um
    return CrosstalkReport(
        intensity=relative_intensity(beam, ion_spacing_um),
        intensity_band=(relative_intensity(beam, hi),
                        relative_intensity(beam, lo)),
        rabi=rabi_crosstalk(beam, ion_spacing_um),
        rabi_band=(rabi_crosstalk(beam, hi), rabi_crosstalk(beam, lo)))
