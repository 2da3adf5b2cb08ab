"""Physical constants used throughout the package.

Values are CODATA 2018. Everything internal to the package works in SI
(kilograms, meters, seconds, rad/s); the user-facing API converts to the
conventional lab units (MHz, kHz, us, um) at the boundaries.
"""

import math

# CODATA 2018
ELEMENTARY_CHARGE = 1.602176634e-19  # C, exact
HBAR = 1.054571817e-34  # J s
EPSILON_0 = 8.8541878128e-12  # F / m
ATOMIC_MASS_KG = 1.66053906660e-27  # kg

COULOMB_CONSTANT = 1.0 / (4.0 * math.pi * EPSILON_0)  # N m^2 / C^2

TWO_PI = 2.0 * math.pi

# unit helpers
MHZ = 1e6
KHZ = 1e3
US = 1e-6
MS = 1e-3
UM = 1e-6
NM = 1e-9


def angular(freq_hz):
    """Cyclic frequency in Hz -> angular frequency in rad/s."""
    return TWO_PI * freq_hz
