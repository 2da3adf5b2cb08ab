import math

import numpy as np
import pytest

from fmgate.chain import (
    Mode,
    ModeSpectrum,
    TrapConfig,
    chain_modes,
    dynamical_matrix,
    equilibrium_positions,
    lamb_dicke,
    mode_spectrum,
    spectrum_to_csv,
)
from fmgate.constants import (
    ATOMIC_MASS_KG,
    ELEMENTARY_CHARGE,
    EPSILON_0,
    HBAR,
    TWO_PI,
)
from fmgate.errors import ConfigError, UnstableChainError

TRAP2 = TrapConfig(ion_count=2, axial_freq_mhz=0.6,
                   radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)
TRAP4 = TrapConfig(ion_count=4, axial_freq_mhz=0.15,
                   radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)


# ---------------------------------------------------------------- oracles

def coulomb_length_um(trap):
    wz = TWO_PI * trap.axial_freq_mhz * 1e6
    m = trap.ion_mass_amu * ATOMIC_MASS_KG
    l0 = (ELEMENTARY_CHARGE**2 / (4 * math.pi * EPSILON_0 * m * wz**2)) ** (1 / 3)
    return l0 / 1e-6


def chain_potential(u):
    """Dimensionless total potential of a 1D Coulomb chain."""
    u = np.asarray(u, dtype=float)
    v = 0.5 * np.sum(u**2)
    for i in range(len(u)):
        for j in range(i + 1, len(u)):
            d = abs(u[i] - u[j])
            if d < 1e-9:
                return math.inf
            v += 1.0 / d
    return v


def grid_search_positions(n, levels=7, coarse=161):
    """Nested symmetric grid search minimizing the chain potential.

    Parameterizes the symmetric half of the chain and refines the grid
    window around the best point at each level; independent of the Newton
    solve under test.
    """
    half = n // 2
    odd = n % 2 == 1

    def build(params):
        right = np.sort(np.asarray(params))
        left = -right[::-1]
        mid = [0.0] if odd else []
        return np.concatenate([left, mid, right])

    lo = np.full(half, 0.05)
    hi = np.full(half, 4.0)
    best = None
    for _ in range(levels):
        axes = [np.linspace(lo[k], hi[k], coarse) for k in range(half)]
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        vals = np.array([chain_potential(build(p)) for p in pts])
        best = pts[np.argmin(vals)]
        span = (hi - lo) / (coarse - 1)
        lo = best - 2.5 * span
        hi = best + 2.5 * span
        lo = np.maximum(lo, 1e-4)
    return build(best)


def finite_difference_radial_hessian(u, r_ratio, h=2e-3):
    """Numeric transverse Hessian from the full 2D chain potential.

    Central second differences with one Richardson step (h and h/2) to
    cancel the leading truncation term.
    """
    n = len(u)

    def pot(x):
        v = 0.5 * r_ratio**2 * np.sum(x**2)
        for i in range(n):
            for j in range(i + 1, n):
                v += 1.0 / math.hypot(u[i] - u[j], x[i] - x[j])
        return v

    def raw(step):
        hess = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                xpp = np.zeros(n); xpp[i] += step; xpp[j] += step
                xpm = np.zeros(n); xpm[i] += step; xpm[j] -= step
                xmp = np.zeros(n); xmp[i] -= step; xmp[j] += step
                xmm = np.zeros(n); xmm[i] -= step; xmm[j] -= step
                hess[i, j] = (pot(xpp) - pot(xpm) - pot(xmp)
                              + pot(xmm)) / (4 * step**2)
        return hess

    return (4.0 * raw(h / 2) - raw(h)) / 3.0


# ---------------------------------------------------------------- equilibria

def test_single_ion_sits_at_center():
    trap = TrapConfig(ion_count=1, axial_freq_mhz=0.6,
                      radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)
    assert equilibrium_positions(trap).tolist() == [0.0]


def test_two_ion_spacing_closed_form():
    pos = equilibrium_positions(TRAP2)
    spacing = pos[1] - pos[0]
    wz = TWO_PI * 0.6e6
    m = 171.0 * ATOMIC_MASS_KG
    closed = (ELEMENTARY_CHARGE**2
              / (2 * math.pi * EPSILON_0 * m * wz**2)) ** (1 / 3) / 1e-6
    assert spacing == pytest.approx(closed, rel=1e-12)
    assert spacing == pytest.approx(4.8535731709, abs=1e-6)


def test_positions_sorted_and_symmetric():
    for trap in (TRAP2, TRAP4):
        pos = equilibrium_positions(trap)
        assert np.all(np.diff(pos) > 0)
        np.testing.assert_allclose(pos, -pos[::-1], atol=1e-9)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_equilibria_match_grid_search_oracle(n):
    trap = TrapConfig(ion_count=n, axial_freq_mhz=0.15,
                      radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)
    pos = equilibrium_positions(trap)
    oracle = grid_search_positions(n) * coulomb_length_um(trap)
    np.testing.assert_allclose(pos, oracle, atol=1e-6)


def test_four_ion_minimum_spacing_value():
    # frozen from the converged solve; the paper-style 150 kHz axial trap
    pos = equilibrium_positions(TRAP4)
    assert np.min(np.diff(pos)) == pytest.approx(8.821452, abs=1e-5)


# ---------------------------------------------------------------- mode spectrum

def test_two_ion_modes_closed_form():
    spec = mode_spectrum(TRAP2)
    freqs = spec.frequencies_mhz
    assert freqs[0] == pytest.approx(3.1, rel=1e-12)
    assert freqs[1] == pytest.approx(math.sqrt(3.1**2 - 0.6**2), rel=1e-12)


def test_single_ion_mode():
    trap = TrapConfig(ion_count=1, axial_freq_mhz=0.6,
                      radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)
    spec = mode_spectrum(trap)
    assert len(spec.modes) == 1
    assert spec.modes[0].frequency_mhz == pytest.approx(3.1, rel=1e-12)
    np.testing.assert_allclose(spec.modes[0].participation, [1.0])


def test_com_mode_is_highest_and_uniform():
    for trap in (TRAP2, TRAP4):
        spec = mode_spectrum(trap)
        com = spec.modes[0]
        assert com.frequency_mhz == pytest.approx(trap.radial_freq_1_mhz, rel=1e-9)
        np.testing.assert_allclose(
            com.participation, com.participation[0], atol=1e-10)


def test_four_ion_against_fd_hessian_oracle():
    spec = mode_spectrum(TRAP4)
    u = equilibrium_positions(TRAP4) / coulomb_length_um(TRAP4)
    hess = finite_difference_radial_hessian(u, r_ratio=3.1 / 0.15)
    evals = np.sort(np.linalg.eigvalsh(hess))[::-1]
    oracle_freqs = 0.15 * np.sqrt(evals)
    np.testing.assert_allclose(spec.frequencies_mhz, oracle_freqs, rtol=1e-9)


def test_four_ion_frozen_frequencies():
    spec = mode_spectrum(TRAP4)
    np.testing.assert_allclose(
        spec.frequencies_mhz,
        [3.1, 3.0963690, 3.0912603, 3.0848882],
        atol=5e-7)


def test_participation_orthonormal():
    for trap in (TRAP2, TRAP4):
        b = np.array([m.participation for m in mode_spectrum(trap).modes])
        np.testing.assert_allclose(b @ b.T, np.eye(trap.ion_count), atol=1e-10)


def test_frequency_sum_matches_matrix_trace():
    for trap in (TRAP2, TRAP4):
        spec = mode_spectrum(trap)
        lam = (spec.frequencies_mhz / trap.axial_freq_mhz) ** 2
        tr = np.trace(dynamical_matrix(trap))
        assert np.sum(lam) == pytest.approx(tr, rel=1e-9)


def test_second_radial_branch():
    spec = mode_spectrum(TRAP2, principal_axis="radial_2")
    assert spec.frequencies_mhz[0] == pytest.approx(2.7, rel=1e-12)
    assert spec.frequencies_mhz[1] == pytest.approx(
        math.sqrt(2.7**2 - 0.6**2), rel=1e-12)


def test_unstable_chain_raises():
    trap = TrapConfig(ion_count=4, axial_freq_mhz=1.0,
                      radial_freq_1_mhz=1.5, radial_freq_2_mhz=1.6)
    with pytest.raises(UnstableChainError):
        mode_spectrum(trap)


def test_invalid_trap_rejected():
    with pytest.raises(ConfigError):
        TrapConfig(ion_count=0, axial_freq_mhz=0.6,
                   radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)
    with pytest.raises(ConfigError):
        TrapConfig(ion_count=2, axial_freq_mhz=3.2,
                   radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)


# ---------------------------------------------------------------- Lamb-Dicke

def test_single_ion_lamb_dicke_value():
    trap = TrapConfig(ion_count=1, axial_freq_mhz=0.6,
                      radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)
    eta = chain_modes(trap).modes[0].lamb_dicke[0]
    dk = math.sqrt(2) * TWO_PI / 355e-9
    x0 = math.sqrt(HBAR / (2 * 171.0 * ATOMIC_MASS_KG * TWO_PI * 3.1e6))
    assert eta == pytest.approx(dk * x0, rel=1e-12)
    assert eta == pytest.approx(0.0772852, abs=1e-6)


def test_lamb_dicke_frequency_scaling():
    base = Mode(frequency_mhz=3.1, participation=np.array([1.0]))
    doubled = Mode(frequency_mhz=6.2, participation=np.array([1.0]))
    trap = TrapConfig(ion_count=1, axial_freq_mhz=0.6,
                      radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)
    spec = lamb_dicke(trap, ModeSpectrum(modes=(base, doubled)))
    e1 = spec.modes[0].lamb_dicke[0]
    e2 = spec.modes[1].lamb_dicke[0]
    assert e2 == pytest.approx(e1 / math.sqrt(2), rel=1e-12)


def test_zero_participation_gives_zero_eta():
    trap = TrapConfig(ion_count=3, axial_freq_mhz=0.3,
                      radial_freq_1_mhz=3.1, radial_freq_2_mhz=2.7)
    spec = chain_modes(trap)
    tilt = spec.modes[1]
    assert abs(tilt.participation[1]) < 1e-12
    assert abs(tilt.lamb_dicke[1]) < 1e-12


def test_spectrum_csv_shape():
    text = spectrum_to_csv(chain_modes(TRAP2))
    lines = text.strip().split("\n")
    assert lines[0].startswith("mode_index,frequency_mhz")
    assert len(lines) == 3
    assert len(lines[1].split(",")) == 6
