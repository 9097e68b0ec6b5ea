"""Zernike polynomials in Noll ordering and the single-aperture Noll covariance.

Modes are normalised over the unit disk so that the mean of ``Z_j**2`` over
the aperture is one.  Index ``j = 1`` is piston, ``j = 2, 3`` are the x/y
tilts and ``j >= 4`` carry the higher-order aberrations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

MAX_MODES = 36
MIN_GRID = 16


class NollIndex(NamedTuple):
    """Noll index ``j`` with radial order ``n``, azimuthal order ``m >= 0``
    and the angular parity (``"cos"``, ``"sin"`` or ``None`` when ``m == 0``)."""

    j: int
    n: int
    m: int
    parity: str | None

    @property
    def signed_m(self) -> int:
        """``+m`` for cosine modes and ``-m`` for sine modes."""
        return -self.m if self.parity == "sin" else self.m


def noll_to_nm(j: int) -> NollIndex:
    """Return the ``(n, m, parity)`` triple for Noll index ``j`` (1..36)."""
    if not isinstance(j, (int, np.integer)) or not 1 <= j <= MAX_MODES:
        raise IndexError(f"Noll index must be in 1..{MAX_MODES}, got {j!r}")
    j = int(j)
    n = int((math.isqrt(8 * j - 7) - 1) // 2)
    k = j - n * (n + 1) // 2 - 1
    if n % 2 == 0:
        m = 2 * ((k + 1) // 2)
    else:
        m = 2 * (k // 2) + 1
    if m == 0:
        parity = None
    else:
        parity = "cos" if j % 2 == 0 else "sin"
    return NollIndex(j, n, m, parity)


def radial_polynomial(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    """Zernike radial polynomial ``R_n^m(rho)`` (unnormalised)."""
    rho = np.asarray(rho, dtype=float)
    out = np.zeros_like(rho)
    for k in range((n - m) // 2 + 1):
        c = (-1) ** k * math.factorial(n - k) / (
            math.factorial(k)
            * math.factorial((n + m) // 2 - k)
            * math.factorial((n - m) // 2 - k)
        )
        out += c * rho ** (n - 2 * k)
    return out


def zernike(j: int, rho, theta) -> np.ndarray:
    """Evaluate the normalised Zernike mode ``Z_j`` at polar points."""
    idx = noll_to_nm(j)
    rho = np.asarray(rho, dtype=float)
    theta = np.asarray(theta, dtype=float)
    radial = radial_polynomial(idx.n, idx.m, rho)
    if idx.m == 0:
        return math.sqrt(idx.n + 1) * radial
    norm = math.sqrt(2 * (idx.n + 1))
    if idx.parity == "cos":
        return norm * radial * np.cos(idx.m * theta)
    return norm * radial * np.sin(idx.m * theta)


@dataclass(frozen=True)
class ZernikeBasis:
    """The first 36 Zernike modes sampled on a square grid spanning the unit disk.

    ``modes[j - 1]`` holds ``Z_j``; every mode is zero outside ``aperture_mask``.
    """

    grid_size: int
    modes: np.ndarray = field(repr=False)
    aperture_mask: np.ndarray = field(repr=False)

    @property
    def area(self) -> int:
        return int(self.aperture_mask.sum())

    def gram(self) -> np.ndarray:
        """Masked inner products ``<Z_i, Z_j> / area``."""
        flat = self.modes[:, self.aperture_mask]
        return flat @ flat.T / self.area

    def phase(self, coeffs, first_mode: int = 1) -> np.ndarray:
        """Sum ``coeffs[k] * Z_{first_mode + k}`` over the grid.

        ``coeffs`` may carry leading batch dimensions.
        """
        coeffs = np.asarray(coeffs, dtype=float)
        n = coeffs.shape[-1]
        sub = self.modes[first_mode - 1:first_mode - 1 + n]
        if sub.shape[0] != n:
            raise ValueError("too many coefficients for a 36-mode basis")
        return np.tensordot(coeffs, sub, axes=([-1], [0]))


def evaluate_basis(grid_size: int = 128) -> ZernikeBasis:
    """Sample all 36 modes on a ``grid_size`` x ``grid_size`` pixel-centred grid."""
    if grid_size < MIN_GRID or grid_size % 2:
        raise ValueError(f"grid_size must be an even integer >= {MIN_GRID}, got {grid_size}")
    c = (np.arange(grid_size) + 0.5 - grid_size / 2) / (grid_size / 2)
    x, y = np.meshgrid(c, c, indexing="xy")
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    mask = rho <= 1.0
    modes = np.stack([zernike(j, rho, theta) for j in range(1, MAX_MODES + 1)])
    modes[:, ~mask] = 0.0
    modes.setflags(write=False)
    mask.setflags(write=False)
    return ZernikeBasis(grid_size, modes, mask)


@dataclass(frozen=True)
class NollCovariance:
    """Zernike coefficient covariance for a single aperture, in rad^2.

    ``matrix`` is given at ``d_over_r0`` (1 by default) with the piston row and
    column set to zero.  ``cholesky`` factors the deflated matrix in which the
    piston diagonal entry is replaced by one.
    """

    matrix: np.ndarray
    cholesky: np.ndarray
    d_over_r0: float = 1.0
    k0_scaled: float = 1e-3

    def scaled(self, d_over_r0: float) -> "NollCovariance":
        """Covariance at another turbulence strength, ``matrix * (D/r0)^(5/3)``."""
        if d_over_r0 < 0:
            raise ValueError("D/r0 must be non-negative")
        factor = (d_over_r0 / self.d_over_r0) ** (5.0 / 3.0)
        matrix = self.matrix * factor
        return NollCovariance(matrix, deflated_cholesky(matrix), d_over_r0, self.k0_scaled)


def deflated_cholesky(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``matrix`` with the piston row deflated."""
    deflated = np.array(matrix, dtype=float)
    deflated[0, :] = 0.0
    deflated[:, 0] = 0.0
    deflated[0, 0] = 1.0
    # zero-strength turbulence: identity rows keep the factorisation defined
    zero_rows = np.flatnonzero(np.abs(np.diag(deflated)) == 0.0)
    deflated[zero_rows, zero_rows] = 1.0
    try:
        chol = np.linalg.cholesky(deflated)
    except np.linalg.LinAlgError as exc:
        w = np.linalg.eigvalsh(deflated)
        raise np.linalg.LinAlgError(
            f"Noll covariance is not positive definite after piston deflation "
            f"(min eigenvalue {w.min():.3e})"
        ) from exc
    chol[zero_rows, zero_rows] = 0.0
    return chol


# Fried scaling: r0^(-5/3) = 0.423 k^2 int Cn2 w dz.  The coefficient
# covariance is A_ij * int Cn2 w f_ij dz with A_ij = 0.00969 k^2 2^(14/3)
# pi^(8/3) R^(5/3) sqrt((n_i+1)(n_j+1)); dividing out (D/r0)^(5/3) leaves
# this geometry-free constant.
COVARIANCE_PREFACTOR = 0.00969 * 2 ** (14 / 3) * math.pi ** (8 / 3)
FRIED_CONSTANT = 0.423
NOLL_NORMALISATION = COVARIANCE_PREFACTOR / (FRIED_CONSTANT * 2 ** (5 / 3))


def noll_covariance(num_modes: int = MAX_MODES, k0_scaled: float = 1e-3, **quad_options) -> NollCovariance:
    """Noll covariance matrix at ``D/r0 = 1`` from the zero-separation
    Zernike correlation kernel.

    Parameters
    ----------
    num_modes : int
        Must be 36.
    k0_scaled : float
        Dimensionless outer-scale parameter ``2 pi R k0``.
    """
    from .covariance import takato_kernel

    if num_modes != MAX_MODES:
        raise ValueError(f"only {MAX_MODES} modes are supported")
    matrix = np.zeros((num_modes, num_modes))
    for i in range(2, num_modes + 1):
        ni = noll_to_nm(i).n
        for j in range(i, num_modes + 1):
            nj = noll_to_nm(j).n
            f = takato_kernel(i, j, (0.0, 0.0), k0_scaled, **quad_options)
            if f == 0.0:
                continue
            value = NOLL_NORMALISATION * math.sqrt((ni + 1) * (nj + 1)) * f
            matrix[i - 1, j - 1] = matrix[j - 1, i - 1] = value
    return NollCovariance(matrix, deflated_cholesky(matrix), 1.0, k0_scaled)
