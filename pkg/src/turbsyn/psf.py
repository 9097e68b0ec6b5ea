"""Point spread functions from Zernike phase and their low-rank basis.

The PSF of an aberrated pupil is ``|F{P exp(-j sum_{i>=4} a_i Z_i)}|^2``
sampled at half the diffraction scale ``lambda / (2 D)``.  A dictionary of
PSFs over a range of turbulence strengths is compressed by PCA into a mean
kernel plus ``rank`` orthonormal components; any PSF is then described by
its projection ``beta`` onto the components.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import eigsh

from .covariance import ImagingGeometry, _atomic_write
from .zernike import MAX_MODES, ZernikeBasis, evaluate_basis, noll_covariance

log = logging.getLogger(__name__)

NATIVE_SIDE = 67
DEFAULT_RANK = 100
PUPIL_GRID = 256
PAD_FACTOR = 2
FIRST_BLUR_MODE = 4
AIRY_FWHM = 1.029  # FWHM of the Airy pattern in units of lambda / D
STRENGTH_RANGE = (0.1, 12.0)
DEFAULT_DICTIONARY = 20_000


def round_odd(x: float) -> int:
    """Nearest odd integer to ``x``, at least 3 (``2 floor(x / 2) + 1``)."""
    return max(3, 2 * int(math.floor(x / 2.0)) + 1)


@dataclass(frozen=True)
class Psf:
    """Non-negative kernel on an odd square grid, normalised to unit sum."""

    kernel: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValueError(f"PSF kernel must be odd and square, got {k.shape}")
        object.__setattr__(self, "kernel", k)

    @property
    def side(self) -> int:
        return self.kernel.shape[0]


@lru_cache(maxsize=8)
def _dft_matrix(grid: int, side: int) -> np.ndarray:
    # rows of the zero-padded DFT centred on zero frequency
    k = np.arange(side) - side // 2
    return np.exp(-2j * np.pi * np.outer(k, np.arange(grid)) / (PAD_FACTOR * grid))


@lru_cache(maxsize=4)
def pupil_basis(grid_size: int = PUPIL_GRID) -> ZernikeBasis:
    return evaluate_basis(grid_size)


def _blur_coefficients(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n_blur = MAX_MODES - FIRST_BLUR_MODE + 1
    if a.shape[-1] == MAX_MODES:
        a = a[..., FIRST_BLUR_MODE - 1:]
    elif a.shape[-1] != n_blur:
        raise ValueError(f"expected {n_blur} coefficients (modes 4-36) or 36, got {a.shape[-1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("coefficients must be finite")
    return a


def phase_to_psf_batch(a, basis: ZernikeBasis | None = None, side: int = NATIVE_SIDE) -> np.ndarray:
    """PSFs for a batch of coefficient vectors, shape ``(n, side, side)``.

    Parameters
    ----------
    a : array_like, shape (n, 33) or (n, 36)
        Zernike coefficients in radians for modes 4-36; a 36-vector has
        its piston and tilt entries ignored.
    basis : ZernikeBasis
        Pupil sampling (defaults to a 256 grid).
    side : int
        Odd crop size in PSF pixels of ``lambda / (2 D)``.
    """
    if side % 2 == 0 or side < 1:
        raise ValueError("side must be a positive odd integer")
    basis = basis or pupil_basis()
    a = np.atleast_2d(_blur_coefficients(a))
    grid = basis.grid_size
    dft = _dft_matrix(grid, side)
    mask = basis.aperture_mask
    out = np.empty((a.shape[0], side, side))
    for n, coeffs in enumerate(a):
        phase = basis.phase(coeffs, first_mode=FIRST_BLUR_MODE)
        pupil = np.where(mask, np.exp(-1j * phase), 0.0)
        field_ = dft @ pupil @ dft.T
        psf = field_.real ** 2 + field_.imag ** 2
        out[n] = psf / psf.sum()
    return out


def phase_to_psf(a, basis: ZernikeBasis | None = None, side: int = NATIVE_SIDE) -> Psf:
    """Incoherent PSF of the pupil aberrated by modes 4-36 of ``a``."""
    return Psf(phase_to_psf_batch(np.asarray(a, dtype=float)[None], basis, side)[0])


def _half_max_width(profile: np.ndarray) -> float:
    peak = profile.max()
    if peak <= 0:
        return 0.0
    half = peak / 2.0
    above = np.flatnonzero(profile >= half)
    lo, hi = above[0], above[-1]
    # linear interpolation of the outermost half-maximum crossings
    if lo > 0:
        left = lo - (profile[lo] - half) / (profile[lo] - profile[lo - 1])
    else:
        left = lo - 0.5
    if hi < profile.size - 1:
        right = hi + (profile[hi] - half) / (profile[hi] - profile[hi + 1])
    else:
        right = hi + 0.5
    return float(right - left)


def measure_fwhm(kernel: np.ndarray) -> float:
    """Mean full width at half maximum along the central row and column."""
    kernel = np.asarray(kernel, dtype=float)
    cy, cx = kernel.shape[0] // 2, kernel.shape[1] // 2
    return 0.5 * (_half_max_width(kernel[cy, :]) + _half_max_width(kernel[:, cx]))


def diffraction_fwhm(geom: ImagingGeometry) -> float:
    """FWHM ``N_0`` of the unaberrated PSF in sensor pixels."""
    pitch = geom.pixel_pitch
    if not pitch > 0:
        raise ValueError("pixel pitch must be positive")
    return AIRY_FWHM * geom.wavelength * geom.f_number / pitch


@dataclass(frozen=True)
class PsfDictionary:
    """Training PSFs with the coefficients and strengths they were drawn at."""

    coeffs: np.ndarray = field(repr=False)
    d_over_r0: np.ndarray = field(repr=False)
    psfs: np.ndarray = field(repr=False)
    strength_range: tuple[float, float] = STRENGTH_RANGE

    def __len__(self) -> int:
        return self.psfs.shape[0]

    def split(self, holdout: int) -> tuple["PsfDictionary", "PsfDictionary"]:
        """Last ``holdout`` samples as a separate dictionary."""
        n = len(self) - holdout
        if not 0 < n < len(self):
            raise ValueError("holdout must leave samples on both sides")
        make = lambda sl: PsfDictionary(self.coeffs[sl], self.d_over_r0[sl], self.psfs[sl],
                                        self.strength_range)
        return make(slice(0, n)), make(slice(n, None))


def sample_coefficients(d_over_r0: np.ndarray, rng: np.random.Generator,
                        cholesky: np.ndarray | None = None) -> np.ndarray:
    """Zernike vectors ``~ N(0, R (D/r0)^(5/3))``, shape ``(n, 36)``."""
    if cholesky is None:
        cholesky = noll_covariance().cholesky
    d_over_r0 = np.asarray(d_over_r0, dtype=float)
    z = rng.standard_normal((d_over_r0.size, MAX_MODES))
    a = z @ cholesky.T * (d_over_r0[:, None] ** (5.0 / 6.0))
    a[:, 0] = 0.0
    return a


def build_dictionary(count: int = DEFAULT_DICTIONARY, strength_range=STRENGTH_RANGE,
                     rng: np.random.Generator | None = None, grid_size: int = PUPIL_GRID,
                     side: int = NATIVE_SIDE) -> PsfDictionary:
    """PSFs at ``D/r0`` drawn log-uniformly over ``strength_range``.

    PSFs are stored as float32 to keep a 20k dictionary near 350 MB.
    """
    if count < 1000:
        raise ValueError(f"dictionary needs at least 1000 samples, got {count}")
    lo, hi = (float(v) for v in strength_range)
    if not 0 < lo <= hi:
        raise ValueError("strength range must be positive and ordered")
    rng = rng if rng is not None else np.random.default_rng()
    d_over_r0 = np.exp(rng.uniform(math.log(lo), math.log(hi), count))
    coeffs = sample_coefficients(d_over_r0, rng)
    basis = pupil_basis(grid_size)
    psfs = np.empty((count, side, side), dtype=np.float32)
    chunk = 256
    for start in range(0, count, chunk):
        stop = min(count, start + chunk)
        psfs[start:stop] = phase_to_psf_batch(coeffs[start:stop], basis, side)
    return PsfDictionary(coeffs, d_over_r0, psfs, (lo, hi))


@dataclass(frozen=True)
class PsfBasis:
    """Mean PSF plus ``rank`` components on a ``side`` x ``side`` grid.

    ``native_fwhm`` is the diffraction FWHM in this basis' pixels;
    ``diffraction_beta`` projects the unaberrated PSF of the native basis.
    """

    mean: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    native_fwhm: float
    explained_energy: float
    diffraction_beta: np.ndarray = field(repr=False)
    scale: float = 1.0

    @property
    def side(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.psi.shape[0]

    def gram(self) -> np.ndarray:
        flat = self.psi.reshape(self.rank, -1)
        return flat @ flat.T

    def reconstruct(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return self.mean + np.tensordot(beta, self.psi, axes=([-1], [0]))

    def diffraction_kernel(self) -> np.ndarray:
        return self.reconstruct(self.diffraction_beta)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.mean, self.psi):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def project_coeffs(psf: Psf | np.ndarray, basis: PsfBasis) -> np.ndarray:
    """``beta_k = <psf - mean, psi_k>`` for one kernel or a batch."""
    kernel = psf.kernel if isinstance(psf, Psf) else np.asarray(psf, dtype=float)
    if kernel.shape[-2:] != basis.mean.shape:
        raise ValueError(f"PSF shape {kernel.shape[-2:]} does not match basis {basis.mean.shape}")
    centred = (kernel - basis.mean).reshape(*kernel.shape[:-2], -1)
    return centred @ basis.psi.reshape(basis.rank, -1).T


def _orient(vectors: np.ndarray) -> np.ndarray:
    # fix the sign so the largest-magnitude entry of each component is positive
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(vectors.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def fit_basis(dictionary: PsfDictionary, rank: int = DEFAULT_RANK,
              diffraction: np.ndarray | None = None) -> PsfBasis:
    """Centred PCA of the dictionary PSFs.

    Small dictionaries use an SVD of the centred data; large ones the top
    eigenvectors of the pixel covariance.
    """
    count = len(dictionary)
    side = dictionary.psfs.shape[1]
    if rank < 1 or rank > count:
        raise ValueError(f"rank must be in 1..{count}, got {rank}")
    features = side * side
    if rank > features:
        raise ValueError(f"rank cannot exceed the {features} pixels per kernel")
    flat = dictionary.psfs.reshape(count, features)
    mean = flat.mean(axis=0, dtype=np.float64)
    if count <= features:
        centred = flat.astype(np.float64) - mean
        _, sv, vt = np.linalg.svd(centred, full_matrices=False)
        eig = sv ** 2
        vectors = vt[:rank]
        top = eig[:rank].sum()
        total = eig.sum()
    else:
        cov = np.zeros((features, features))
        for start in range(0, count, 2000):
            block = flat[start:start + 2000].astype(np.float64) - mean
            cov += block.T @ block
        total = float(np.trace(cov))
        if rank < features // 2:
            v0 = np.ones(features) / math.sqrt(features)
            eig, vecs = eigsh(cov, k=rank, which="LA", v0=v0, tol=1e-12)
        else:
            eig, vecs = np.linalg.eigh(cov)
            eig, vecs = eig[-rank:], vecs[:, -rank:]
        order = np.argsort(eig)[::-1]
        vectors = vecs[:, order].T
        top = eig[order].sum()
        # re-orthonormalise against Lanczos drift
        vectors = np.linalg.qr(vectors.T)[0].T
    vectors = _orient(vectors)
    psi = vectors.reshape(rank, side, side)
    mean = mean.reshape(side, side)
    if diffraction is None:
        diffraction = phase_to_psf(np.zeros(MAX_MODES), side=side).kernel
    beta = (diffraction - mean).ravel() @ vectors.T
    return PsfBasis(mean, psi, measure_fwhm(diffraction), float(top / total) if total > 0 else 1.0, beta)


def holdout_errors(basis: PsfBasis, dictionary: PsfDictionary) -> np.ndarray:
    """Relative L2 reconstruction error of each dictionary PSF."""
    psfs = dictionary.psfs.astype(np.float64)
    recon = basis.reconstruct(project_coeffs(psfs, basis))
    num = np.linalg.norm((recon - psfs).reshape(len(psfs), -1), axis=1)
    den = np.linalg.norm(psfs.reshape(len(psfs), -1), axis=1)
    return num / den


# ---------------------------------------------------------------------------
# resizing


def _hat_matrix(side_out: int, side_in: int, factor: float) -> np.ndarray:
    p = np.arange(side_out) - side_out // 2
    q = np.arange(side_in) - side_in // 2
    return np.maximum(0.0, 1.0 - np.abs(p[:, None] / factor - q[None, :]))


STRENGTH_GAIN = 0.05


def strength_scale(d_over_r0: float, gain: float = STRENGTH_GAIN) -> float:
    """Optional extra magnification ``1 + gain * D/r0`` of the basis.

    Resizing by the diffraction FWHM alone matches the sampling; growing the
    kernels with the turbulence strength adds blur on top of it.
    """
    if d_over_r0 < 0 or gain < 0:
        raise ValueError("strength and gain must be non-negative")
    return 1.0 + gain * float(d_over_r0)


def resized_side(native_side: int, factor: float) -> int:
    return round_odd(native_side * factor)


def resize_basis(basis: PsfBasis, n0: float, scale: float = 1.0) -> PsfBasis:
    """Rescale every kernel by ``scale * n0 / native_fwhm``.

    Kernels are point samples of the bilinear interpolant at the new pixel
    centres.  One normalisation, fixed by the mean kernel, is applied to
    all components so the mapping stays linear; components are then made
    zero-sum so any reconstruction sums to one.  Sides below 3 are clamped
    to 3, which degenerates to a centred delta for tiny targets.

    Parameters
    ----------
    n0 : float
        Target diffraction FWHM in output pixels.
    scale : float
        Extra magnification, see :func:`strength_scale`.
    """
    if not n0 > 0:
        raise ValueError("target FWHM must be positive")
    if not scale > 0:
        raise ValueError("scale must be positive")
    factor = scale * n0 / basis.native_fwhm
    if factor == 1.0:
        return basis
    side = resized_side(basis.side, factor)
    m = _hat_matrix(side, basis.side, factor)
    mean = m @ basis.mean @ m.T
    total = mean.sum()
    if total <= 0:
        raise FloatingPointError("resized mean kernel has no mass")
    mean = mean / total
    psi = (m @ basis.psi @ m.T) / total
    psi -= psi.sum(axis=(1, 2))[:, None, None] * mean[None]
    return PsfBasis(mean, psi, n0 * scale, basis.explained_energy, basis.diffraction_beta, factor)


# ---------------------------------------------------------------------------
# basis files

BASIS_MAGIC = b"TSPSFB\x00\x00"
BASIS_VERSION = 1
_HEADER = struct.Struct("<8sIIIdd")


def save_basis(basis: PsfBasis, path: str | Path) -> None:
    header = _HEADER.pack(BASIS_MAGIC, BASIS_VERSION, basis.side, basis.rank,
                          basis.native_fwhm, basis.explained_energy)
    body = np.concatenate([basis.mean[None], basis.psi]).astype("<f4").tobytes(order="C")
    _atomic_write(Path(path), header + body)


def load_basis(path: str | Path) -> PsfBasis:
    """Read a basis file; components are re-orthonormalised in float64."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated basis file")
    magic, version, side, rank, fwhm, energy = _HEADER.unpack_from(data)
    if magic != BASIS_MAGIC:
        raise ValueError(f"{path}: not a PSF basis file")
    if version != BASIS_VERSION:
        raise ValueError(f"{path}: unsupported basis version {version}")
    expected = _HEADER.size + 4 * (rank + 1) * side * side
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    arr = arr.reshape(rank + 1, side, side)
    mean = arr[0]
    flat = arr[1:].reshape(rank, -1)
    # symmetric orthonormalisation keeps each component closest to its stored copy
    u, _, vt = np.linalg.svd(flat, full_matrices=False)
    psi = (u @ vt).reshape(rank, side, side)
    diffraction = phase_to_psf(np.zeros(MAX_MODES), side=side).kernel
    beta = (diffraction - mean).ravel() @ psi.reshape(rank, -1).T
    return PsfBasis(mean, psi, float(fwhm), float(energy), beta)


def default_basis_path() -> Path:
    return Path(str(resources.files("turbsyn") / "data" / "psf_basis.bin"))


@lru_cache(maxsize=2)
def _load_cached(path: str) -> PsfBasis:
    return load_basis(path)


def default_basis() -> PsfBasis:
    """The basis shipped with the package."""
    return _load_cached(str(default_basis_path()))
