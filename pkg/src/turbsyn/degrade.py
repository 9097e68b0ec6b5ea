"""Image degradation: tilt warp, spatially varying blur and sensor noise.

A frame is degraded as ``I = sum_k psi_k * (beta_k . W(J; T)) + n``: the
clean frame ``J`` is warped by the tilt displacement ``T``, each pixel then
scatters its intensity through its own PSF, written in the low-rank basis
as ``mean + sum_k beta_k psi_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.ndimage import map_coordinates

from .covariance import ImagingGeometry
from .fields import CoefficientFields
from .psf import PsfBasis, phase_to_psf_batch, project_coeffs, pupil_basis

DEFAULT_BLOCK = 16


def tilt_constant(geom: ImagingGeometry) -> float:
    """Pixels of image shift per radian of Noll tilt coefficient.

    A tilt ``a_2 Z_2`` tilts the wavefront by ``2 a_2 lambda / (pi D)``
    radians; at focal length ``f`` and pitch ``p`` that is
    ``2 lambda F / (pi p)`` pixels per radian.
    """
    return 2.0 * geom.wavelength * geom.f_number / (math.pi * geom.pixel_pitch)


@dataclass(frozen=True)
class TiltField:
    """Per-pixel displacement ``(dx, dy)`` in pixels, shape ``(H, W, 2)``."""

    displacement: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=float)
        if d.ndim != 3 or d.shape[-1] != 2:
            raise ValueError(f"displacement must have shape (H, W, 2), got {d.shape}")
        object.__setattr__(self, "displacement", d)

    @property
    def mean_magnitude(self) -> float:
        return float(np.mean(np.hypot(self.displacement[..., 0], self.displacement[..., 1])))

    def scaled(self, factor: float) -> "TiltField":
        return TiltField(self.displacement * factor)


def tilt_from_coeffs(a2: np.ndarray, a3: np.ndarray, geom: ImagingGeometry | None = None,
                     c_tilt: float | None = None) -> TiltField:
    """Displacement ``c_tilt * (a_2, a_3)``; ``a_2`` moves along columns."""
    a2 = np.asarray(a2, dtype=float)
    a3 = np.asarray(a3, dtype=float)
    if a2.shape != a3.shape:
        raise ValueError("tilt fields must have equal shape")
    if c_tilt is None:
        if geom is None:
            raise ValueError("either geom or c_tilt is required")
        c_tilt = tilt_constant(geom)
    return TiltField(np.stack([c_tilt * a2, c_tilt * a3], axis=-1))


def _channels(image: np.ndarray):
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image[..., None], True
    if image.ndim == 3:
        return image, False
    raise ValueError(f"expected an (H, W) or (H, W, C) image, got {image.shape}")


def warp(image: np.ndarray, tilt: TiltField) -> np.ndarray:
    """Backward warp ``out(p) = J(p - d(p))``, bilinear, border clamped."""
    img, squeeze = _channels(image)
    h, w = img.shape[:2]
    if tilt.displacement.shape[:2] != (h, w):
        raise ValueError("tilt field and image differ in shape")
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    coords = np.stack([rows - tilt.displacement[..., 1], cols - tilt.displacement[..., 0]])
    out = np.stack([map_coordinates(img[..., c], coords, order=1, mode="nearest")
                    for c in range(img.shape[2])], axis=-1)
    return out[..., 0] if squeeze else out


def _check_beta(beta_maps: np.ndarray, shape: tuple[int, int], basis: PsfBasis) -> np.ndarray:
    beta_maps = np.asarray(beta_maps, dtype=float)
    if beta_maps.ndim == 1:
        beta_maps = np.broadcast_to(beta_maps, (*shape, beta_maps.size))
    if beta_maps.shape[:2] != shape:
        raise ValueError(f"beta maps {beta_maps.shape[:2]} do not match image {shape}")
    if beta_maps.shape[2] != basis.rank:
        raise ValueError(f"beta maps carry {beta_maps.shape[2]} coefficients, basis rank is {basis.rank}")
    return beta_maps


class _Convolver:
    """Linear convolution of reflect-padded images with the basis kernels."""

    def __init__(self, shape: tuple[int, int], basis: PsfBasis):
        self.shape = shape
        self.pad = basis.side // 2
        h, w = shape
        p = self.pad
        self.fshape = (sfft.next_fast_len(h + 4 * p, real=True),
                       sfft.next_fast_len(w + 4 * p, real=True))
        kernels = np.concatenate([basis.mean[None], basis.psi])
        self.spectra = sfft.rfft2(kernels, s=self.fshape)

    def padded(self, x: np.ndarray) -> np.ndarray:
        p = self.pad
        if p == 0:
            return x
        return np.pad(x, ((p, p), (p, p)), mode="reflect")

    def crop(self, full: np.ndarray) -> np.ndarray:
        h, w = self.shape
        o = 2 * self.pad
        return full[o:o + h, o:o + w]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return sfft.rfft2(x, s=self.fshape)

    def inverse(self, spec: np.ndarray) -> np.ndarray:
        return self.crop(sfft.irfft2(spec, s=self.fshape))


def scatter_blur(image: np.ndarray, beta_maps: np.ndarray, basis: PsfBasis,
                 convolver: _Convolver | None = None) -> np.ndarray:
    """Each source pixel spreads through its own PSF.

    ``O = mean * J + sum_k psi_k * (beta_k J)`` with reflection padding;
    spectra are accumulated so one inverse transform is needed per channel.

    Parameters
    ----------
    beta_maps : ndarray, shape (H, W, rank) or (rank,)
        Basis coefficients at every source pixel (a vector is shared).
    """
    img, squeeze = _channels(image)
    shape = img.shape[:2]
    beta_maps = _check_beta(beta_maps, shape, basis)
    conv = convolver or _Convolver(shape, basis)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        src = conv.padded(img[..., c])
        acc = conv.spectra[0] * conv.forward(src)
        for k in range(basis.rank):
            acc += conv.spectra[k + 1] * conv.forward(conv.padded(beta_maps[..., k]) * src)
        out[..., c] = conv.inverse(acc)
    return out[..., 0] if squeeze else out


def gather_blur(image: np.ndarray, beta_maps: np.ndarray, basis: PsfBasis,
                convolver: _Convolver | None = None) -> np.ndarray:
    """Each output pixel averages through the PSF at the output pixel:
    ``O = mean * J + sum_k beta_k (psi_k * J)``."""
    img, squeeze = _channels(image)
    shape = img.shape[:2]
    beta_maps = _check_beta(beta_maps, shape, basis)
    conv = convolver or _Convolver(shape, basis)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        spec = conv.forward(conv.padded(img[..., c]))
        res = conv.inverse(conv.spectra[0] * spec)
        for k in range(basis.rank):
            res += beta_maps[..., k] * conv.inverse(conv.spectra[k + 1] * spec)
        out[..., c] = res
    return out[..., 0] if squeeze else out


def block_centres(length: int, block: int) -> np.ndarray:
    n = max(1, math.ceil(length / block))
    return np.minimum((np.arange(n) + 0.5) * block - 0.5, length - 1.0)


def _interp_matrix(length: int, centres: np.ndarray) -> np.ndarray:
    # linear interpolation weights from block centres to every pixel, clamped
    x = np.arange(length, dtype=float)
    m = np.zeros((length, centres.size))
    if centres.size == 1:
        m[:, 0] = 1.0
        return m
    idx = np.clip(np.searchsorted(centres, x, side="right") - 1, 0, centres.size - 2)
    t = np.clip((x - centres[idx]) / (centres[idx + 1] - centres[idx]), 0.0, 1.0)
    m[np.arange(length), idx] = 1.0 - t
    m[np.arange(length), idx + 1] += t
    return m


def beta_maps_from_coeffs(coeffs: CoefficientFields, native: PsfBasis, block: int = DEFAULT_BLOCK,
                          pupil_grid: int | None = None) -> np.ndarray:
    """Project the PSF of every block centre onto ``native``; bilinear in between.

    ``block = 1`` computes a PSF for every pixel.
    """
    if block < 1:
        raise ValueError("block size must be >= 1")
    h, w = coeffs.shape
    rows = block_centres(h, block)
    cols = block_centres(w, block)
    ri = np.rint(rows).astype(int)
    ci = np.rint(cols).astype(int)
    a = coeffs.a[:, ri[:, None], ci[None, :]]  # (36, nr, nc)
    vecs = a.reshape(a.shape[0], -1).T
    basis = pupil_basis(pupil_grid) if pupil_grid else None
    psfs = phase_to_psf_batch(vecs, basis, native.side)
    beta = project_coeffs(psfs, native).reshape(rows.size, cols.size, native.rank)
    if block == 1:
        return beta
    my = _interp_matrix(h, rows.astype(float))
    mx = _interp_matrix(w, cols.astype(float))
    return np.einsum("yi,ijk,xj->yxk", my, beta, mx, optimize=True)


@dataclass(frozen=True)
class DegradedFrameSet:
    full: np.ndarray = field(repr=False)
    tilt_only: np.ndarray = field(repr=False)
    clean: np.ndarray = field(repr=False)
    beta_maps: np.ndarray = field(repr=False)
    tilt: TiltField = field(repr=False)


def degrade_frame(clean: np.ndarray, coeffs: CoefficientFields, native: PsfBasis, resized: PsfBasis,
                  geom: ImagingGeometry | None = None, noise_sigma: float = 0.0,
                  rng: np.random.Generator | None = None, block: int = DEFAULT_BLOCK,
                  c_tilt: float | None = None, value_range: tuple[float, float] | None = (0.0, 1.0),
                  convolver: _Convolver | None = None) -> DegradedFrameSet:
    """Warp, blur and add noise to one frame.

    Parameters
    ----------
    clean : ndarray, (H, W) or (H, W, C)
        Source frame.
    native, resized : PsfBasis
        Basis used for projection and its geometry-resized counterpart used
        for the convolution (they share ``beta``).
    noise_sigma : float
        Standard deviation of additive Gaussian noise.
    value_range : (float, float) or None
        Clamp applied to both outputs; ``None`` keeps the result linear.
    """
    clean = np.asarray(clean, dtype=float)
    if coeffs.shape != clean.shape[:2]:
        raise ValueError("coefficient fields and frame differ in shape")
    if noise_sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    tilt = tilt_from_coeffs(coeffs.a[1], coeffs.a[2], geom, c_tilt)
    tilt_only = warp(clean, tilt)
    beta = beta_maps_from_coeffs(coeffs, native, block)
    full = scatter_blur(tilt_only, beta, resized, convolver)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an explicit generator")
        full = full + rng.normal(0.0, noise_sigma, full.shape)
    if value_range is not None:
        lo, hi = value_range
        full = np.clip(full, lo, hi)
        tilt_only = np.clip(tilt_only, lo, hi)
    return DegradedFrameSet(full, tilt_only, clean, beta, tilt)
