"""Spatio-temporally correlated Zernike coefficient fields.

Each mode ``i`` gets a unit-variance stationary field ``v_i`` drawn by FFT
from its power spectrum.  Stacking the 36 fields and multiplying by the
Cholesky factor of the single-pixel covariance gives ``a = L v``.  Across
frames the complex white-noise seeds follow an AR(1) chain, so one
correlation ratio ``alpha`` controls how fast the turbulence evolves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import CovarianceField
from .zernike import MAX_MODES, deflated_cholesky

FIRST_MODE = 2  # piston never reaches the image


def stream_rng(master_seed: int, video_id: int, frame_index: int, mode: int) -> np.random.Generator:
    """Counter-based generator for one ``(video, frame, mode)`` stream."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(video_id), int(frame_index), int(mode)))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class SeedField:
    """Complex white noise with i.i.d. standard normal real and imaginary parts."""

    values: np.ndarray = field(repr=False)
    frame_index: int = 0
    stream_id: tuple = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def white_seed(shape: tuple[int, int], rng: np.random.Generator, frame_index: int = 0,
               stream_id: tuple = ()) -> SeedField:
    draws = rng.standard_normal((2, *shape))
    return SeedField(draws[0] + 1j * draws[1], frame_index, stream_id)


def sample_field(psd: np.ndarray, seed: SeedField | np.ndarray) -> np.ndarray:
    """Real stationary field with spectrum ``psd``.

    The field is ``sqrt(N) * Re(ifft2(sqrt(psd) * n))``; its variance is
    ``psd.sum() / N``, the zero-lag value of the inverse transform.
    """
    noise = seed.values if isinstance(seed, SeedField) else np.asarray(seed)
    psd = np.asarray(psd, dtype=float)
    if psd.shape != noise.shape:
        raise ValueError(f"PSD shape {psd.shape} does not match seed shape {noise.shape}")
    if np.any(psd < 0):
        raise ValueError("PSD must be non-negative")
    return np.sqrt(psd.size) * np.fft.ifft2(np.sqrt(psd) * noise).real


@dataclass(frozen=True)
class CoefficientFields:
    """Zernike coefficient fields ``a[i - 1]`` in radians, shape ``(36, H, W)``."""

    a: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape[1:]

    @property
    def tilt(self) -> np.ndarray:
        """Modes 2 and 3."""
        return self.a[1:3]

    @property
    def high_order(self) -> np.ndarray:
        """Modes 4 to 36."""
        return self.a[3:]


def mix_modes(fields: np.ndarray, cholesky: np.ndarray) -> CoefficientFields:
    """Correlate unit-variance mode fields across modes: ``a = L v``."""
    fields = np.asarray(fields, dtype=float)
    cholesky = np.asarray(cholesky, dtype=float)
    if fields.ndim != 3 or fields.shape[0] != MAX_MODES:
        raise ValueError(f"expected fields of shape (36, H, W), got {fields.shape}")
    if cholesky.shape != (MAX_MODES, MAX_MODES):
        raise ValueError(f"expected a 36x36 factor, got {cholesky.shape}")
    h, w = fields.shape[1:]
    mixed = (cholesky @ fields.reshape(MAX_MODES, -1)).reshape(MAX_MODES, h, w)
    return CoefficientFields(mixed)


class TemporalChain:
    """AR(1) chain of complex seeds: ``n_t = alpha n_{t-1} + sqrt(1 - alpha^2) eps_t``.

    Innovations are drawn from ``stream_rng(master_seed, video_id, t, mode)``
    so frame ``t`` is reproducible from the key alone.
    """

    def __init__(self, alpha: float, shape: tuple[int, int], master_seed: int = 0,
                 video_id: int = 0, mode: int = 0):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
        self.alpha = float(alpha)
        self.shape = tuple(shape)
        self.key = (int(master_seed), int(video_id), int(mode))
        self.frame = 0
        self.current = self._innovation(0)

    def _innovation(self, frame: int) -> SeedField:
        master, video, mode = self.key
        return white_seed(self.shape, stream_rng(master, video, frame, mode), frame,
                          (video, frame, mode))

    @property
    def innovation_scale(self) -> float:
        return float(np.sqrt(1.0 - self.alpha * self.alpha))


def advance_temporal(chain: TemporalChain) -> SeedField:
    """Step ``chain`` one frame and return the new seed."""
    frame = chain.frame + 1
    if chain.alpha == 1.0:
        values = chain.current.values
    else:
        eps = chain._innovation(frame).values
        values = chain.alpha * chain.current.values + chain.innovation_scale * eps
    chain.current = SeedField(values, frame, (chain.key[1], frame, chain.key[2]))
    chain.frame = frame
    return chain.current


class FieldSequence:
    """Frame-by-frame coefficient fields for one video.

    Parameters
    ----------
    covariance : CovarianceField
        Spatial statistics for the geometry; its grid may be padded, in
        which case fields are cropped to the image size.
    alpha : float
        Temporal correlation ratio.
    master_seed, video_id : int
        Stream key.
    cholesky : ndarray, optional
        Cross-mode factor; defaults to the factor of the covariance's
        single-pixel matrix.
    """

    def __init__(self, covariance: CovarianceField, alpha: float, master_seed: int = 0,
                 video_id: int = 0, cholesky: np.ndarray | None = None):
        self.covariance = covariance
        self.image_size = covariance.geometry.image_size
        if cholesky is None:
            cholesky = deflated_cholesky(covariance.zero_lag_matrix())
        self.cholesky = np.asarray(cholesky, dtype=float)
        self._unit = {i: covariance.unit_psd(i) for i in range(FIRST_MODE, MAX_MODES + 1)}
        self.chains = {
            i: TemporalChain(alpha, covariance.shape, master_seed, video_id, i)
            for i in range(FIRST_MODE, MAX_MODES + 1)
        }
        self.frame = 0
        self._started = False

    def unit_fields(self) -> np.ndarray:
        """Unit-variance mode fields ``v`` of the current frame, before mixing."""
        h, w = self.image_size
        out = np.zeros((MAX_MODES, h, w))
        for i, chain in self.chains.items():
            out[i - 1] = sample_field(self._unit[i], chain.current)[:h, :w]
        return out

    def next(self) -> CoefficientFields:
        """Coefficient fields of the next frame (frame 0 on the first call)."""
        if self._started:
            for chain in self.chains.values():
                advance_temporal(chain)
            self.frame += 1
        self._started = True
        return mix_modes(self.unit_fields(), self.cholesky)

    def take(self, count: int) -> list[CoefficientFields]:
        return [self.next() for _ in range(count)]
