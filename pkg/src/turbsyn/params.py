"""Turbulence and camera parameter sampling, kernel sizing and strength labels.

Parameter ranges live in ``data/param_ranges.json``: each modality has a
list of rows, a row is picked uniformly, then continuous fields are drawn
uniformly from their interval and the F-number uniformly from its set.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Mapping

import numpy as np

from .covariance import CnProfile, ImagingGeometry, fried_parameter
from .fields import CoefficientFields
from .psf import NATIVE_SIDE, measure_fwhm, phase_to_psf, resized_side, strength_scale
from .psf import diffraction_fwhm as _diffraction_fwhm
from .degrade import TiltField, tilt_constant
from .zernike import noll_covariance

MODALITIES = ("dynamic", "static")
DEFAULT_IMAGE_SIZE = (256, 256)
BLUR_FIRST_MODE = 3


@lru_cache(maxsize=1)
def parameter_table() -> dict:
    text = (resources.files("turbsyn") / "data" / "param_ranges.json").read_text()
    return json.loads(text)


def table_rows(modality: str) -> list[dict]:
    table = parameter_table()["modalities"]
    if modality not in table:
        raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    return table[modality]["rows"]


def alpha_range(modality: str) -> tuple[float, float]:
    table_rows(modality)
    lo, hi = parameter_table()["modalities"][modality]["temporal_alpha"]
    return float(lo), float(hi)


@lru_cache(maxsize=1)
def native_fwhm() -> float:
    """Diffraction FWHM of the native 67-pixel kernels, in kernel pixels."""
    return measure_fwhm(phase_to_psf(np.zeros(36)).kernel)


class StrengthLabel(enum.Enum):
    WEAK = "Weak"
    MEDIUM = "Medium"
    STRONG = "Strong"

    def __str__(self) -> str:
        return self.value


def classify_strength(k_b: int, d_over_r0: float, d_bar: float) -> StrengthLabel:
    """Strength label from kernel size, ``D/r0`` and mean tilt ``d_bar``.

    ============================  ============  ================  ==========
    kernel / ``D/r0``             Weak          Medium            Strong
    ============================  ============  ================  ==========
    ``k_b <= 17``, or 19-29 <2    ``< 0.5``     ``0.5 .. 1``      ``> 1``
    19-29 with 2..8               ``< 0.2``     ``0.2 .. 0.4``    ``> 0.4``
    19-29 with > 8, or ``>= 31``  never         ``<= 0.2``        ``> 0.2``
    ============================  ============  ================  ==========
    """
    k_b = int(k_b)
    if k_b < 1 or k_b % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {k_b}")
    if d_bar < 0 or d_over_r0 < 0:
        raise ValueError("d_bar and D/r0 must be non-negative")
    if k_b <= 17 or (k_b <= 29 and d_over_r0 < 2):
        weak, strong = 0.5, 1.0
    elif k_b <= 29 and d_over_r0 <= 8:
        weak, strong = 0.2, 0.4
    else:
        return StrengthLabel.STRONG if d_bar > 0.2 else StrengthLabel.MEDIUM
    if d_bar < weak:
        return StrengthLabel.WEAK
    if d_bar <= strong:
        return StrengthLabel.MEDIUM
    return StrengthLabel.STRONG


def select_kernel_size(geom: ImagingGeometry, d_over_r0: float = 0.0,
                       scale_with_strength: bool = False, native_side: int = NATIVE_SIDE,
                       native: float | None = None) -> int:
    """Odd side ``k_b`` of the resized blur kernels for ``geom``."""
    native = native_fwhm() if native is None else native
    factor = _diffraction_fwhm(geom) / native
    if scale_with_strength:
        factor *= strength_scale(d_over_r0)
    return resized_side(native_side, factor)


def blur_score(coeffs: CoefficientFields | np.ndarray, k_b: int, first_mode: int = BLUR_FIRST_MODE) -> float:
    """``k_b`` times the mean over pixels of ``sqrt(sum_i a_i^2)``, ``i >= first_mode``."""
    a = coeffs.a if isinstance(coeffs, CoefficientFields) else np.asarray(coeffs, dtype=float)
    if first_mode not in (3, 4):
        raise ValueError("first_mode must be 3 or 4")
    return float(k_b * np.mean(np.sqrt(np.sum(a[first_mode - 1:] ** 2, axis=0))))


def tilt_score(tilt: TiltField) -> float:
    """Mean displacement magnitude in pixels."""
    return tilt.mean_magnitude


@dataclass(frozen=True)
class TurbulenceParams:
    """One sampled set of physical, camera and temporal parameters.

    ``cn2`` is in m^(-2/3); derived quantities assume a constant profile.
    """

    modality: str
    row: int
    distance: float
    focal_length: float
    f_number: float
    scene_width: float
    cn2: float
    temporal_alpha: float
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    wavelength: float = 525e-9
    k0_scaled: float = 1e-3
    segments: int = 100
    scale_with_strength: bool = False

    def geometry(self) -> ImagingGeometry:
        return ImagingGeometry(self.distance, self.focal_length, self.f_number, self.scene_width,
                               tuple(self.image_size), self.wavelength, self.k0_scaled)

    def profile(self) -> CnProfile:
        return CnProfile.constant(self.distance, self.cn2, self.segments)

    @property
    def r0(self) -> float:
        return fried_parameter(self.profile(), self.geometry())

    @property
    def d_over_r0(self) -> float:
        return self.geometry().aperture_diameter / self.r0

    @property
    def kernel_size(self) -> int:
        return select_kernel_size(self.geometry(), self.d_over_r0, self.scale_with_strength)

    @property
    def c_tilt(self) -> float:
        return tilt_constant(self.geometry())

    @property
    def expected_d_bar(self) -> float:
        """Mean tilt magnitude in pixels for isotropic Gaussian tilt.

        Each axis has standard deviation ``c_tilt * sqrt(R_22 (D/r0)^(5/3))``;
        the mean of a 2D isotropic Gaussian's magnitude is ``sigma sqrt(pi/2)``.
        """
        r22 = _tilt_variance(self.k0_scaled)
        sigma = self.c_tilt * math.sqrt(r22 * self.d_over_r0 ** (5.0 / 3.0))
        return sigma * math.sqrt(math.pi / 2.0)

    @property
    def strength(self) -> StrengthLabel:
        return classify_strength(self.kernel_size, self.d_over_r0, self.expected_d_bar)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["image_size"] = list(self.image_size)
        return out

    def derived(self) -> dict:
        return {"r0": self.r0, "d_over_r0": self.d_over_r0, "kernel_size": self.kernel_size,
                "c_tilt": self.c_tilt, "expected_d_bar": self.expected_d_bar,
                "strength": str(self.strength)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "TurbulenceParams":
        data = dict(data)
        data["image_size"] = tuple(data.get("image_size", DEFAULT_IMAGE_SIZE))
        return cls(**data)


@lru_cache(maxsize=4)
def _tilt_variance(k0_scaled: float) -> float:
    return float(noll_covariance(k0_scaled=k0_scaled).matrix[1, 1])


def row_contains(params: TurbulenceParams) -> bool:
    """Whether ``params`` lies within its table row and alpha range."""
    row = table_rows(params.modality)[params.row]
    cn2 = params.cn2 / parameter_table()["cn2_scale"]
    checks = [
        row["distance"][0] <= params.distance <= row["distance"][1],
        row["focal_length"][0] <= params.focal_length <= row["focal_length"][1],
        row["scene_width"][0] <= params.scene_width <= row["scene_width"][1],
        row["cn2"][0] * (1 - 1e-12) <= cn2 <= row["cn2"][1] * (1 + 1e-12),
        params.f_number in row["f_number"],
    ]
    lo, hi = alpha_range(params.modality)
    checks.append(lo <= params.temporal_alpha <= hi)
    return all(checks)


def sample_params(modality: str, rng: np.random.Generator, image_size=DEFAULT_IMAGE_SIZE,
                  **overrides) -> TurbulenceParams:
    """Draw one parameter set: a uniform row, then uniform values within it."""
    rows = table_rows(modality)
    index = int(rng.integers(len(rows)))
    row = rows[index]
    draw = {name: float(rng.uniform(*row[name]))
            for name in ("distance", "focal_length", "scene_width", "cn2")}
    f_number = float(row["f_number"][int(rng.integers(len(row["f_number"])))])
    alpha = float(rng.uniform(*alpha_range(modality)))
    values = dict(
        modality=modality, row=index, distance=draw["distance"], focal_length=draw["focal_length"],
        f_number=f_number, scene_width=draw["scene_width"],
        cn2=draw["cn2"] * parameter_table()["cn2_scale"], temporal_alpha=alpha,
        image_size=tuple(int(v) for v in image_size),
    )
    values.update(overrides)
    return TurbulenceParams(**values)


class QuotaExhausted(RuntimeError):
    """Raised when rejection sampling cannot fill the requested quotas."""

    def __init__(self, message: str, accepted: list):
        super().__init__(message)
        self.accepted = accepted


def fill_quotas(quotas: Mapping[StrengthLabel, int], draw: Callable[[], TurbulenceParams],
                max_attempts: int = 100_000,
                label_of: Callable[[TurbulenceParams], StrengthLabel] | None = None,
                ) -> list[tuple[TurbulenceParams, StrengthLabel]]:
    """Draw until every strength bucket holds its quota; surplus draws are dropped.

    Raises
    ------
    QuotaExhausted
        After ``max_attempts`` draws, carrying what was accepted.
    """
    label_of = label_of or (lambda p: p.strength)
    remaining = {StrengthLabel(k) if not isinstance(k, StrengthLabel) else k: int(v)
                 for k, v in quotas.items()}
    if any(v < 0 for v in remaining.values()):
        raise ValueError("quotas must be non-negative")
    accepted: list[tuple[TurbulenceParams, StrengthLabel]] = []
    attempts = 0
    while any(v > 0 for v in remaining.values()):
        if attempts >= max_attempts:
            missing = {str(k): v for k, v in remaining.items() if v > 0}
            raise QuotaExhausted(f"quotas not filled after {max_attempts} draws; missing {missing}",
                                 accepted)
        attempts += 1
        params = draw()
        label = label_of(params)
        if remaining.get(label, 0) > 0:
            remaining[label] -= 1
            accepted.append((params, label))
    return accepted
