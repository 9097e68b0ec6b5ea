"""Physics-grounded synthesis of atmospheric turbulence degradation.

Zernike phase statistics along the optical path give spatially and
temporally correlated coefficient fields; a low-rank PSF basis turns them
into per-pixel blur and tilt applied to clean frames.
"""

__version__ = "0.1.0"

from .covariance import (BesselTableStore, CnProfile, CovarianceField, ImagingGeometry,
                         bessel_triple_integral, build_covariance_field, fried_parameter,
                         path_covariance, takato_kernel)
from .degrade import TiltField, degrade_frame, gather_blur, scatter_blur, warp
from .fields import CoefficientFields, FieldSequence, sample_field
from .params import StrengthLabel, TurbulenceParams, classify_strength, sample_params
from .psf import PsfBasis, default_basis, fit_basis, phase_to_psf, resize_basis
from .zernike import NollCovariance, noll_covariance, noll_to_nm, zernike

__all__ = [name for name in dir() if not name.startswith("_")]
