"""Compare the path-integrated zero-lag covariance with the single-aperture one.

For a constant turbulence profile the coefficient covariance at one pixel
should be the Noll matrix scaled by ``(D/r0)^(5/3)``.  The script prints
both diagonals for the first ten modes, their relative Frobenius distance,
and how fast the correlation of tilt and defocus decays with pixel lag.
"""

import numpy as np

from turbsyn.covariance import CnProfile, ImagingGeometry, build_covariance_field, fried_parameter
from turbsyn.zernike import noll_covariance

geom = ImagingGeometry(600.0, 0.5, 11.0, 0.5, (128, 128))
profile = CnProfile.constant(600.0, 5e-14, 100)
d_over_r0 = geom.aperture_diameter / fried_parameter(profile, geom)
# for constant Cn2 the spherical-wave path weight integrates to 3 L / 8
r0_closed = (0.423 * geom.wavenumber ** 2 * 5e-14 * 3 * 600.0 / 8) ** (-3 / 5)
print(f"D/r0 = {d_over_r0:.6f} from 100 segments, {geom.aperture_diameter / r0_closed:.6f} in closed form")
d_over_r0 = geom.aperture_diameter / r0_closed
field = build_covariance_field(geom, profile, pad=1)

path = field.zero_lag_matrix()
single = noll_covariance().matrix * d_over_r0 ** (5.0 / 3.0)
print("mode  path-integrated  single aperture")
for j in range(2, 12):
    print(f"{j:4d}  {path[j - 1, j - 1]:15.6f}  {single[j - 1, j - 1]:15.6f}")
err = np.linalg.norm(path[1:, 1:] - single[1:, 1:]) / np.linalg.norm(single[1:, 1:])
print(f"relative Frobenius distance {err:.2e}")

print("\nlag  corr(a2)  corr(a4)")
for lag in (0, 1, 2, 4, 8, 16, 32):
    c2 = field.maps[1, 0, lag] / field.maps[1, 0, 0]
    c4 = field.maps[3, 0, lag] / field.maps[3, 0, 0]
    print(f"{lag:3d}  {c2:8.4f}  {c4:8.4f}")
