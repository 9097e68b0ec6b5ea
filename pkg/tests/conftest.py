import os
import tempfile
from pathlib import Path

import numpy as np
import pytest

# one throwaway cache per session; shipped tables still serve Bessel lookups
_CACHE = tempfile.mkdtemp(prefix="turbsyn-test-cache-")
os.environ["TURBSYN_CACHE"] = _CACHE

from turbsyn.covariance import CnProfile, ImagingGeometry, build_covariance_field  # noqa: E402
from turbsyn.psf import default_basis  # noqa: E402

# reference geometry: 600 m path, 500 mm F/11 lens, 0.5 m scene on 128 px
REF = dict(path_length=600.0, focal_length=0.5, f_number=11.0, scene_width=0.5, image_size=(128, 128))
REF_CN2 = 5e-14


@pytest.fixture(scope="session")
def cache_dir() -> Path:
    return Path(_CACHE)


@pytest.fixture(scope="session")
def ref_geometry() -> ImagingGeometry:
    return ImagingGeometry(**REF)


@pytest.fixture(scope="session")
def ref_profile() -> CnProfile:
    return CnProfile.constant(REF["path_length"], REF_CN2, 100)


@pytest.fixture(scope="session")
def ref_field(ref_geometry, ref_profile):
    return build_covariance_field(ref_geometry, ref_profile, pad=1)


@pytest.fixture(scope="session")
def basis():
    return default_basis()


@pytest.fixture(scope="session")
def camera():
    from skimage import data
    return data.camera().astype(float) / 255.0


@pytest.fixture(scope="session")
def natural_128(camera):
    return np.ascontiguousarray(camera[160:416:2, 160:416:2])


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
