"""Spatial correlation of Zernike coefficients between two lines of sight.

The correlation of modes ``i`` and ``j`` seen through a thin turbulent layer
is written in terms of triple-Bessel integrals

    I_{a,b,c}(t, k0) = int_0^inf J_a(t x) J_b(x) J_c(x) / (x (x^2 + k0^2)^(11/6)) dx

with ``t = d / R`` the separation of the two apertures in units of the
aperture radius at the layer.  Integrating layer by layer along the path
gives the covariance between coefficient fields at two image pixels.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import jv

from .zernike import COVARIANCE_PREFACTOR, FRIED_CONSTANT, MAX_MODES, noll_to_nm

log = logging.getLogger(__name__)

K0_MIN = 1e-8
DEFAULT_K0 = 1e-3
DEFAULT_RTOL = 1e-8
DEFAULT_SEGMENTS = 100
DEFAULT_WAVELENGTH = 525e-9

_GL_COARSE = np.polynomial.legendre.leggauss(12)
_GL_FINE = np.polynomial.legendre.leggauss(20)
_MAX_LEVELS = 6
_MAX_TAIL_DOUBLINGS = 16
# absolute floor relative to the integral of |integrand|; cancellation below
# this level is not resolvable in double precision
_L1_FLOOR = 1e-12


class QuadratureError(ArithmeticError):
    """Raised when the Bessel integral fails to converge.

    Attributes
    ----------
    partial_sum : float
        Best estimate reached before giving up.
    bound : float
        Magnitude of the unresolved error estimate.
    """

    def __init__(self, message: str, partial_sum: float, bound: float):
        super().__init__(f"{message} (partial sum {partial_sum:.6e}, error bound {bound:.3e})")
        self.partial_sum = partial_sum
        self.bound = bound


# ---------------------------------------------------------------------------
# triple-Bessel quadrature


def _panel_width(t: float, panel_scale: float) -> float:
    # half a period of J_a(t x) at the top of t's octave, so every t in one
    # octave shares a panel layout
    if t <= math.pi:
        width = 1.0
    else:
        width = math.pi / 2.0 ** math.ceil(math.log2(t))
    return width / panel_scale


def _segment_edges(lo: float, hi: float, width: float, k0: float) -> np.ndarray:
    if lo > 0.0:
        n = max(1, math.ceil((hi - lo) / width - 1e-12))
        return np.linspace(lo, hi, n + 1)
    # geometric panels resolve the k0 knee near the origin
    x_lo = 1e-2 * min(k0, 1.0)
    knots = [0.0, x_lo]
    while knots[-1] < 1.0:
        knots.append(min(2.0 * knots[-1], 1.0))
    if hi > 1.0:
        knots.append(hi)
    pieces = [np.zeros(1)]
    for a, b in zip(knots[:-1], knots[1:]):
        n = max(1, math.ceil((b - a) / width - 1e-12))
        pieces.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(pieces)


class _Envelope:
    """``J_b(x) J_c(x) / (x (x^2+k0^2)^(11/6))`` on the quadrature nodes of
    one panel layout, shared across every ``t`` that uses the layout."""

    def __init__(self, b: int, c: int, k0: float, width: float, x0: float):
        self.b, self.c, self.k0 = b, c, k0
        self.width = width
        self.x0 = x0
        self._cache: dict[tuple[int, int], tuple] = {}

    def bounds(self, seg: int) -> tuple[float, float]:
        if seg == 0:
            return 0.0, self.x0
        return self.x0 * 2.0 ** (seg - 1), self.x0 * 2.0 ** seg

    def nodes(self, seg: int, level: int):
        key = (seg, level)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        lo, hi = self.bounds(seg)
        edges = _segment_edges(lo, hi, self.width / 2.0 ** level, self.k0)
        left = edges[:-1, None]
        half = (edges[1:, None] - left) / 2.0
        out = []
        for gx, gw in (_GL_COARSE, _GL_FINE):
            x = (left + half * (gx + 1.0)).ravel()
            w = (half * gw).ravel()
            env = jv(self.b, x) * jv(self.c, x) / (x * (x * x + self.k0 * self.k0) ** (11.0 / 6.0))
            out.append((x, w * env))
        hit = (len(edges) - 1, out[0], out[1])
        self._cache[key] = hit
        return hit


def _integrate(a: int, t: float, env: _Envelope, rtol: float, max_panels: int,
               scale: float = 0.0) -> float:
    total = 0.0
    l1_total = 0.0
    seg = 0
    while True:
        level = 0
        while True:
            panels, (xc, wc), (xf, wf) = env.nodes(seg, level)
            if panels > max_panels:
                raise QuadratureError(
                    f"I_{{{a},{env.b},{env.c}}}({t:g}) needs more than {max_panels} panels",
                    total, abs(total) * rtol,
                )
            if a == 0 and t == 0.0:
                coarse = float(np.sum(wc))
                fine_terms = wf
            else:
                coarse = float(np.dot(jv(a, t * xc), wc))
                fine_terms = jv(a, t * xf) * wf
            fine = float(np.sum(fine_terms))
            l1 = float(np.sum(np.abs(fine_terms)))
            tol = rtol * max(abs(total + fine), scale) + _L1_FLOOR * (l1_total + l1)
            if abs(fine - coarse) <= 0.1 * tol:
                break
            level += 1
            if level > _MAX_LEVELS:
                raise QuadratureError(
                    f"I_{{{a},{env.b},{env.c}}}({t:g}) did not converge on [{env.bounds(seg)[0]:g}, "
                    f"{env.bounds(seg)[1]:g}]",
                    total + fine, abs(fine - coarse),
                )
        total += fine
        l1_total += l1
        if seg >= 1:
            tol = rtol * max(abs(total), scale) + _L1_FLOOR * l1_total
            lo = env.bounds(seg)[0]
            # the oscillation of J_a(t x) cancels the tail beyond x ~ 1/t
            damping = min(1.0, 4.0 / (t * lo)) if t > 0 else 1.0
            if abs(fine) <= 0.1 * tol and l1 * damping <= tol:
                return total
        seg += 1
        if seg > _MAX_TAIL_DOUBLINGS:
            raise QuadratureError(
                f"I_{{{a},{env.b},{env.c}}}({t:g}) tail did not decay", total, l1
            )


def _check_orders(a: int, b: int, c: int, k0_scaled: float) -> None:
    if min(a, b, c) < 0:
        raise ValueError("Bessel orders must be non-negative")
    if a + b + c == 0:
        raise ValueError("I_{0,0,0} diverges at the origin")
    if not k0_scaled > 0:
        raise ValueError(f"k0_scaled must be positive, got {k0_scaled!r}")


def _start_x(b: int, c: int) -> float:
    return float(max(b, c, 1) + 8)


@lru_cache(maxsize=None)
def _reference_scale(b: int, c: int, k0: float, rtol: float) -> float:
    # |I_{a,b,c}(t)| <= sqrt(I_{0,b,b}(0) I_{0,c,c}(0)); accuracy is measured
    # against this bound so fully cancelled values do not stall the quadrature
    if b == 0 or c == 0:
        return 0.0
    vals = []
    for n in (b, c):
        env = _Envelope(n, n, k0, _panel_width(0.0, 1.0), _start_x(n, n))
        vals.append(_integrate(0, 0.0, env, rtol, 2_000_000))
    return math.sqrt(vals[0] * vals[1])


@lru_cache(maxsize=4096)
def bessel_triple_integral(
    a: int,
    b: int,
    c: int,
    s: float,
    k0_scaled: float = DEFAULT_K0,
    rtol: float = DEFAULT_RTOL,
    panel_scale: float = 1.0,
    max_panels: int = 2_000_000,
) -> float:
    """Evaluate ``int J_a(s x) J_b(x) J_c(x) / (x (x^2 + k0^2)^(11/6)) dx``.

    Gauss-Legendre panels of half the ``J_a(s x)`` period are refined until a
    12-point and a 20-point rule agree; the upper limit doubles until the last
    stretch adds less than a tenth of the tolerance.  The tolerance is
    ``rtol`` times the larger of the result and the Cauchy-Schwarz bound
    ``sqrt(I_{0,b,b}(0) I_{0,c,c}(0))``.

    Parameters
    ----------
    a, b, c : int
        Bessel orders.
    s : float
        Scale of the first Bessel argument, ``s >= 0``.
    k0_scaled : float
        Dimensionless outer-scale parameter; must be positive.
    rtol : float
        Relative tolerance.
    panel_scale : float
        Panel refinement factor (2 halves every panel width).
    max_panels : int
        Panel budget per integration stretch.

    Raises
    ------
    QuadratureError
        If the panel budget or the refinement depth is exhausted.
    """
    a, b, c = int(a), int(b), int(c)
    _check_orders(a, b, c, k0_scaled)
    s = float(s)
    if s < 0:
        raise ValueError("s must be non-negative")
    if a > 0 and s == 0.0:
        return 0.0
    env = _Envelope(b, c, float(k0_scaled), _panel_width(s, panel_scale), _start_x(b, c))
    scale = _reference_scale(b, c, float(k0_scaled), rtol)
    return _integrate(a, s, env, rtol, max_panels, scale)


def bessel_triple_integral_many(
    a: int, b: int, c: int, s_values: Iterable[float], k0_scaled: float = DEFAULT_K0,
    rtol: float = DEFAULT_RTOL, panel_scale: float = 1.0, max_panels: int = 2_000_000,
) -> np.ndarray:
    """Vectorised :func:`bessel_triple_integral`; identical values, shared envelopes."""
    a, b, c = int(a), int(b), int(c)
    _check_orders(a, b, c, k0_scaled)
    s_values = np.asarray(list(s_values), dtype=float)
    out = np.zeros(s_values.shape)
    envelopes: dict[float, _Envelope] = {}
    scale = _reference_scale(b, c, float(k0_scaled), rtol)
    for idx in np.argsort(s_values, kind="stable"):
        s = float(s_values[idx])
        if s < 0:
            raise ValueError("s must be non-negative")
        if a > 0 and s == 0.0:
            continue
        width = _panel_width(s, panel_scale)
        env = envelopes.get(width)
        if env is None:
            envelopes.clear()  # s is sorted, older octaves are never revisited
            env = envelopes[width] = _Envelope(b, c, float(k0_scaled), width, _start_x(b, c))
        out[idx] = _integrate(a, s, env, rtol, max_panels, scale)
    return out


# ---------------------------------------------------------------------------
# tabulated integrals

TABLE_VERSION = 1
TABLE_T_MIN = 1e-3
TABLE_T_MAX = 1024.0
TABLE_PER_DECADE = 24


@dataclass(frozen=True)
class BesselTable:
    """Spline of ``I_{a,b,c}(t)`` over ``t`` in ``[0, t_max]`` with power-law
    continuations outside the tabulated range."""

    orders: tuple[int, int, int]
    k0_scaled: float
    t: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        logt = np.log(self.t[1:])
        object.__setattr__(self, "_spline", CubicSpline(logt, self.values[1:]))
        v1, v2 = self.values[-2], self.values[-1]
        if v1 != 0 and v2 != 0 and np.sign(v1) == np.sign(v2):
            slope = math.log(v2 / v1) / (logt[-1] - logt[-2])
        else:
            slope = -1.0
        object.__setattr__(self, "_tail_slope", min(slope, -1.0))

    @property
    def t_min(self) -> float:
        return float(self.t[1])

    @property
    def t_max(self) -> float:
        return float(self.t[-1])

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.empty(t.shape)
        lo = t < self.t_min
        hi = t > self.t_max
        mid = ~(lo | hi)
        out[mid] = self._spline(np.log(t[mid]))
        a = self.orders[0]
        v0, v1 = self.values[0], self.values[1]
        ratio = t[lo] / self.t_min
        if a == 0:
            out[lo] = v0 + (v1 - v0) * ratio ** 2
        else:
            out[lo] = v1 * ratio ** a
        out[hi] = self.values[-1] * (t[hi] / self.t_max) ** self._tail_slope
        return out


def table_nodes(t_max: float = TABLE_T_MAX, per_decade: int = TABLE_PER_DECADE) -> np.ndarray:
    decades = math.log10(t_max / TABLE_T_MIN)
    n = int(math.ceil(decades * per_decade)) + 1
    return np.concatenate([[0.0], np.logspace(math.log10(TABLE_T_MIN), math.log10(t_max), n)])


def default_cache_dir() -> Path:
    env = os.environ.get("TURBSYN_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "turbsyn"


def shipped_table_dir() -> Path:
    """Read-only tables installed with the package for the default settings."""
    return Path(str(resources.files("turbsyn") / "data" / "bessel"))


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class BesselTableStore:
    """Lazily built, disk-backed :class:`BesselTable` collection for one ``k0``.

    Tables do not depend on the imaging geometry, so one store serves every
    geometry that shares ``k0_scaled`` and the quadrature settings.
    """

    def __init__(self, k0_scaled: float = DEFAULT_K0, cache_dir: str | Path | None = None,
                 rtol: float = DEFAULT_RTOL, t_max: float = TABLE_T_MAX,
                 per_decade: int = TABLE_PER_DECADE, persist: bool = True,
                 use_shipped: bool = True):
        if not k0_scaled >= K0_MIN:
            raise ValueError(f"k0_scaled must be >= {K0_MIN}, got {k0_scaled!r}")
        self.k0_scaled = float(k0_scaled)
        self.rtol = float(rtol)
        self.t_max = float(t_max)
        self.per_decade = int(per_decade)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.persist = persist
        self.use_shipped = use_shipped
        self._tables: dict[tuple[int, int, int], BesselTable] = {}

    def settings(self) -> dict:
        return {"k0_scaled": self.k0_scaled, "rtol": self.rtol, "t_max": self.t_max,
                "per_decade": self.per_decade, "version": TABLE_VERSION}

    def _name(self, orders: tuple[int, int, int]) -> str:
        key = json.dumps({**self.settings(), "orders": orders}, sort_keys=True)
        digest = hashlib.sha256(key.encode()).hexdigest()[:20]
        a, b, c = orders
        return f"I_{a}_{b}_{c}_{digest}.npy"

    def _path(self, orders: tuple[int, int, int]) -> Path:
        return self.cache_dir / "bessel" / self._name(orders)

    def _candidates(self, orders: tuple[int, int, int]) -> list[Path]:
        paths = [self._path(orders)] if self.persist else []
        if self.use_shipped:
            paths.append(shipped_table_dir() / self._name(orders))
        return paths

    def table(self, a: int, b: int, c: int) -> BesselTable:
        # I_{a,b,c} is symmetric in (b, c)
        orders = (int(a), *sorted((int(b), int(c))))
        hit = self._tables.get(orders)
        if hit is not None:
            return hit
        t = table_nodes(self.t_max, self.per_decade)
        values = None
        path = self._path(orders)
        for candidate in self._candidates(orders):
            if not candidate.exists():
                continue
            try:
                stored = np.load(candidate, allow_pickle=False)
            except (OSError, ValueError):
                log.warning("ignoring unreadable Bessel table %s", candidate)
                continue
            if stored.shape == t.shape:
                values = stored
                break
        if values is None:
            log.info("tabulating I_{%d,%d,%d} at k0=%g", *orders, self.k0_scaled)
            values = bessel_triple_integral_many(*orders, t, self.k0_scaled, self.rtol)
            if self.persist:
                buf = io.BytesIO()
                np.save(buf, values, allow_pickle=False)
                _atomic_write(path, buf.getvalue())
        table = BesselTable(orders, self.k0_scaled, t, values)
        self._tables[orders] = table
        return table


# ---------------------------------------------------------------------------
# correlation kernel for a single layer


@dataclass(frozen=True)
class _KernelTerm:
    orders: tuple[int, int, int]
    sign: int
    angular: Callable[[np.ndarray], np.ndarray]


def kernel_case(i: int, j: int) -> int:
    """Angular case of the mode pair.

    ====  =====================================
    case  modes
    ====  =====================================
    1     both ``m != 0`` with the same parity
    2     both ``m != 0``, one cosine, one sine
    3     one ``m == 0``, the other a cosine
    4     one ``m == 0``, the other a sine
    5     both ``m == 0``
    ====  =====================================
    """
    p, q = noll_to_nm(i), noll_to_nm(j)
    if p.m == 0 and q.m == 0:
        return 5
    if p.m == 0 or q.m == 0:
        return 3 if (p.parity or q.parity) == "cos" else 4
    return 1 if p.parity == q.parity else 2


@lru_cache(maxsize=None)
def kernel_terms(i: int, j: int) -> tuple[_KernelTerm, ...]:
    """Bessel terms of the correlation kernel for modes ``i`` and ``j``.

    ``f_ij(s, phi) = sum(sign * angular(phi) * I_orders(2 s))`` where ``phi``
    is the direction of ``x_i - x_j`` measured from the image column axis.
    """
    if not (2 <= i <= MAX_MODES and 2 <= j <= MAX_MODES):
        raise IndexError(f"mode indices must be in 2..{MAX_MODES}, got ({i}, {j})")
    p, q = noll_to_nm(i), noll_to_nm(j)
    m_sum = p.m + q.m
    m_diff = p.m - q.m
    b, c = p.n + 1, q.n + 1
    sign_sum = -1 if ((p.n - q.n + m_sum) // 2) % 2 else 1
    sign_diff = -1 if ((p.n - q.n + abs(m_diff)) // 2) % 2 else 1
    case = kernel_case(i, j)
    root2 = math.sqrt(2.0)
    if case == 1:
        parity = -1.0 if j % 2 else 1.0
        return (
            _KernelTerm((m_sum, b, c), sign_sum, lambda phi: parity * np.cos(m_sum * phi)),
            _KernelTerm((abs(m_diff), b, c), sign_diff, lambda phi: np.cos(m_diff * phi)),
        )
    if case == 2:
        m_sin, m_cos = (p.m, q.m) if p.parity == "sin" else (q.m, p.m)
        return (
            _KernelTerm((m_sum, b, c), sign_sum, lambda phi: np.sin(m_sum * phi)),
            _KernelTerm((abs(m_diff), b, c), sign_diff, lambda phi: np.sin((m_sin - m_cos) * phi)),
        )
    if case == 3:
        return (_KernelTerm((m_sum, b, c), sign_sum, lambda phi: root2 * np.cos(m_sum * phi)),)
    if case == 4:
        return (_KernelTerm((m_sum, b, c), sign_sum, lambda phi: root2 * np.sin(m_sum * phi)),)
    return (_KernelTerm((0, b, c), sign_sum, lambda phi: np.ones_like(phi)),)


def takato_kernel(i: int, j: int, s_vec: tuple[float, float], k0_scaled: float = DEFAULT_K0,
                  **quad_options) -> float:
    """Dimensionless correlation kernel ``f_ij`` of a single layer.

    Parameters
    ----------
    i, j : int
        Noll indices in 2..36.
    s_vec : (float, float)
        Separation ``(s, phi)`` of the two apertures; ``s = d / D`` at the
        layer and ``phi`` is measured from the image column axis.
    k0_scaled : float
        Dimensionless outer-scale parameter.
    """
    s, phi = float(s_vec[0]), float(s_vec[1])
    if s < 0:
        raise ValueError("separation must be non-negative")
    total = 0.0
    for term in kernel_terms(i, j):
        ang = float(term.angular(np.float64(phi)))
        if ang == 0.0 or abs(ang) < 1e-15:
            continue
        a, b, c = term.orders
        if a > 0 and s == 0.0:
            continue
        total += term.sign * ang * bessel_triple_integral(a, b, c, 2.0 * s, k0_scaled, **quad_options)
    return total


# ---------------------------------------------------------------------------
# imaging geometry and turbulence profile


@dataclass(frozen=True)
class ImagingGeometry:
    """Pinhole camera looking at a scene plane through turbulence.

    Parameters
    ----------
    path_length : float
        Camera-to-scene distance ``L`` in metres.
    focal_length : float
        Metres.
    f_number : float
        The aperture diameter is ``focal_length / f_number``.
    scene_width : float
        Width of the imaged scene in metres.
    image_size : (int, int)
        ``(H, W)`` pixels; pixels are square.
    wavelength : float
        Metres.
    k0_scaled : float
        Dimensionless outer-scale parameter ``2 pi R k0``.
    """

    path_length: float
    focal_length: float
    f_number: float
    scene_width: float
    image_size: tuple[int, int]
    wavelength: float = DEFAULT_WAVELENGTH
    k0_scaled: float = DEFAULT_K0

    def __post_init__(self):
        for name in ("path_length", "focal_length", "f_number", "scene_width", "wavelength"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        h, w = (int(v) for v in self.image_size)
        if h < 8 or w < 8:
            raise ValueError(f"image_size must be at least 8x8, got {self.image_size!r}")
        object.__setattr__(self, "image_size", (h, w))
        if not self.k0_scaled >= K0_MIN:
            raise ValueError(f"k0_scaled must be >= {K0_MIN}, got {self.k0_scaled!r}")

    @property
    def aperture_diameter(self) -> float:
        return self.focal_length / self.f_number

    @property
    def aperture_radius(self) -> float:
        return self.aperture_diameter / 2.0

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength

    @property
    def object_pixel(self) -> float:
        """Scene-plane footprint of one pixel in metres."""
        return self.scene_width / self.image_size[1]

    @property
    def pixel_pitch(self) -> float:
        """Sensor pixel pitch in metres."""
        return self.object_pixel * self.focal_length / self.path_length

    @property
    def pixel_angle(self) -> float:
        return self.object_pixel / self.path_length

    def separation_per_pixel(self, z) -> np.ndarray:
        """Aperture-normalised separation ``s = d / D_z`` of two lines of
        sight one pixel apart, at distance ``z`` from the camera."""
        z = np.asarray(z, dtype=float)
        L = self.path_length
        return (self.object_pixel / self.aperture_diameter) * z / (L - z)

    def to_dict(self) -> dict:
        return {
            "path_length": self.path_length, "focal_length": self.focal_length,
            "f_number": self.f_number, "scene_width": self.scene_width,
            "image_size": list(self.image_size), "wavelength": self.wavelength,
            "k0_scaled": self.k0_scaled,
        }


@dataclass(frozen=True)
class CnProfile:
    """Piecewise-constant ``Cn^2`` along the path, sampled at segment midpoints.

    ``z`` is the distance from the camera; each sample carries the length
    ``dz`` of its segment, so ``sum(cn2 * dz)`` is the integrated strength.
    """

    path_length: float
    z: np.ndarray
    cn2: np.ndarray
    dz: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel()
        cn2 = np.asarray(self.cn2, dtype=float).ravel()
        dz = np.asarray(self.dz, dtype=float).ravel()
        if z.size == 0:
            raise ValueError("profile has no segments")
        if not (z.shape == cn2.shape == dz.shape):
            raise ValueError("z, cn2 and dz must have equal length")
        if np.any(np.diff(z) <= 0):
            raise ValueError("segment positions must be strictly increasing")
        if z[0] < 0 or z[-1] > self.path_length:
            raise ValueError("segment positions must lie in [0, L]")
        if np.any(cn2 < 0) or not np.all(np.isfinite(cn2)):
            raise ValueError("Cn2 must be finite and non-negative")
        if np.any(dz < 0):
            raise ValueError("segment lengths must be non-negative")
        for name, arr in (("z", z), ("cn2", cn2), ("dz", dz)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def count(self) -> int:
        return int(self.z.size)

    @classmethod
    def constant(cls, path_length: float, cn2: float, segments: int = DEFAULT_SEGMENTS) -> "CnProfile":
        return cls.from_function(path_length, lambda z: np.full_like(z, cn2), segments)

    @classmethod
    def from_function(cls, path_length: float, func: Callable[[np.ndarray], np.ndarray],
                      segments: int = DEFAULT_SEGMENTS) -> "CnProfile":
        """Midpoint Riemann sampling of ``func(z)`` with ``segments`` equal pieces."""
        if segments < 1:
            raise ValueError("segments must be >= 1")
        dz = path_length / segments
        z = (np.arange(segments) + 0.5) * dz
        return cls(path_length, z, np.asarray(func(z), dtype=float), np.full(segments, dz))

    @classmethod
    def delta(cls, path_length: float, cn2: float, z: float) -> "CnProfile":
        """All of ``cn2 * L`` concentrated in one layer at distance ``z``."""
        return cls(path_length, np.array([z]), np.array([cn2]), np.array([path_length]))

    def weights(self) -> np.ndarray:
        """Per-segment ``((L - z) / L)^(5/3) Cn2 dz``."""
        return ((self.path_length - self.z) / self.path_length) ** (5.0 / 3.0) * self.cn2 * self.dz

    def to_dict(self) -> dict:
        return {"path_length": self.path_length, "z": self.z.tolist(),
                "cn2": self.cn2.tolist(), "dz": self.dz.tolist()}


def fried_parameter(profile: CnProfile, geom: ImagingGeometry) -> float:
    """Spherical-wave Fried parameter ``r0`` in metres (``inf`` without turbulence)."""
    strength = FRIED_CONSTANT * geom.wavenumber ** 2 * float(np.sum(profile.weights()))
    if strength <= 0:
        return math.inf
    return strength ** (-3.0 / 5.0)


def covariance_prefactor(geom: ImagingGeometry, i: int, j: int) -> float:
    """``A_ij`` in rad^2 per unit of ``int Cn2 w dz``."""
    ni, nj = noll_to_nm(i).n, noll_to_nm(j).n
    return (COVARIANCE_PREFACTOR * geom.wavenumber ** 2 * geom.aperture_radius ** (5.0 / 3.0)
            * math.sqrt((ni + 1) * (nj + 1)))


def _active_segments(geom: ImagingGeometry, profile: CnProfile):
    if abs(profile.path_length - geom.path_length) > 1e-9 * geom.path_length:
        raise ValueError("profile length does not match the geometry path length")
    w = profile.weights()
    keep = w > 0
    return w[keep], geom.separation_per_pixel(profile.z[keep])


def path_covariance(geom: ImagingGeometry, profile: CnProfile, i: int, j: int,
                    s_vec: tuple[float, float], store: BesselTableStore | None = None) -> float:
    """Covariance of ``a_i`` at one pixel with ``a_j`` at another, in rad^2.

    Parameters
    ----------
    s_vec : (float, float)
        Polar pixel offset ``(r, phi)`` of the ``a_i`` pixel relative to the
        ``a_j`` pixel; ``r`` in pixels, ``phi`` from the column axis.
    store : BesselTableStore, optional
        Tables used for non-zero offsets; quadrature is direct at zero offset.
    """
    if profile.count == 0:
        raise ValueError("profile has no segments")
    r, phi = float(s_vec[0]), float(s_vec[1])
    weights, s_pix = _active_segments(geom, profile)
    if weights.size == 0:
        return 0.0
    prefactor = covariance_prefactor(geom, i, j)
    if r == 0.0:
        return prefactor * float(np.sum(weights)) * takato_kernel(i, j, (0.0, 0.0), geom.k0_scaled)
    if store is None:
        store = BesselTableStore(geom.k0_scaled)
    total = 0.0
    for term in kernel_terms(i, j):
        ang = float(term.angular(np.float64(phi)))
        if ang == 0.0:
            continue
        radial = float(np.dot(weights, store.table(*term.orders)(2.0 * s_pix * r)))
        total += term.sign * ang * radial
    return prefactor * total


# ---------------------------------------------------------------------------
# covariance maps on the pixel grid

FIELD_MAGIC = b"TSCOVF\x00\x00"
FIELD_VERSION = 1


def _lag_grid(shape: tuple[int, int]):
    h, w = shape
    dy = np.fft.fftfreq(h, 1.0 / h)
    dx = np.fft.fftfreq(w, 1.0 / w)
    gx, gy = np.meshgrid(dx, dy, indexing="xy")
    return gx, gy


@dataclass(frozen=True)
class CovarianceField:
    """Per-mode spatial autocovariance maps over periodic pixel lags.

    ``maps[i - 1][dy, dx]`` is the covariance of ``a_i`` at two pixels
    separated by ``(dy, dx)`` in FFT ordering (zero lag at ``[0, 0]``);
    ``psd_raw[i - 1]`` is its discrete Fourier transform and ``psd`` the same
    with negative entries clamped to zero.  A covariance that is not
    periodic over the grid has some negative spectrum; ``clamped_fraction``
    records the clamped share of the spectral mass per mode.
    """

    geometry: ImagingGeometry
    profile: CnProfile
    shape: tuple[int, int]
    maps: np.ndarray = field(repr=False)
    psd_raw: np.ndarray = field(repr=False)
    psd: np.ndarray = field(repr=False)
    clamped_fraction: np.ndarray = field(repr=False)
    store: BesselTableStore | None = field(default=None, repr=False, compare=False)

    def autocorrelation(self, i: int) -> np.ndarray:
        return self.maps[i - 1]

    def variance(self) -> np.ndarray:
        """Zero-lag variance of every mode (piston is 0)."""
        return self.maps[:, 0, 0].copy()

    def unit_psd(self, i: int) -> np.ndarray:
        """PSD scaled so the sampled field has unit variance."""
        psd = self.psd[i - 1]
        total = psd.sum()
        if total <= 0:
            return np.zeros_like(psd)
        return psd * (psd.size / total)

    def pair_map(self, i: int, j: int) -> np.ndarray:
        """Cross-covariance map of ``a_i`` and ``a_j`` (computed on demand)."""
        store = self.store or BesselTableStore(self.geometry.k0_scaled)
        return _mode_map(self.geometry, self.profile, i, j, self.shape, store)

    def zero_lag_matrix(self) -> np.ndarray:
        """36 x 36 covariance of the coefficients at a single pixel."""
        out = np.zeros((MAX_MODES, MAX_MODES))
        for i in range(2, MAX_MODES + 1):
            for j in range(i, MAX_MODES + 1):
                out[i - 1, j - 1] = out[j - 1, i - 1] = path_covariance(
                    self.geometry, self.profile, i, j, (0.0, 0.0))
        return out


def _mode_map(geom: ImagingGeometry, profile: CnProfile, i: int, j: int,
              shape: tuple[int, int], store: BesselTableStore) -> np.ndarray:
    gx, gy = _lag_grid(shape)
    r2 = np.rint(gx * gx + gy * gy).astype(np.int64)
    phi = np.arctan2(gy, gx)
    radii2, inverse = np.unique(r2, return_inverse=True)
    radii = np.sqrt(radii2.astype(float))
    weights, s_pix = _active_segments(geom, profile)
    out = np.zeros(shape)
    if weights.size == 0:
        return out
    t = 2.0 * s_pix[:, None] * radii[None, :]
    for term in kernel_terms(i, j):
        a, b, c = term.orders
        vals = store.table(a, b, c)(t.ravel()).reshape(t.shape)
        if a > 0:
            vals[:, radii == 0] = 0.0
        else:
            vals[:, radii == 0] = store.table(a, b, c).values[0]
        radial = weights @ vals
        out += term.sign * term.angular(phi) * radial[inverse].reshape(shape)
    return covariance_prefactor(geom, i, j) * out


def _diagonal_maps(geom: ImagingGeometry, profile: CnProfile, shape: tuple[int, int],
                   store: BesselTableStore) -> np.ndarray:
    maps = np.zeros((MAX_MODES, *shape))
    for i in range(2, MAX_MODES + 1):
        maps[i - 1] = _mode_map(geom, profile, i, i, shape, store)
    return maps


def _psd_from_maps(maps: np.ndarray):
    # the maps are even in the lag, so the transform is real up to rounding
    raw = np.fft.fft2(maps).real
    total = np.abs(raw).sum(axis=(1, 2))
    negative = np.where(raw < 0, -raw, 0.0).sum(axis=(1, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(total > 0, negative / total, 0.0)
    return raw, np.maximum(raw, 0.0), frac


def field_cache_key(geom: ImagingGeometry, profile: CnProfile, shape: tuple[int, int],
                    store: BesselTableStore) -> str:
    blob = json.dumps({"geometry": geom.to_dict(), "profile": profile.to_dict(),
                       "shape": list(shape), "tables": store.settings(),
                       "version": FIELD_VERSION}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_field_blob(path: Path, key: str, maps: np.ndarray) -> None:
    n, h, w = maps.shape
    header = FIELD_MAGIC + struct.pack("<I", FIELD_VERSION) + bytes.fromhex(key) + struct.pack("<III", n, h, w)
    _atomic_write(Path(path), header + maps.astype("<f4").tobytes(order="C"))


def read_field_blob(path: Path, key: str) -> np.ndarray | None:
    """Return the stored maps or ``None`` if the file is absent or stale."""
    try:
        data = Path(path).read_bytes()
    except OSError:
        return None
    head = len(FIELD_MAGIC) + 4 + 32 + 12
    if len(data) < head or not data.startswith(FIELD_MAGIC):
        return None
    (version,) = struct.unpack_from("<I", data, len(FIELD_MAGIC))
    digest = data[len(FIELD_MAGIC) + 4:len(FIELD_MAGIC) + 36]
    if version != FIELD_VERSION or digest != bytes.fromhex(key):
        return None
    n, h, w = struct.unpack_from("<III", data, len(FIELD_MAGIC) + 36)
    if len(data) != head + 4 * n * h * w:
        return None
    return np.frombuffer(data, dtype="<f4", offset=head).reshape(n, h, w).astype(float)


def build_covariance_field(geom: ImagingGeometry, profile: CnProfile, pad: int = 1,
                           store: BesselTableStore | None = None,
                           cache_dir: str | Path | None = None, use_cache: bool = True) -> CovarianceField:
    """Autocovariance maps and PSDs of all modes for ``geom``.

    Parameters
    ----------
    pad : int
        Lag-grid enlargement (1 or 2); 2 suppresses periodic wrap-around
        when the field is sampled by FFT.
    store : BesselTableStore, optional
        Source of tabulated integrals; defaults to one rooted at ``cache_dir``.
    cache_dir : path, optional
        Directory for the persisted maps (defaults to ``$TURBSYN_CACHE``).
    use_cache : bool
        Read and write the on-disk map cache.
    """
    if pad not in (1, 2):
        raise ValueError("pad must be 1 or 2")
    if profile.count == 0:
        raise ValueError("profile has no segments")
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    if store is None:
        store = BesselTableStore(geom.k0_scaled, cache_dir)
    elif store.k0_scaled != geom.k0_scaled:
        raise ValueError("table store k0 differs from the geometry k0")
    shape = (geom.image_size[0] * pad, geom.image_size[1] * pad)
    key = field_cache_key(geom, profile, shape, store)
    path = cache_dir / "fields" / f"{key[:24]}.bin"
    maps = read_field_blob(path, key) if use_cache else None
    if maps is None:
        maps = _diagonal_maps(geom, profile, shape, store)
        if use_cache:
            write_field_blob(path, key, maps)
            # round through float32 so cold and warm builds agree bit for bit
            maps = read_field_blob(path, key)
        else:
            maps = maps.astype("<f4").astype(float)
    if not np.all(np.isfinite(maps)):
        raise FloatingPointError("covariance maps contain non-finite values")
    raw, psd, frac = _psd_from_maps(maps)
    for arr in (maps, raw, psd, frac):
        arr.setflags(write=False)
    return CovarianceField(geom, profile, shape, maps, raw, psd, frac, store)


def unique_triples(modes: Sequence[int] = range(2, MAX_MODES + 1)) -> list[tuple[int, int, int]]:
    """Bessel orders needed for the autocovariance maps of ``modes``."""
    out = set()
    for i in modes:
        for term in kernel_terms(i, i):
            out.add(term.orders)
    return sorted(out)
