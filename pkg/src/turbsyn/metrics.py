"""Full-reference image quality metrics and the metric sensitivity study."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from scipy.ndimage import uniform_filter
from skimage.metrics import structural_similarity

PSNR_CAP = 100.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
CW_LEVELS = 4
CW_ORIENTATIONS = 6
CW_WINDOW = 7
CW_K = 1e-8
SSIM_SIGMA = 1.5
CHARBONNIER_EPS = 1e-3
METRIC_NAMES = ("psnr", "ssim", "cw_ssim", "charbonnier")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def luma(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an RGB image; grayscale passes through."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ LUMA_WEIGHTS
    if image.ndim == 3 and image.shape[2] == 1:
        return image[..., 0]
    raise ValueError(f"expected a gray or RGB image, got shape {image.shape}")


def _gray_pair(a, b, per_channel: bool):
    a, b = _pair(a, b)
    if per_channel and a.ndim == 3:
        return [(a[..., c], b[..., c]) for c in range(a.shape[2])]
    return [(luma(a), luma(b))]


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``, capped at 100 dB."""
    a, b = _pair(a, b)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def ssim(a, b, data_range: float = 1.0, per_channel: bool = False) -> float:
    """Gaussian-windowed SSIM (sigma 1.5, 11x11 support) on luma.

    ``per_channel`` averages the score over colour channels instead.
    """
    scores = [structural_similarity(x, y, data_range=data_range, gaussian_weights=True,
                                    sigma=SSIM_SIGMA, use_sample_covariance=False)
              for x, y in _gray_pair(a, b, per_channel)]
    return float(np.mean(scores))


@lru_cache(maxsize=1)
def _dtcwt_transform():
    # dtcwt probes for an optional tensorflow backend on import, which costs
    # seconds and floods stderr; hide it unless the caller already loaded it
    blocked = "tensorflow" not in sys.modules
    if blocked:
        sys.modules["tensorflow"] = None
    try:
        import dtcwt
    finally:
        if blocked:
            del sys.modules["tensorflow"]
    return dtcwt.Transform2d()


def min_cw_side(levels: int = CW_LEVELS) -> int:
    return 4 * 2 ** levels


def _highpasses(image: np.ndarray, levels: int):
    return _dtcwt_transform().forward(image, nlevels=levels).highpasses


def cw_ssim(a, b, levels: int = CW_LEVELS, window: int = CW_WINDOW, k: float = CW_K,
            per_channel: bool = False) -> float:
    """Complex-wavelet SSIM averaged over every dual-tree subband.

    Each subband contributes the local index
    ``(2 |sum c_a conj(c_b)| + K) / (sum |c_a|^2 + sum |c_b|^2 + K)``
    over ``window x window`` neighbourhoods, averaged spatially.

    Raises
    ------
    ValueError
        If either side is below ``4 * 2**levels`` pixels.
    """
    pairs = _gray_pair(a, b, per_channel)
    h, w = pairs[0][0].shape
    if min(h, w) < min_cw_side(levels):
        raise ValueError(f"images of {h}x{w} are too small for {levels} levels "
                         f"(need {min_cw_side(levels)} pixels per side)")
    scores = []
    for x, y in pairs:
        for hx, hy in zip(_highpasses(x, levels), _highpasses(y, levels)):
            cross = hx * np.conj(hy)
            power = np.abs(hx) ** 2 + np.abs(hy) ** 2
            size = (window, window, 1)
            num_re = uniform_filter(cross.real, size, mode="reflect")
            num_im = uniform_filter(cross.imag, size, mode="reflect")
            den = uniform_filter(power, size, mode="reflect")
            n = float(window * window)
            index = (2.0 * n * np.hypot(num_re, num_im) + k) / (n * den + k)
            scores.append(index.mean(axis=(0, 1)))
    return float(np.mean(np.concatenate(scores)))


def charbonnier(a, b, epsilon: float = CHARBONNIER_EPS) -> float:
    """Mean of ``sqrt(diff^2 + eps^2)``."""
    a, b = _pair(a, b)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return float(np.mean(np.sqrt((a - b) ** 2 + epsilon * epsilon)))


def metric_settings() -> dict:
    return {"psnr_cap_db": PSNR_CAP, "ssim_sigma": SSIM_SIGMA, "cw_levels": CW_LEVELS,
            "cw_orientations": CW_ORIENTATIONS, "cw_window": CW_WINDOW, "cw_k": CW_K,
            "charbonnier_eps": CHARBONNIER_EPS, "color": "luma-601"}


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    cw_ssim: float
    charbonnier: float
    settings: dict = field(default_factory=metric_settings)

    def values(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def evaluate(reference, degraded, peak: float = 1.0, epsilon: float = CHARBONNIER_EPS) -> MetricReport:
    return MetricReport(psnr(reference, degraded, peak), ssim(reference, degraded, peak),
                        cw_ssim(reference, degraded), charbonnier(reference, degraded, epsilon))


@dataclass(frozen=True)
class SimulatedSample:
    degraded: np.ndarray
    tilt_score: float
    blur_score: float


class SimulatorHandle(Protocol):
    def __call__(self, clean: np.ndarray, rng: np.random.Generator) -> SimulatedSample: ...


def sensitivity_study(clean_corpus: Sequence[np.ndarray], simulator: SimulatorHandle, samples: int,
                      rng: np.random.Generator, peak: float = 1.0) -> list[dict]:
    """Degrade ``samples`` frames drawn cyclically from the corpus and score each.

    Returns one record per sample with the two degradation scores and every
    metric, ready for :func:`write_report`.
    """
    if not clean_corpus:
        raise ValueError("clean corpus is empty")
    records = []
    for n in range(int(samples)):
        clean = np.asarray(clean_corpus[n % len(clean_corpus)], dtype=float)
        out = simulator(clean, rng)
        record = {"sample": n, "tilt_score": float(out.tilt_score), "blur_score": float(out.blur_score)}
        record.update(evaluate(clean, out.degraded, peak).values())
        records.append(record)
    return records


def fitted_slope(x: Iterable[float], y: Iterable[float]) -> float:
    """Least-squares slope of ``y`` against ``x``."""
    x = np.asarray(list(x), dtype=float)
    y = np.asarray(list(y), dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("need at least two distinct x values")
    return float(np.polyfit(x, y, 1)[0])


def write_report(records: Sequence[dict], path) -> None:
    """One JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_report(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{lineno}: record is not an object")
            records.append(record)
    return records


def evaluate_many(pairs: Iterable[tuple[np.ndarray, np.ndarray]],
                  metric: Callable[[np.ndarray, np.ndarray], float]) -> list[float]:
    return [metric(a, b) for a, b in pairs]
