"""Dataset synthesis: configuration, frame I/O, orchestration and metadata.

Output layout for a job rooted at ``out``::

    out/config.json              validated configuration, verbatim
    out/manifest.json            one entry per synthesized sequence
    out/<sequence>/full/         degraded frames
    out/<sequence>/tilt_only/    warped, unblurred frames
    out/<sequence>/clean/        ground truth (one frame for static jobs)
    out/<sequence>/metadata.json

Every random draw comes from a stream keyed by ``(master_seed, video_id,
frame, mode)`` and ``video_id`` is a hash of the input path as written in
the configuration, so the tree does not depend on iteration order, worker
count or scheduling.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import cv2
import numpy as np

from . import __version__
from .covariance import CovarianceField, build_covariance_field
from .degrade import DEFAULT_BLOCK, DegradedFrameSet, _Convolver, degrade_frame, tilt_constant
from .fields import FieldSequence, stream_rng
from .metrics import SimulatedSample
from .params import (BLUR_FIRST_MODE, MODALITIES, QuotaExhausted, StrengthLabel, TurbulenceParams,
                     blur_score, sample_params, tilt_score)
from .psf import PsfBasis, default_basis, default_basis_path, load_basis, resize_basis, strength_scale
from .psf import diffraction_fwhm
from .zernike import deflated_cholesky

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
# mode slots 0 and 1 never carry a Zernike field, so they key the other streams
NOISE_STREAM = 0
PARAM_STREAM = 1


class ConfigError(ValueError):
    """Invalid job configuration."""


class InputError(OSError):
    """Unreadable or inconsistent input frames."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class JobConfig:
    """Validated synthesis job.

    ``params`` is ``"sample"`` or a mapping of :class:`TurbulenceParams`
    fields that override a sampled draw.  ``quotas`` maps strength labels to
    sequence counts.  Relative paths resolve against ``base_dir``.
    """

    inputs: tuple[str, ...]
    output: str
    modality: str = "dynamic"
    master_seed: int = 0
    frames: int = 10
    params: object = "sample"
    quotas: Mapping[str, int] | None = None
    noise_sigma: float = 0.0
    block: int = DEFAULT_BLOCK
    workers: int = 1
    basis: str | None = None
    cache_dir: str | None = None
    segments: int = 100
    pad: int = 2
    max_attempts: int = 1000
    scale_with_strength: bool = False
    blur_first_mode: int = BLUR_FIRST_MODE
    overwrite: bool = False
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if not self.inputs:
            raise ConfigError("at least one input is required")
        if not all(isinstance(p, str) and p for p in self.inputs):
            raise ConfigError("inputs must be non-empty path strings")
        if len(set(self.inputs)) != len(self.inputs):
            raise ConfigError("inputs contain duplicates")
        if not isinstance(self.output, str) or not self.output:
            raise ConfigError("output must be a path string")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        _require_int(self, "master_seed", 0)
        _require_int(self, "frames", 1)
        _require_int(self, "block", 1)
        _require_int(self, "workers", 1)
        _require_int(self, "segments", 1)
        _require_int(self, "max_attempts", 1)
        if self.pad not in (1, 2):
            raise ConfigError("pad must be 1 or 2")
        if self.blur_first_mode not in (3, 4):
            raise ConfigError("blur_first_mode must be 3 or 4")
        if not isinstance(self.noise_sigma, (int, float)) or not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be a non-negative number")
        if self.params != "sample":
            if not isinstance(self.params, Mapping):
                raise ConfigError('params must be "sample" or an object of overrides')
            allowed = {f.name for f in dc_fields(TurbulenceParams)} - {"modality", "row", "image_size"}
            unknown = set(self.params) - allowed
            if unknown:
                raise ConfigError(f"unknown parameter overrides: {sorted(unknown)}")
        if self.quotas is not None:
            if not isinstance(self.quotas, Mapping):
                raise ConfigError("quotas must be an object")
            labels = {str(label) for label in StrengthLabel}
            for key, value in self.quotas.items():
                if key not in labels:
                    raise ConfigError(f"unknown strength label {key!r}")
                if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                    raise ConfigError(f"quota for {key} must be a non-negative integer")
            if sum(self.quotas.values()) > len(self.inputs):
                raise ConfigError("quotas exceed the number of inputs")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def output_path(self) -> Path:
        return self.resolve(self.output)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dc_fields(self) if f.name != "base_dir"}
        out["inputs"] = list(self.inputs)
        if self.quotas is not None:
            out["quotas"] = dict(self.quotas)
        if isinstance(self.params, Mapping):
            out["params"] = dict(self.params)
        return out

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: str | Path = ".") -> "JobConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in dc_fields(cls)} - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        for key in ("inputs", "output"):
            if key not in data:
                raise ConfigError(f"missing required key {key!r}")
        values = dict(data)
        inputs = values["inputs"]
        if isinstance(inputs, str):
            inputs = [inputs]
        if not isinstance(inputs, list):
            raise ConfigError("inputs must be a list of paths")
        values["inputs"] = tuple(inputs)
        try:
            return cls(**values, base_dir=str(base_dir))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "JobConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: configuration must be a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data, base_dir=path.parent)


def _require_int(cfg, name: str, minimum: int) -> None:
    value = getattr(cfg, name)
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")


def video_id(relative_path: str) -> int:
    """Stable 63-bit id of an input path as written in the configuration."""
    key = Path(relative_path).as_posix().encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def sequence_name(relative_path: str) -> str:
    stem = Path(relative_path).stem or "input"
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in stem)
    return f"{safe}-{video_id(relative_path):016x}"[:48]


# ---------------------------------------------------------------------------
# frame I/O


@dataclass(frozen=True)
class Frame:
    """Image in ``[0, 1]`` (RGB or gray) with its on-disk bit depth."""

    data: np.ndarray = field(repr=False)
    bits: int = 8

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


def read_frame(path: str | Path) -> Frame:
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        bits = 8
    elif raw.dtype == np.uint16:
        bits = 16
    else:
        raise InputError(f"{path}: unsupported sample type {raw.dtype}")
    img = raw.astype(float) / float(2 ** bits - 1)
    if img.ndim == 3:
        img = img[..., :3][..., ::-1]  # drop alpha, BGR -> RGB
        if img.shape[2] == 1:
            img = img[..., 0]
    return Frame(np.ascontiguousarray(img), bits)


def quantise(image: np.ndarray, bits: int) -> np.ndarray:
    top = 2 ** bits - 1
    dtype = np.uint8 if bits == 8 else np.uint16
    return np.rint(np.clip(image, 0.0, 1.0) * top).astype(dtype)


def write_frame(path: str | Path, image: np.ndarray, bits: int = 8) -> None:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    q = quantise(image, bits)
    if q.ndim == 3:
        q = np.ascontiguousarray(q[..., ::-1])
    if not cv2.imwrite(str(path), q):
        raise InputError(f"cannot write {path}")


def list_frames(path: str | Path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise InputError(f"input {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
    if not files:
        raise InputError(f"no image frames in {path}")
    return files


def load_clean_frames(path: str | Path, modality: str, count: int) -> list[Frame]:
    """Frames for one sequence; a static input uses its first frame ``count`` times."""
    files = list_frames(path)
    if modality == "static":
        first = read_frame(files[0])
        return [first] * count
    if len(files) < count:
        raise InputError(f"{path}: video has {len(files)} frames but {count} were requested "
                         f"(short by {count - len(files)})")
    frames = [read_frame(f) for f in files[:count]]
    shapes = {(fr.data.shape, fr.bits) for fr in frames}
    if len(shapes) != 1:
        raise InputError(f"{path}: frames differ in shape or bit depth")
    return frames


# ---------------------------------------------------------------------------
# simulation


def _load_basis(path: str | None) -> PsfBasis:
    return default_basis() if path is None else load_basis(path)


def basis_hash(path: str | None) -> str:
    target = default_basis_path() if path is None else Path(path)
    return hashlib.sha256(target.read_bytes()).hexdigest()


class Simulator:
    """Degradation engine for one parameter set.

    Builds (or loads) the covariance field, the resized blur basis and the
    convolution plan once; sequences and single frames reuse them.
    """

    def __init__(self, params: TurbulenceParams, basis: PsfBasis | None = None,
                 cache_dir: str | Path | None = None, block: int = DEFAULT_BLOCK,
                 noise_sigma: float = 0.0, pad: int = 2, blur_first_mode: int = BLUR_FIRST_MODE,
                 covariance: CovarianceField | None = None):
        self.params = params
        self.geometry = params.geometry()
        self.profile = params.profile()
        self.native = basis if basis is not None else default_basis()
        self.block = int(block)
        self.noise_sigma = float(noise_sigma)
        self.blur_first_mode = blur_first_mode
        self.covariance = covariance or build_covariance_field(self.geometry, self.profile, pad,
                                                               cache_dir=cache_dir)
        scale = strength_scale(params.d_over_r0) if params.scale_with_strength else 1.0
        self.resized = resize_basis(self.native, diffraction_fwhm(self.geometry), scale)
        self.c_tilt = tilt_constant(self.geometry)
        self.cholesky = deflated_cholesky(self.covariance.zero_lag_matrix())
        self._convolver = None

    @property
    def kernel_size(self) -> int:
        return self.resized.side

    def _conv(self, shape):
        if self._convolver is None or self._convolver.shape != shape:
            self._convolver = _Convolver(shape, self.resized)
        return self._convolver

    def frames(self, clean: Sequence[np.ndarray], master_seed: int, vid: int,
               coeff_scale: float = 1.0) -> Iterator[tuple[DegradedFrameSet, dict]]:
        """Degrade ``clean`` frame by frame with one temporally correlated field sequence."""
        seq = FieldSequence(self.covariance, self.params.temporal_alpha, master_seed, vid,
                            self.cholesky)
        for t, image in enumerate(clean):
            coeffs = seq.next()
            if coeff_scale != 1.0:
                coeffs = type(coeffs)(coeffs.a * coeff_scale)
            rng = stream_rng(master_seed, vid, t, NOISE_STREAM)
            out = degrade_frame(image, coeffs, self.native, self.resized, self.geometry,
                                self.noise_sigma, rng, self.block, self.c_tilt,
                                convolver=self._conv(np.shape(image)[:2]))
            stats = {"frame": t, "d_bar": tilt_score(out.tilt),
                     "blur_score": blur_score(coeffs, self.kernel_size, self.blur_first_mode)}
            yield out, stats


class StudySimulator:
    """Single-frame simulator for metric studies at a fixed geometry.

    Turbulence strength varies through ``Cn^2`` drawn log-uniformly from
    ``cn2_range``.  For a constant profile every covariance is proportional
    to ``Cn^2``, so one field built at a reference strength serves all
    draws after scaling the coefficients by ``sqrt(cn2 / cn2_ref)``.
    """

    def __init__(self, params: TurbulenceParams, cn2_range: tuple[float, float],
                 master_seed: int = 0, **kwargs):
        lo, hi = cn2_range
        if not 0 < lo <= hi:
            raise ValueError("cn2 range must be positive and ordered")
        self.cn2_range = (float(lo), float(hi))
        self.simulator = Simulator(params, **kwargs)
        self.master_seed = master_seed
        self.count = 0

    def __call__(self, clean: np.ndarray, rng: np.random.Generator) -> SimulatedSample:
        lo, hi = self.cn2_range
        cn2 = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        scale = math.sqrt(cn2 / self.simulator.params.cn2)
        vid = int(rng.integers(2 ** 62))
        (out, stats), = self.simulator.frames([clean], self.master_seed, vid, scale)
        self.count += 1
        return SimulatedSample(out.full, stats["d_bar"], stats["blur_score"])


# ---------------------------------------------------------------------------
# parameter assignment


def _shape_of(frame_path: Path) -> tuple[int, int]:
    return read_frame(frame_path).shape


def draw_params(config: JobConfig, relative: str, image_size: tuple[int, int],
                attempt: int) -> TurbulenceParams:
    """Parameter draw ``attempt`` for one input (stream keyed by the attempt)."""
    rng = stream_rng(config.master_seed, video_id(relative), attempt, PARAM_STREAM)
    overrides = dict(config.params) if isinstance(config.params, Mapping) else {}
    overrides.setdefault("segments", config.segments)
    overrides.setdefault("scale_with_strength", config.scale_with_strength)
    try:
        return sample_params(config.modality, rng, image_size, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid parameter override: {exc}") from None


@dataclass(frozen=True)
class ManifestEntry:
    input: str
    video_id: int
    params: TurbulenceParams
    label: StrengthLabel
    attempts: int

    def to_dict(self) -> dict:
        return {"input": self.input, "video_id": self.video_id, "params": self.params.to_dict(),
                "derived": self.params.derived(), "strength": str(self.label),
                "attempts": self.attempts}


def classify_and_balance(config: JobConfig, shapes: Mapping[str, tuple[int, int]]) -> list[ManifestEntry]:
    """Assign a parameter set and strength bucket to each input.

    Without quotas every input gets its first draw.  With quotas, each input
    in turn redraws until its label falls in a bucket that still has room;
    inputs left over once every bucket is full are not synthesized.

    Raises
    ------
    QuotaExhausted
        When an input exceeds ``max_attempts`` draws; ``accepted`` holds the
        entries assigned so far.
    """
    entries: list[ManifestEntry] = []
    if config.quotas is None:
        for rel in config.inputs:
            p = draw_params(config, rel, shapes[rel], 0)
            entries.append(ManifestEntry(rel, video_id(rel), p, p.strength, 1))
        return entries
    remaining = {StrengthLabel(k): v for k, v in config.quotas.items()}
    for rel in config.inputs:
        if not any(v > 0 for v in remaining.values()):
            break
        for attempt in range(config.max_attempts):
            p = draw_params(config, rel, shapes[rel], attempt)
            label = p.strength
            if remaining.get(label, 0) > 0:
                remaining[label] -= 1
                entries.append(ManifestEntry(rel, video_id(rel), p, label, attempt + 1))
                break
        else:
            raise QuotaExhausted(f"{rel}: no parameter set fit an open bucket within "
                                 f"{config.max_attempts} draws", entries)
    open_buckets = {str(k): v for k, v in remaining.items() if v > 0}
    if open_buckets:
        raise QuotaExhausted(f"inputs ran out before the quotas were met; missing {open_buckets}",
                             entries)
    return entries


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class SequenceJob:
    config: dict
    base_dir: str
    entry: dict
    staging_root: str


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def synthesize_sequence(config: JobConfig, entry: ManifestEntry, staging_root: str | Path) -> dict:
    """Simulate one sequence into a staging directory and move it into place."""
    out_root = config.output_path
    name = sequence_name(entry.input)
    final = out_root / name
    if final.exists() and not config.overwrite:
        raise InputError(f"{final} already exists (set overwrite to replace it)")
    frames = load_clean_frames(config.resolve(entry.input), config.modality, config.frames)
    bits = frames[0].bits
    if frames[0].shape != tuple(entry.params.image_size):
        raise InputError(f"{entry.input}: frame shape changed since classification")
    basis = _load_basis(config.basis)
    sim = Simulator(entry.params, basis, config.cache_dir and config.resolve(config.cache_dir),
                    config.block, config.noise_sigma, config.pad, config.blur_first_mode)
    stage = Path(tempfile.mkdtemp(prefix=f".{name}.", dir=staging_root))
    try:
        for sub in ("full", "tilt_only", "clean"):
            (stage / sub).mkdir()
        per_frame = []
        for out, stats in sim.frames([f.data for f in frames], config.master_seed, entry.video_id):
            t = stats["frame"]
            write_frame(stage / "full" / f"{t:06d}.png", out.full, bits)
            write_frame(stage / "tilt_only" / f"{t:06d}.png", out.tilt_only, bits)
            if config.modality == "dynamic" or t == 0:
                write_frame(stage / "clean" / f"{t:06d}.png", out.clean, bits)
            per_frame.append(stats)
        metadata = {
            "tool_version": __version__,
            "input": entry.input,
            "sequence": name,
            "seed": {"master_seed": config.master_seed, "video_id": entry.video_id,
                     "param_attempt": entry.attempts - 1},
            "params": entry.params.to_dict(),
            "derived": entry.params.derived(),
            "strength": str(entry.label),
            "c_tilt": sim.c_tilt,
            "kernel_size": sim.kernel_size,
            "basis_sha256": basis_hash(config.basis),
            "block": config.block,
            "noise_sigma": config.noise_sigma,
            "bits": bits,
            "frames": per_frame,
            "mean_d_bar": float(np.mean([s["d_bar"] for s in per_frame])),
            "mean_blur_score": float(np.mean([s["blur_score"] for s in per_frame])),
            "clamped_psd_fraction_max": float(np.max(sim.covariance.clamped_fraction[1:])),
        }
        _write_json(stage / "metadata.json", metadata)
        if final.exists():
            shutil.rmtree(final)
        os.replace(stage, final)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return metadata


def _run_job(job: SequenceJob) -> dict:
    config = JobConfig.from_dict(job.config, job.base_dir)
    entry = job.entry
    params = TurbulenceParams.from_dict(entry["params"])
    me = ManifestEntry(entry["input"], entry["video_id"], params, StrengthLabel(entry["strength"]),
                       entry["attempts"])
    return synthesize_sequence(config, me, job.staging_root)


def synthesize(config: JobConfig) -> dict:
    """Run a whole job and return the manifest written to ``manifest.json``."""
    out_root = config.output_path
    out_root.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for rel in config.inputs:
        files = list_frames(config.resolve(rel))
        shapes[rel] = _shape_of(files[0])
    entries = classify_and_balance(config, shapes)
    _write_json(out_root / "config.json", config.to_dict())
    staging = Path(tempfile.mkdtemp(prefix=".staging.", dir=out_root))
    try:
        jobs = [SequenceJob(config.to_dict(), config.base_dir, e.to_dict(), str(staging)) for e in entries]
        if config.workers == 1 or len(jobs) <= 1:
            results = [_run_job(j) for j in jobs]
        else:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                results = list(pool.map(_run_job, jobs))
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    manifest = {
        "tool_version": __version__,
        "modality": config.modality,
        "master_seed": config.master_seed,
        "sequences": [{"input": e.input, "sequence": sequence_name(e.input), "video_id": e.video_id,
                       "strength": str(e.label), "mean_d_bar": r["mean_d_bar"],
                       "mean_blur_score": r["mean_blur_score"]}
                      for e, r in zip(entries, results)],
    }
    _write_json(out_root / "manifest.json", manifest)
    return manifest


def tree_digest(root: str | Path) -> str:
    """SHA-256 over every file path and content below ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode() + b"\0")
        h.update(hashlib.sha256(path.read_bytes()).digest())
    return h.hexdigest()

