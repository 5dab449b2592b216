"""Synthetic paired CBCT/CT phantoms with controllable artifacts.

The CT is a stack of layered ellipses (soft-tissue body, bone inserts, air
cavities) whose geometry is interpolated between two keyframes along the
depth axis. The CBCT adds a radial cupping bias, streak lines, Gaussian
noise and a global intensity shift on top of the CT.

Keyframes are asymmetric on purpose (wide trunk with cavities at the first
slice, narrow section at the last), so a pair whose CT is stored in reverse
slice order no longer lines up voxel for voxel with its CBCT.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import PatientVolumePair
from .errors import ParameterError


class AnomalyKind(str, enum.Enum):
    REVERSED_SLICE_ORDER = "reversed_slice_order"
    SWAPPED_MODALITIES = "swapped_modalities"
    CORRUPTED_SLICES = "corrupted_slices"


DEFAULT_TISSUE_HU = {"air": -1000.0, "soft": 40.0, "bone": 700.0, "cavity": -800.0}


@dataclass(frozen=True)
class PhantomParams:
    seed: int = 0
    depth_range: tuple[int, int] = (50, 105)
    height_range: tuple[int, int] = (64, 96)
    width_range: tuple[int, int] = (64, 96)
    tissue_hus: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TISSUE_HU))
    noise_sigma: float = 20.0
    cupping_amplitude: float = 80.0
    streak_count: int = 6
    streak_amplitude: float = 100.0
    intensity_shift: float = 30.0
    smooth_sigma: float = 0.6

    def __post_init__(self) -> None:
        lo, hi = self.depth_range
        if not 1 <= lo <= hi <= 512:
            raise ParameterError(f"depth_range {self.depth_range} outside [1, 512]")
        for name in ("height_range", "width_range"):
            a, b = getattr(self, name)
            if not 1 <= a <= b:
                raise ParameterError(f"invalid {name} {(a, b)}")
        if self.noise_sigma < 0 or self.streak_count < 0:
            raise ParameterError("noise_sigma and streak_count must be non-negative")

    def without_artifacts(self) -> "PhantomParams":
        return replace(self, noise_sigma=0.0, cupping_amplitude=0.0, streak_count=0, intensity_shift=0.0)


def desk_params(seed: int = 7) -> PhantomParams:
    """Small, heavily artifacted phantoms for the end-to-end smoke run.

    16 slices of 64x64. The artifacts are strong enough that the identity
    baseline (sCT := CBCT) scores around 20 dB, which is closer to real
    CBCT/CT discrepancies than the mild defaults.
    """
    return PhantomParams(seed=seed, depth_range=(16, 16), height_range=(64, 64), width_range=(64, 64),
                         noise_sigma=80.0, cupping_amplitude=400.0, intensity_shift=300.0)


def _rng(*keys: int | str) -> np.random.Generator:
    words = [k if isinstance(k, int) else zlib.crc32(k.encode()) for k in keys]
    return np.random.default_rng(words)


def _keyframe(rng: np.random.Generator, upper: bool) -> np.ndarray:
    """Ellipse table rows: (cy, cx, ay, ax, theta, tissue_code) in unit coordinates.

    tissue_code: 0 body, 1 bone, 2 cavity. Later rows paint over earlier ones.
    The upper keyframe is a wide trunk with a posterior spine, lateral bones
    and two air cavities; the lower one is a narrower section with two
    femur-like bones and no cavities.
    """
    if upper:
        rows = [(0.0, 0.0, rng.uniform(0.74, 0.84), rng.uniform(0.82, 0.92), 0.0, 0),
                (rng.uniform(0.40, 0.50), 0.0, rng.uniform(0.12, 0.16), rng.uniform(0.12, 0.16), 0.0, 1)]
        for side in (-1.0, 1.0):
            rows.append((rng.uniform(-0.05, 0.15), side * rng.uniform(0.50, 0.60),
                         rng.uniform(0.12, 0.18), rng.uniform(0.08, 0.12), rng.uniform(-0.5, 0.5), 1))
        for side in (-1.0, 1.0):
            rows.append((rng.uniform(-0.35, -0.20), side * rng.uniform(0.15, 0.25),
                         rng.uniform(0.14, 0.20), rng.uniform(0.12, 0.18), 0.0, 2))
    else:
        rows = [(0.0, 0.0, rng.uniform(0.32, 0.40), rng.uniform(0.42, 0.50), 0.0, 0),
                (0.0, 0.0, 0.0, 0.0, 0.0, 1)]
        for side in (-1.0, 1.0):
            rows.append((rng.uniform(-0.05, 0.05), side * rng.uniform(0.18, 0.24),
                         rng.uniform(0.08, 0.11), rng.uniform(0.08, 0.11), 0.0, 1))
        for side in (-1.0, 1.0):
            rows.append((rng.uniform(-0.30, -0.20), side * rng.uniform(0.15, 0.25), 0.0, 0.0, 0.0, 2))
    return np.asarray(rows, dtype=np.float64)


def _paint(shape: tuple[int, int], table: np.ndarray, hus: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy - (h - 1) / 2) / (h / 2)
    xx = (xx - (w - 1) / 2) / (w / 2)
    img = np.full(shape, hus["air"], dtype=np.float64)
    body = np.zeros(shape, dtype=bool)
    codes = ("soft", "bone", "cavity")
    for cy, cx, ay, ax, theta, code in table:
        if ay <= 0 or ax <= 0:
            continue
        c, s = np.cos(theta), np.sin(theta)
        dy, dx = yy - cy, xx - cx
        u, v = c * dy + s * dx, -s * dy + c * dx
        mask = (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
        img[mask] = hus[codes[int(code)]]
        if code == 0:
            body = mask
    return img, body


def _streaks(shape: tuple[int, int], rng: np.random.Generator, count: int, amplitude: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy -= (h - 1) / 2
    xx -= (w - 1) / 2
    out = np.zeros(shape)
    for _ in range(count):
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(0.5, 1.0) * amplitude * rng.choice([-1.0, 1.0])
        dist = np.abs(-np.sin(angle) * xx + np.cos(angle) * yy)
        out[dist <= 0.5] += offset
    return out


def generate_phantom_patient(params: PhantomParams, patient_id: str, center_id: str = "center0") -> PatientVolumePair:
    """Build one CT phantom and its artifacted CBCT; deterministic in (seed, patient_id)."""
    rng = _rng(params.seed, patient_id)
    depth = int(rng.integers(params.depth_range[0], params.depth_range[1] + 1))
    h = int(rng.integers(params.height_range[0], params.height_range[1] + 1))
    w = int(rng.integers(params.width_range[0], params.width_range[1] + 1))
    top = _keyframe(rng, upper=True)
    bottom = _keyframe(rng, upper=False)

    ct = np.empty((depth, h, w), dtype=np.float64)
    bodies = np.empty((depth, h, w), dtype=bool)
    for k in range(depth):
        t = k / (depth - 1) if depth > 1 else 0.0
        img, body = _paint((h, w), (1 - t) * top + t * bottom, params.tissue_hus)
        if params.smooth_sigma > 0:
            img = ndimage.gaussian_filter(img, params.smooth_sigma, mode="nearest")
        ct[k], bodies[k] = img, body

    cbct = ct.copy()
    art_rng = _rng(params.seed, patient_id, "cbct")
    if params.cupping_amplitude:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        r2 = ((yy - (h - 1) / 2) / (h / 2)) ** 2 + ((xx - (w - 1) / 2) / (w / 2)) ** 2
        cbct -= params.cupping_amplitude * np.minimum(r2, 1.0)[None] * bodies
    if params.streak_count:
        for k in range(depth):
            cbct[k] += _streaks((h, w), art_rng, params.streak_count, params.streak_amplitude)
    if params.noise_sigma:
        cbct += art_rng.normal(0.0, params.noise_sigma, size=cbct.shape)
    cbct += params.intensity_shift

    return PatientVolumePair(
        patient_id=patient_id,
        cbct=cbct.astype(np.float32),
        ct=ct.astype(np.float32),
        center_id=center_id,
        meta={"source": "phantom", "seed": params.seed},
    )


def inject_anomaly(pair: PatientVolumePair, kind: AnomalyKind | str, seed: int = 0) -> PatientVolumePair:
    kind = AnomalyKind(kind)
    cbct, ct = pair.cbct.copy(), pair.ct.copy()
    if kind is AnomalyKind.REVERSED_SLICE_ORDER:
        ct = ct[::-1].copy()
    elif kind is AnomalyKind.SWAPPED_MODALITIES:
        cbct, ct = ct, cbct
    else:
        rng = _rng(seed, pair.patient_id, "corrupt")
        depth = pair.depth
        n_bad = max(1, int(round(depth * rng.uniform(0.4, 0.6))))
        bad = np.sort(rng.choice(depth, size=min(n_bad, depth), replace=False))
        shape = (bad.size,) + pair.ct.shape[1:]
        cbct[bad] = rng.uniform(-1000.0, 2000.0, size=shape)
        ct[bad] = rng.uniform(-1000.0, 2000.0, size=shape)
    meta = dict(pair.meta, anomaly=kind.value)
    return PatientVolumePair(pair.patient_id, cbct, ct, pair.center_id, meta)


def generate_cohort(
    n: int,
    corrupt_fraction: float,
    params: PhantomParams,
    seed: int = 0,
    centers: Sequence[str] = ("center0", "center1", "center2"),
) -> tuple[list[PatientVolumePair], dict[str, AnomalyKind | None]]:
    """Generate ``n`` phantom patients, ``round(n * corrupt_fraction)`` of them anomalous.

    Returns the cohort and a ``patient_id -> anomaly kind (or None)`` truth map.
    """
    if n <= 0:
        raise ParameterError("cohort size must be positive")
    if not 0.0 <= corrupt_fraction <= 1.0:
        raise ParameterError("corrupt_fraction must lie in [0, 1]")
    n_bad = int(np.floor(n * corrupt_fraction + 0.5))
    rng = _rng(seed, "cohort")
    bad = set(rng.choice(n, size=n_bad, replace=False).tolist())
    kinds = list(AnomalyKind)
    cohort: list[PatientVolumePair] = []
    labels: dict[str, AnomalyKind | None] = {}
    for i in range(n):
        pid = f"P{i:03d}"
        pair = generate_phantom_patient(replace(params, seed=params.seed + seed), pid, centers[i % len(centers)])
        label = None
        if i in bad:
            label = kinds[int(rng.integers(len(kinds)))]
            pair = inject_anomaly(pair, label, seed)
        cohort.append(pair)
        labels[pid] = label
    return cohort, labels
