"""KDE-based cleaning of CBCT/CT pairs against a held-out reference pair.

A pair is summarized by three Gaussian KDEs over fixed HU grids: the CBCT
values, the CT values, and the voxelwise residual CBCT - CT. Marginal KDEs
ignore slice order, so the residual curve is what exposes a reversed or
mis-paired CT: for a registered pair it is a narrow artifact peak, for a
broken one it smears across the anatomy's HU differences. A candidate far
from the reference gets re-pairing repairs (reverse the CT slice order,
swap modalities, both) before it is discarded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PatientVolumePair
from .errors import ParameterError

DEFAULT_GRID = np.arange(-1100.0, 2100.0 + 1e-9, 10.0)
DEFAULT_BANDWIDTH = 25.0
DEFAULT_THRESHOLD = 0.5
DEFAULT_STRIDE = 8
# CBCT minus CT spans roughly twice the HU range
RESIDUAL_GRID = np.arange(-3100.0, 3100.0 + 1e-9, 10.0)

_CHUNK = 4096


@dataclass
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass
class CleanDecision:
    patient_id: str
    status: str  # kept | repaired | discarded
    distance: float
    repair: str | None = None

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "status": self.status,
                "distance": self.distance, "repair": self.repair}


@dataclass
class ReferenceKde:
    cbct: KdeCurve
    ct: KdeCurve
    residual: KdeCurve


def _linear_bin(samples: np.ndarray, lo: float, step: float, n: int) -> np.ndarray:
    pos = (samples - lo) / step
    pos = pos[(pos >= 0) & (pos <= n - 1)]
    left = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = pos - left
    counts = np.bincount(left, weights=1.0 - frac, minlength=n)
    counts += np.bincount(left + 1, weights=frac, minlength=n)
    return counts


def hu_kde(volume: np.ndarray, bandwidth: float = DEFAULT_BANDWIDTH, grid: np.ndarray | None = None,
           stride: int = DEFAULT_STRIDE) -> KdeCurve:
    """Gaussian KDE of HU values over ``grid``, normalized to unit trapezoid mass.

    Uses every ``stride``-th voxel of the C-ordered volume. Samples are
    linearly binned onto a lattice ten times finer than ``min(grid step,
    bandwidth)`` before the kernel sum, which keeps the cost independent of
    the voxel count; values further than 8 bandwidths from the grid are dropped.
    """
    if bandwidth <= 0:
        raise ParameterError("bandwidth must be positive")
    values = np.asarray(volume, dtype=np.float64).ravel()
    if values.size == 0:
        raise ParameterError("cannot estimate a density from an empty volume")
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    samples = values[::max(int(stride), 1)]
    step = min(float(np.min(np.diff(grid))) if grid.size > 1 else bandwidth, bandwidth) / 10.0
    lo, hi = grid[0] - 8 * bandwidth, grid[-1] + 8 * bandwidth
    n = int(np.ceil((hi - lo) / step)) + 1
    counts = _linear_bin(samples, lo, step, n)
    nz = np.nonzero(counts)[0]
    centers = lo + step * nz
    density = np.zeros_like(grid)
    for start in range(0, nz.size, _CHUNK):
        z = (grid[None, :] - centers[start:start + _CHUNK, None]) / bandwidth
        density += counts[nz[start:start + _CHUNK]] @ np.exp(-0.5 * z * z)
    mass = np.trapezoid(density, grid)
    if not mass > 0:
        raise ParameterError("all samples fall outside the KDE grid")
    return KdeCurve(grid.copy(), density / mass)


def kde_distance(a: KdeCurve, b: KdeCurve) -> float:
    """L1 distance between densities on a shared grid; lies in [0, 2]."""
    if a.grid.shape != b.grid.shape or not np.array_equal(a.grid, b.grid):
        raise ParameterError("KDE curves are on different grids")
    return float(np.trapezoid(np.abs(a.density - b.density), a.grid))


def build_reference(pair: PatientVolumePair, bandwidth: float = DEFAULT_BANDWIDTH,
                    stride: int = DEFAULT_STRIDE) -> ReferenceKde:
    """KDEs of a held-out reference pair: CBCT, CT and their voxelwise residual."""
    return ReferenceKde(*_pair_curves(pair.cbct, pair.ct, bandwidth, stride))


def _pair_curves(cbct: np.ndarray, ct: np.ndarray, bandwidth: float, stride: int
                 ) -> tuple[KdeCurve, KdeCurve, KdeCurve]:
    residual = np.asarray(cbct, dtype=np.float64) - np.asarray(ct, dtype=np.float64)
    return (hu_kde(cbct, bandwidth, stride=stride),
            hu_kde(ct, bandwidth, stride=stride),
            hu_kde(residual, bandwidth, RESIDUAL_GRID, stride=stride))


def pair_distance(cbct: np.ndarray, ct: np.ndarray, reference: ReferenceKde,
                  bandwidth: float = DEFAULT_BANDWIDTH, stride: int = DEFAULT_STRIDE) -> float:
    """Largest of the CBCT, CT and residual KDE distances to the reference."""
    curves = _pair_curves(cbct, ct, bandwidth, stride)
    refs = (reference.cbct, reference.ct, reference.residual)
    return max(kde_distance(c, r) for c, r in zip(curves, refs))


_REPAIRS = (
    ("reverse", lambda cb, ct: (cb, ct[::-1])),
    ("swap", lambda cb, ct: (ct, cb)),
    ("reverse+swap", lambda cb, ct: (ct[::-1], cb)),
)


def classify_pair(pair: PatientVolumePair, reference: ReferenceKde, threshold: float = DEFAULT_THRESHOLD,
                  bandwidth: float = DEFAULT_BANDWIDTH, stride: int = DEFAULT_STRIDE
                  ) -> tuple[CleanDecision, PatientVolumePair | None]:
    """Keep, repair or discard ``pair``.

    Returns the decision and the (possibly repaired) pair, or ``None`` when
    it is discarded. Repairs are tried in a fixed order; the first one that
    brings the distance under ``threshold`` wins.
    """
    d0 = pair_distance(pair.cbct, pair.ct, reference, bandwidth, stride)
    if d0 <= threshold:
        return CleanDecision(pair.patient_id, "kept", d0), pair
    for name, fix in _REPAIRS:
        cbct, ct = fix(pair.cbct, pair.ct)
        d = pair_distance(cbct, ct, reference, bandwidth, stride)
        if d <= threshold:
            meta = dict(pair.meta, repair=name)
            fixed = PatientVolumePair(pair.patient_id, np.ascontiguousarray(cbct), np.ascontiguousarray(ct),
                                      pair.center_id, meta)
            return CleanDecision(pair.patient_id, "repaired", d, name), fixed
    return CleanDecision(pair.patient_id, "discarded", d0), None


def clean_cohort(cohort: Sequence[PatientVolumePair], reference: ReferenceKde,
                 threshold: float = DEFAULT_THRESHOLD, bandwidth: float = DEFAULT_BANDWIDTH,
                 stride: int = DEFAULT_STRIDE, log_path: str | Path | None = None
                 ) -> tuple[list[PatientVolumePair], list[CleanDecision]]:
    """Classify every pair. Kept/repaired pairs come back in input order; the log is sorted by id."""
    if not cohort:
        raise ParameterError("empty cohort")
    kept: list[PatientVolumePair] = []
    decisions: list[CleanDecision] = []
    for pair in cohort:
        decision, out = classify_pair(pair, reference, threshold, bandwidth, stride)
        decisions.append(decision)
        if out is not None:
            kept.append(out)
    decisions.sort(key=lambda d: d.patient_id)
    if log_path is not None:
        Path(log_path).write_text(json.dumps([d.to_dict() for d in decisions], indent=2))
    return kept, decisions
