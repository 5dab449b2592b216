"""Paired CBCT/CT volumes: disk I/O, HU normalization, slicing and splits.

Volumes are stored as ``(depth, height, width)`` arrays in Hounsfield Units.
A patient directory holds ``cbct.f32`` and ``ct.f32`` (raw little-endian
float32, C order) plus a ``meta.json`` sidecar describing the shape.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import IntegrityError, LoadError, ParameterError

DEFAULT_WINDOW: tuple[float, float] = (-1000.0, 2000.0)
# slice-count range of the SynthRAD pelvis/brain volumes; loading only checks it on request
SYNTHRAD_DEPTH_BOUNDS: tuple[int, int] = (50, 105)
DEFAULT_SPLIT_SIZES: tuple[int, int, int] = (35, 15, 10)

_RAW_DTYPE = np.dtype("<f4")


@dataclass
class PatientVolumePair:
    """One patient's registered CBCT and CT volumes."""

    patient_id: str
    cbct: np.ndarray
    ct: np.ndarray
    center_id: str = "center0"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.cbct = np.asarray(self.cbct)
        self.ct = np.asarray(self.ct)
        validate_pair(self)

    @property
    def depth(self) -> int:
        return int(self.ct.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.ct.shape)  # type: ignore[return-value]


@dataclass
class NormalizedVolume:
    data: np.ndarray
    window: tuple[float, float]


@dataclass
class SlicePair:
    patient_id: str
    slice_index: int
    cbct_slice: np.ndarray
    ct_slice: np.ndarray

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(s) for s in self.cbct_slice.shape)  # type: ignore[return-value]


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]

    def __post_init__(self) -> None:
        groups = [set(self.train), set(self.validation), set(self.test)]
        total = len(self.train) + len(self.validation) + len(self.test)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise IntegrityError("split lists overlap or contain duplicates")

    def to_dict(self) -> dict[str, list[str]]:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "DatasetSplit":
        extra = set(payload) - {"train", "validation", "test"}
        if extra:
            raise ParameterError(f"unknown split keys: {sorted(extra)}")
        return cls(
            train=list(payload.get("train", [])),
            validation=list(payload.get("validation", [])),
            test=list(payload.get("test", [])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSplit":
        try:
            payload = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise LoadError(f"split file not found: {path}") from exc
        return cls.from_dict(payload)


def validate_pair(pair: PatientVolumePair, depth_bounds: tuple[int, int] | None = None) -> None:
    """Raise :class:`IntegrityError` if ``pair`` violates the volume invariants."""
    if pair.cbct.ndim != 3 or pair.ct.ndim != 3:
        raise IntegrityError(f"{pair.patient_id}: volumes must be 3D")
    if pair.cbct.shape[0] != pair.ct.shape[0]:
        raise IntegrityError(
            f"{pair.patient_id}: depth mismatch cbct={pair.cbct.shape[0]} ct={pair.ct.shape[0]}"
        )
    if pair.cbct.shape != pair.ct.shape:
        raise IntegrityError(f"{pair.patient_id}: in-plane dims differ {pair.cbct.shape} vs {pair.ct.shape}")
    if pair.ct.shape[0] == 0:
        raise IntegrityError(f"{pair.patient_id}: empty volume")
    if depth_bounds is not None:
        lo, hi = depth_bounds
        if not lo <= pair.ct.shape[0] <= hi:
            raise IntegrityError(f"{pair.patient_id}: depth {pair.ct.shape[0]} outside {depth_bounds}")


def save_patient(pair: PatientVolumePair, root: str | Path) -> Path:
    """Write ``pair`` in the patient directory layout under ``root``."""
    out = Path(root) / pair.patient_id
    out.mkdir(parents=True, exist_ok=True)
    depth, height, width = pair.shape
    pair.cbct.astype(_RAW_DTYPE).tofile(out / "cbct.f32")
    pair.ct.astype(_RAW_DTYPE).tofile(out / "ct.f32")
    meta = {"depth": depth, "height": height, "width": width, "center_id": pair.center_id}
    meta.update({k: v for k, v in pair.meta.items() if k not in meta})
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def load_patient(path: str | Path, depth_bounds: tuple[int, int] | None = None) -> PatientVolumePair:
    """Load one patient directory.

    Raises:
        LoadError: a volume or the sidecar is missing.
        IntegrityError: raw sizes disagree with the sidecar, or depths differ.
    """
    path = Path(path)
    meta_path = path / "meta.json"
    for name in ("cbct.f32", "ct.f32"):
        if not (path / name).is_file():
            raise IntegrityError(f"{path.name}: missing modality file {name}")
    if not meta_path.is_file():
        raise LoadError(f"{path.name}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    try:
        height, width = int(meta["height"]), int(meta["width"])
    except KeyError as exc:
        raise IntegrityError(f"{path.name}: meta.json lacks {exc}") from exc

    def read(name: str) -> np.ndarray:
        raw = np.fromfile(path / name, dtype=_RAW_DTYPE)
        plane = height * width
        if plane == 0 or raw.size % plane:
            raise IntegrityError(f"{path.name}/{name}: {raw.size} values is not a whole number of {height}x{width} slices")
        return raw.reshape(-1, height, width).astype(np.float32)

    cbct, ct = read("cbct.f32"), read("ct.f32")
    if cbct.shape[0] != ct.shape[0]:
        raise IntegrityError(f"{path.name}: depth mismatch cbct={cbct.shape[0]} ct={ct.shape[0]}")
    if "depth" in meta and int(meta["depth"]) != ct.shape[0]:
        raise IntegrityError(f"{path.name}: meta depth {meta['depth']} != stored {ct.shape[0]}")
    extra = {k: v for k, v in meta.items() if k not in {"depth", "height", "width", "center_id"}}
    pair = PatientVolumePair(
        patient_id=path.name,
        cbct=cbct,
        ct=ct,
        center_id=str(meta.get("center_id", "center0")),
        meta=extra,
    )
    validate_pair(pair, depth_bounds)
    return pair


def list_patient_dirs(root: str | Path) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if (p / "meta.json").is_file())


def _check_window(window: Sequence[float]) -> tuple[float, float]:
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ParameterError(f"degenerate HU window {window}")
    return lo, hi


def normalize_hu(volume: np.ndarray, window: Sequence[float] = DEFAULT_WINDOW) -> NormalizedVolume:
    """Clip to ``window`` and map linearly so the window ends land on -1 and +1."""
    lo, hi = _check_window(window)
    v = np.clip(np.asarray(volume, dtype=np.float64), lo, hi)
    return NormalizedVolume(data=2.0 * (v - lo) / (hi - lo) - 1.0, window=(lo, hi))


def denormalize(value, window: Sequence[float] = DEFAULT_WINDOW):
    """Inverse of :func:`normalize_hu` for values in [-1, 1]."""
    lo, hi = _check_window(window)
    v = np.asarray(value, dtype=np.float64)
    if np.any(v < -1.0) or np.any(v > 1.0):
        raise ParameterError("normalized values must lie in [-1, 1]")
    out = (v + 1.0) * 0.5 * (hi - lo) + lo
    return float(out) if out.ndim == 0 else out


def slice_pairs(pair: PatientVolumePair, window: Sequence[float] = DEFAULT_WINDOW) -> list[SlicePair]:
    """Split a volume pair into normalized 2D slice pairs, in depth order."""
    validate_pair(pair)
    cbct = normalize_hu(pair.cbct, window).data.astype(np.float32)
    ct = normalize_hu(pair.ct, window).data.astype(np.float32)
    return [
        SlicePair(pair.patient_id, k, cbct[k], ct[k])
        for k in range(pair.depth)
    ]


def _allocate(total: int, counts: Mapping[str, int]) -> dict[str, int]:
    """Largest-remainder allocation of ``total`` across groups, capped by group size."""
    population = sum(counts.values())
    if total == 0 or population == 0:
        return {k: 0 for k in counts}
    quotas = {k: total * n / population for k, n in counts.items()}
    alloc = {k: min(int(np.floor(q)), counts[k]) for k, q in quotas.items()}
    order = sorted(counts, key=lambda k: (-(quotas[k] - np.floor(quotas[k])), k))
    while sum(alloc.values()) < total:
        for k in order:
            if sum(alloc.values()) == total:
                break
            if alloc[k] < counts[k]:
                alloc[k] += 1
    return alloc


def split_dataset(
    patients: Iterable[str] | Iterable[PatientVolumePair],
    sizes: Sequence[int | None] = DEFAULT_SPLIT_SIZES,
    seed: int = 0,
    centers: Mapping[str, str] | None = None,
) -> DatasetSplit:
    """Seeded train/validation/test split, stratified by data center.

    ``sizes[2] = None`` puts every patient not used for training or
    validation into the test list (the 100-patient test setting).
    """
    ids: list[str] = []
    center_of: dict[str, str] = dict(centers or {})
    for p in patients:
        if isinstance(p, PatientVolumePair):
            ids.append(p.patient_id)
            center_of.setdefault(p.patient_id, p.center_id)
        else:
            ids.append(str(p))
    if len(set(ids)) != len(ids):
        raise ParameterError("duplicate patient ids")
    n_train, n_val, n_test = sizes
    n_test = len(ids) - n_train - n_val if n_test is None else n_test
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test > len(ids):
        raise ParameterError(f"split sizes {tuple(sizes)} exceed population {len(ids)}")

    by_center: dict[str, list[str]] = {}
    for pid in sorted(ids):
        by_center.setdefault(center_of.get(pid, "center0"), []).append(pid)
    pools: dict[str, list[str]] = {}
    for c in sorted(by_center):
        rng = np.random.default_rng([seed, zlib.crc32(c.encode())])
        members = by_center[c]
        pools[c] = [members[i] for i in rng.permutation(len(members))]

    out: list[list[str]] = []
    for n in (n_train, n_val, n_test):
        alloc = _allocate(n, {c: len(pool) for c, pool in pools.items()})
        chosen: list[str] = []
        for c in sorted(pools):
            chosen.extend(pools[c][: alloc[c]])
            pools[c] = pools[c][alloc[c]:]
        out.append(sorted(chosen))
    return DatasetSplit(train=out[0], validation=out[1], test=out[2])
