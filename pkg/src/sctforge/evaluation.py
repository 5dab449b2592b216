"""Metrics, per-volume reports, checkpoint sweeps and visual exports.

All metrics are computed on the normalized [-1, 1] scale, so the data
range is 2 and ``psnr = 10 log10(4 / mse)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image
from skimage.metrics import structural_similarity
from torch import nn

from .cleaning import DEFAULT_BANDWIDTH, KdeCurve, hu_kde, kde_distance
from .data import DEFAULT_WINDOW, PatientVolumePair, SlicePair, denormalize, slice_pairs
from .errors import ExportError, ParameterError
from .models import generate_sct
from .padding import constant_pad_to_factor, crop_to_original
from .trainer import CheckpointKey, CheckpointStore, restore_state

DATA_RANGE = 2.0


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    mae: float
    mse: float
    scope: str = "slice"
    n: int = 1
    # PSNR of the mean MSE; differs from ``psnr`` (mean of slice PSNRs) above slice scope
    psnr_of_mean_mse: float | None = None
    patient_id: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k in ("psnr", "psnr_of_mean_mse"):
            if d[k] is not None and math.isinf(d[k]):
                d[k] = "inf"
        return d


def psnr_from_mse(mse: float, data_range: float = DATA_RANGE) -> float:
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03) over data range 2.

    Slices smaller than 11 px use a smaller odd window. 3D inputs are scored slice by slice and averaged.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 3:
        return float(np.mean([ssim(p, t) for p, t in zip(pred, target)]))
    if np.array_equal(pred, target):
        return 1.0
    side = min(pred.shape)
    if side < 3:
        raise ParameterError(f"SSIM needs slices of at least 3x3, got {pred.shape}")
    # below 11 px the window shrinks to the largest odd size that fits
    win = None if side >= 11 else side - (1 - side % 2)
    return float(structural_similarity(
        pred, target, data_range=DATA_RANGE, gaussian_weights=True, sigma=1.5, win_size=win,
        use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def compute_metrics(pred: np.ndarray, target: np.ndarray) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ParameterError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    mse = float(np.mean(diff * diff))
    mae = float(np.mean(np.abs(diff)))
    p = psnr_from_mse(mse)
    return MetricReport(p, ssim(pred, target), mae, mse, "slice", 1, p)


def _mean_report(reports: Sequence[MetricReport], scope: str, patient_id: str | None = None) -> MetricReport:
    mse = float(np.mean([r.mse for r in reports]))
    return MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
        mse=mse,
        scope=scope,
        n=len(reports),
        psnr_of_mean_mse=psnr_from_mse(mse),
        patient_id=patient_id,
    )


def aggregate(volume_reports: Sequence[MetricReport]) -> MetricReport:
    """Unweighted mean over volumes."""
    if not volume_reports:
        raise ParameterError("nothing to aggregate")
    if len(volume_reports) == 1:
        r = volume_reports[0]
        return MetricReport(r.psnr, r.ssim, r.mae, r.mse, "aggregate", 1, r.psnr_of_mean_mse)
    return _mean_report(volume_reports, "aggregate")


def predict_slice(model: nn.Module, cbct_slice: np.ndarray) -> np.ndarray:
    """Pad to a multiple of 4 with normalized air, run the generator, crop back."""
    padded = constant_pad_to_factor(cbct_slice, 4)
    return crop_to_original(generate_sct(model, padded.data), like=padded)


def predict_volume(model: nn.Module, pair: PatientVolumePair, window=DEFAULT_WINDOW) -> np.ndarray:
    """Normalized sCT volume for every slice of ``pair``."""
    return np.stack([predict_slice(model, s.cbct_slice) for s in slice_pairs(pair, window)])


@dataclass
class Evaluation:
    aggregate: MetricReport
    volumes: list[MetricReport] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"aggregate": self.aggregate.to_dict(), "volumes": [v.to_dict() for v in self.volumes]}


def evaluate_model(model: nn.Module, patients: Sequence[PatientVolumePair], window=DEFAULT_WINDOW) -> Evaluation:
    """Per-volume metrics (mean over slices) and their unweighted mean."""
    if not patients:
        raise ParameterError("evaluate_model needs at least one patient")
    volumes = []
    for pair in patients:
        slices = slice_pairs(pair, window)
        reports = [compute_metrics(predict_slice(model, s.cbct_slice), s.ct_slice) for s in slices]
        volumes.append(_mean_report(reports, "volume", pair.patient_id))
    return Evaluation(aggregate(volumes), volumes)


# --------------------------------------------------------------------------- sweep & selection


@dataclass
class SweepTable:
    rows: list[dict[str, Any]]
    index_range: tuple[int, int]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["row", "checkpoint_key", "psnr", "ssim", "mae", "mse"])
            writer.writeheader()
            for i, r in enumerate(self.rows):
                writer.writerow({"row": i, **{k: r[k] for k in ("checkpoint_key", "psnr", "ssim", "mae", "mse")}})


def sweep_checkpoints(store: CheckpointStore, index_range: tuple[int, int], validation: Sequence[PatientVolumePair],
                      window=DEFAULT_WINDOW, epoch: int | None = None, pass_index: int = 1) -> SweepTable:
    """Evaluate the checkpoints saved after patients ``index_range`` (inclusive) on ``validation``.

    Row 0 is the first patient index of the range. ``epoch`` defaults to the
    last epoch in the store.
    """
    lo, hi = index_range
    if hi < lo:
        raise ParameterError(f"empty checkpoint range {index_range}")
    if epoch is None:
        epoch = max((k.epoch for k in store.keys()), default=1)
    rows = []
    for idx in range(lo, hi + 1):
        key = CheckpointKey(epoch, idx, pass_index)
        state = restore_state(store, key)
        ev = evaluate_model(state.generator, validation, window)
        a = ev.aggregate
        rows.append({"checkpoint_key": str(key), "patient_index": idx,
                     "psnr": a.psnr, "ssim": a.ssim, "mae": a.mae, "mse": a.mse})
    return SweepTable(rows, (lo, hi))


@dataclass
class Selection:
    checkpoint_key: str
    row: dict[str, Any]
    neighbors: list[str]
    rule: str
    note: str = ("Quantitative optimum only: inspect the exported triptychs of the selected and "
                 "neighbouring checkpoints, since good scores can coexist with visibly degraded images.")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def select_best(table: SweepTable, rule: str = "psnr") -> Selection:
    """Maximize ``rule`` (psnr by default); ties go to higher SSIM, then the earliest row."""
    if not table.rows:
        raise ParameterError("empty sweep table")
    lower_better = rule in ("mae", "mse")

    def score(i: int) -> tuple:
        r = table.rows[i]
        primary = -r[rule] if lower_better else r[rule]
        return (primary, r["ssim"], -i)

    best = max(range(len(table.rows)), key=score)
    neighbors = [table.rows[j]["checkpoint_key"] for j in (best - 1, best + 1) if 0 <= j < len(table.rows)]
    return Selection(table.rows[best]["checkpoint_key"], table.rows[best], neighbors, rule)


# --------------------------------------------------------------------------- tissue KDE


@dataclass
class TissueComparison:
    ct: KdeCurve
    cbct: KdeCurve
    sct: KdeCurve
    sct_to_ct: float
    cbct_to_ct: float

    def plot_data(self) -> dict[str, list[float]]:
        return {"hu": self.ct.grid.tolist(), "ct": self.ct.density.tolist(),
                "cbct": self.cbct.density.tolist(), "sct": self.sct.density.tolist()}


def tissue_kde_compare(ct: np.ndarray, cbct: np.ndarray, sct: np.ndarray,
                       roi: tuple[float, float] | np.ndarray | None = None,
                       bandwidth: float = DEFAULT_BANDWIDTH, stride: int = 1) -> TissueComparison:
    """HU-space KDEs of CT, CBCT and sCT restricted to a region of interest.

    ``roi`` is either a boolean mask or an HU window applied to the CT (the
    region is where the CT falls inside the window). ``None`` uses every voxel.
    """
    ct, cbct, sct = (np.asarray(v, dtype=np.float64) for v in (ct, cbct, sct))
    if not ct.shape == cbct.shape == sct.shape:
        raise ParameterError("volumes must be aligned")
    if roi is None:
        mask = np.ones(ct.shape, dtype=bool)
    elif isinstance(roi, np.ndarray) and roi.dtype == bool:
        mask = roi
    else:
        lo, hi = roi
        mask = (ct >= lo) & (ct <= hi)
    if not mask.any():
        raise ParameterError("region of interest is empty")
    curves = [hu_kde(v[mask], bandwidth, stride=stride) for v in (ct, cbct, sct)]
    return TissueComparison(curves[0], curves[1], curves[2],
                            kde_distance(curves[2], curves[0]), kde_distance(curves[1], curves[0]))


def to_hu(volume: np.ndarray, window=DEFAULT_WINDOW) -> np.ndarray:
    return denormalize(np.clip(volume, -1.0, 1.0), window)


# --------------------------------------------------------------------------- exports


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Linear map [-1, 1] -> [0, 255]."""
    x = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def export_qualitative(model: nn.Module, pairs: Sequence[SlicePair], out_dir: str | Path,
                       tag: str = "model") -> list[Path]:
    """Write one CBCT | sCT | CT triptych PNG per slice pair."""
    out = Path(out_dir)
    paths = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for pair in pairs:
            sct = predict_slice(model, pair.cbct_slice)
            strip = np.concatenate([to_uint8(pair.cbct_slice), to_uint8(sct), to_uint8(pair.ct_slice)], axis=1)
            path = out / f"{pair.patient_id}_s{pair.slice_index:03d}_{tag}.png"
            Image.fromarray(strip, mode="L").save(path)
            paths.append(path)
    except OSError as exc:
        raise ExportError(f"cannot export to {out}: {exc}") from exc
    return paths


def export_loss_curves(series: dict[str, list[tuple[int, float, str]]], out_dir: str | Path,
                       plots: bool = True) -> list[Path]:
    """One ``<loss>.csv`` (step, value, patient_id) per loss, plus a line plot with patient boundaries."""
    if not series:
        raise ParameterError("no loss series to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rows in series.items():
        path = out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "value", "patient_id"])
            w.writerows(rows)
        written.append(path)
        if plots:
            written.append(_plot_series(name, rows, out / f"{name}.png"))
    return written


def _plot_series(name: str, rows: list[tuple[int, float, str]], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(steps, [r[1] for r in rows], lw=0.8)
    for i in range(1, len(rows)):
        if rows[i][2] != rows[i - 1][2]:
            ax.axvline(rows[i][0], color="0.8", lw=0.5)
    ax.set_xlabel("step")
    ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_json(payload: Any, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, default=_json_default))
    return path


def _json_default(o: Any) -> Any:
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
