"""Multi-stage padding.

Three stages bring variable-size slices through the generators intact:

1. reflection padding of every slice up to the batch's largest height/width,
2. constant padding (normalized air, -1) up to a multiple of 4,
3. per-layer constant padding planned from kernel, stride and the live
   input size, so stride-1 layers keep their size and stride-``s`` layers
   produce ``ceil(n / s)``.

Stages 1 and 2 record what they did in :class:`PaddedSlice` so
:func:`crop_to_original` can undo them exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import IntegrityError, ParameterError

AIR = -1.0


@dataclass(frozen=True)
class PadSpec:
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0
    mode: str = "constant"
    value: float = 0.0
    # pixels of the reflect request that had to fall back to edge repetition
    edge_fallback: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self) -> None:
        if min(self.top, self.bottom, self.left, self.right) < 0:
            raise ParameterError(f"negative pad amount in {self}")
        if self.mode not in ("constant", "reflect"):
            raise ParameterError(f"unknown pad mode {self.mode!r}")

    @property
    def total(self) -> tuple[int, int]:
        return self.top + self.bottom, self.left + self.right

    def torch_pad(self) -> tuple[int, int, int, int]:
        """Argument order for ``torch.nn.functional.pad`` on NCHW tensors."""
        return (self.left, self.right, self.top, self.bottom)

    def to_dict(self) -> dict[str, Any]:
        return {
            "top": self.top, "bottom": self.bottom, "left": self.left, "right": self.right,
            "mode": self.mode, "value": self.value, "edge_fallback": list(self.edge_fallback),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PadSpec":
        return cls(d["top"], d["bottom"], d["left"], d["right"], d["mode"], d.get("value", 0.0),
                   tuple(d.get("edge_fallback", (0, 0, 0, 0))))


@dataclass
class PaddedSlice:
    data: np.ndarray
    original_dims: tuple[int, int]
    applied: list[PadSpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        h, w = self.original_dims
        for spec in self.applied:
            dh, dw = spec.total
            h, w = h + dh, w + dw
        if tuple(self.data.shape[-2:]) != (h, w):
            raise IntegrityError(f"padded dims {self.data.shape[-2:]} disagree with metadata {(h, w)}")

    def to_dict(self) -> dict[str, Any]:
        """Pad metadata (not pixel data) for JSON caches."""
        return {"original_dims": list(self.original_dims), "applied": [s.to_dict() for s in self.applied]}


def _as_padded(x: np.ndarray | PaddedSlice) -> PaddedSlice:
    if isinstance(x, PaddedSlice):
        return x
    x = np.asarray(x)
    return PaddedSlice(x, tuple(int(s) for s in x.shape[-2:]), [])


def batch_max_dims(slices: Iterable[Any]) -> tuple[int, int]:
    """Componentwise max (height, width) over slices, slice pairs or dims tuples."""
    dims = []
    for s in slices:
        if isinstance(s, tuple) and len(s) == 2 and all(isinstance(v, (int, np.integer)) for v in s):
            dims.append(s)
        elif hasattr(s, "cbct_slice"):
            dims.append(s.cbct_slice.shape[-2:])
        else:
            dims.append(np.shape(s)[-2:])
    if not dims:
        raise ParameterError("batch_max_dims needs at least one slice")
    return int(max(d[0] for d in dims)), int(max(d[1] for d in dims))


def _split(total: int) -> tuple[int, int]:
    """Symmetric split; the odd pixel goes to the bottom/right."""
    return total // 2, total - total // 2


def _reflect_axis(a: np.ndarray, before: int, after: int, axis: int) -> tuple[np.ndarray, int, int]:
    n = a.shape[axis]
    rb, ra = min(before, n - 1), min(after, n - 1)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (rb, ra)
    out = np.pad(a, widths, mode="reflect") if (rb or ra) else a
    eb, ea = before - rb, after - ra
    if eb or ea:
        widths[axis] = (eb, ea)
        out = np.pad(out, widths, mode="edge")
    return out, eb, ea


def reflect_pad_to(slice_: np.ndarray | PaddedSlice, target: Sequence[int]) -> PaddedSlice:
    """Mirror-pad (edge sample not repeated) up to ``target`` (h, w).

    When a side needs at least as many pixels as the slice has, the part that
    reflection cannot supply is filled by edge repetition and recorded in
    ``PadSpec.edge_fallback``.
    """
    p = _as_padded(slice_)
    h, w = p.data.shape[-2:]
    th, tw = int(target[0]), int(target[1])
    if th < h or tw < w:
        raise ParameterError(f"target {(th, tw)} smaller than slice {(h, w)}")
    top, bottom = _split(th - h)
    left, right = _split(tw - w)
    out, et, eb = _reflect_axis(p.data, top, bottom, p.data.ndim - 2)
    out, el, er = _reflect_axis(out, left, right, p.data.ndim - 1)
    spec = PadSpec(top, bottom, left, right, "reflect", 0.0, (et, eb, el, er))
    return PaddedSlice(out, p.original_dims, p.applied + [spec])


def constant_pad_to_factor(slice_: np.ndarray | PaddedSlice, factor: int = 4, value: float = AIR) -> PaddedSlice:
    """Round each dim up to the next multiple of ``factor`` with a constant border."""
    if factor < 1:
        raise ParameterError("factor must be >= 1")
    p = _as_padded(slice_)
    h, w = p.data.shape[-2:]
    top, bottom = _split(-h % factor)
    left, right = _split(-w % factor)
    spec = PadSpec(top, bottom, left, right, "constant", float(value))
    widths = [(0, 0)] * (p.data.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(p.data, widths, mode="constant", constant_values=value)
    return PaddedSlice(out, p.original_dims, p.applied + [spec])


def crop_to_original(padded: PaddedSlice | np.ndarray, like: PaddedSlice | None = None) -> np.ndarray:
    """Undo every recorded pad, last first.

    ``like`` supplies the metadata when ``padded`` is a bare array that went
    through a dims-preserving transform (e.g. a generator forward pass).
    """
    if isinstance(padded, PaddedSlice):
        data, meta = padded.data, padded
    else:
        if like is None:
            raise IntegrityError("bare array needs pad metadata via `like`")
        data, meta = np.asarray(padded), like
    h, w = data.shape[-2:]
    for spec in reversed(meta.applied):
        dh, dw = spec.total
        if dh > h or dw > w:
            raise IntegrityError("pad metadata exceeds data dims")
        data = data[..., spec.top:h - spec.bottom, spec.left:w - spec.right]
        h, w = h - dh, w - dw
    if (h, w) != tuple(meta.original_dims):
        raise IntegrityError(f"cropped dims {(h, w)} != original {tuple(meta.original_dims)}")
    return data


def plan_layer_padding(kernel: int | Sequence[int], stride: int | Sequence[int], in_dims: Sequence[int],
                       value: float = 0.0) -> PadSpec:
    """Constant pad that makes a conv produce ``ceil(in / stride)`` per axis.

    For stride 1 this is ``k - 1`` total (dims preserved); even kernels put
    the extra pixel on the bottom/right.
    """
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if min(kh, kw, sh, sw) < 1:
        raise ParameterError("kernel and stride must be >= 1")

    def total(n: int, k: int, s: int) -> int:
        return max((math.ceil(n / s) - 1) * s + k - n, 0)

    top, bottom = _split(total(int(in_dims[0]), kh, sh))
    left, right = _split(total(int(in_dims[1]), kw, sw))
    return PadSpec(top, bottom, left, right, "constant", float(value))


def conv_output_dims(in_dims: Sequence[int], kernel: int, stride: int, pad: PadSpec) -> tuple[int, int]:
    dh, dw = pad.total
    return ((in_dims[0] + dh - kernel) // stride + 1, (in_dims[1] + dw - kernel) // stride + 1)


def prepare_batch(slices: Sequence[np.ndarray], factor: int = 4, value: float = AIR) -> list[PaddedSlice]:
    """Stages 1 and 2 for one training batch."""
    target = batch_max_dims(slices)
    return [constant_pad_to_factor(reflect_pad_to(s, target), factor, value) for s in slices]
