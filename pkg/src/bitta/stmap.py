"""Sliding-window spatial-temporal maps built from region traces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import interp_matrix

DELTA_MAX_FULL = 59


@dataclass
class STMapWindow:
    values: np.ndarray  # (W, H', C) in [0, 1]
    t0: int
    gt_hr: float  # evaluation only
    stream_id: str = ""

    @property
    def shape(self):
        return self.values.shape


def normalize_rows(segment: np.ndarray) -> np.ndarray:
    """Min-max scale every (region, channel) column of a (W, H, C) segment.

    Constant columns map to 0.5.
    """
    lo = segment.min(axis=0, keepdims=True)
    hi = segment.max(axis=0, keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (segment - lo) / np.where(flat, 1.0, span)
    out = np.where(flat, 0.5, out)
    return np.clip(out, 0.0, 1.0)


def build_window(data: np.ndarray, t0: int, W: int, H_out: int, hr_trace=None, stream_id: str = "") -> STMapWindow:
    n, h, _ = data.shape
    if t0 < 0 or W < 1 or t0 + W > n:
        raise IndexError(f"window [{t0}, {t0 + W}) outside stream of {n} frames")
    norm = normalize_rows(np.asarray(data[t0 : t0 + W], dtype=np.float64))
    if H_out != h:
        m = interp_matrix(h, H_out)
        norm = np.einsum("oh,whc->woc", m, norm)
        np.clip(norm, 0.0, 1.0, out=norm)
    gt = float(np.mean(hr_trace[t0 : t0 + W])) if hr_trace is not None else float("nan")
    return STMapWindow(norm, t0, gt, stream_id)


def shifted_pair(data, t0, W, H_out, delta_max, rng: np.random.Generator, hr_trace=None, delta=None):
    """Window at ``t0`` and its twin at ``t0 - delta``, delta ~ U{1..delta_max}.

    ``delta`` overrides the draw (0 yields two identical windows).
    """
    if t0 < delta_max:
        raise IndexError(f"t0={t0} is smaller than delta_max={delta_max}")
    if delta is None:
        delta = int(rng.integers(1, delta_max + 1))
    a = build_window(data, t0, W, H_out, hr_trace)
    b = build_window(data, t0 - delta, W, H_out, hr_trace)
    return a, b, delta
