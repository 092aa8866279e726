"""Intensity similarity between a fixed X-ray and a rendered DRR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput

DEFAULT_BINS = 32
METRICS = ("cc", "nmi")


def _values(img) -> np.ndarray:
    px = getattr(img, "pixels", img)
    return np.asarray(px, dtype=np.float64).ravel()


def _check_pair(a, b):
    va, vb = _values(a), _values(b)
    if np.shape(getattr(a, "pixels", a)) != np.shape(getattr(b, "pixels", b)):
        raise ValueError("images must have equal dimensions")
    return va, vb


def ncc(a, b) -> float:
    """Pearson correlation of all pixel pairs, in [-1, 1]."""
    va, vb = _check_pair(a, b)
    da = va - va.mean()
    db = vb - vb.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise DegenerateInput("cross-correlation of a constant image is undefined")
    r = float(np.dot(da, db) / (sa * sb))
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class JointHistogram:
    """``counts[i, j]`` pairs bin ``i`` of image A with bin ``j`` of image B."""

    bins: int
    counts: np.ndarray
    range_a: tuple[float, float]
    range_b: tuple[float, float]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def marginal_a(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def marginal_b(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def bin_indices(values: np.ndarray, bins: int) -> tuple[np.ndarray, tuple[float, float]]:
    """Linear binning over the values' own [min, max]; the max lands in the top bin."""
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        raise DegenerateInput("cannot bin a constant image")
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    return idx, (lo, hi)


def joint_histogram(a, b, bins: int = DEFAULT_BINS) -> JointHistogram:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    va, vb = _check_pair(a, b)
    ia, ra = bin_indices(va, bins)
    ib, rb = bin_indices(vb, bins)
    counts = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    return JointHistogram(bins, counts, ra, rb)


def entropy(counts: np.ndarray) -> float:
    """Shannon entropy (nats) of a count array; empty bins contribute nothing."""
    c = np.asarray(counts, dtype=np.float64).ravel()
    p = c[c > 0] / c.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(a, b, bins: int = DEFAULT_BINS) -> float:
    """``(H(A) + H(B)) / H(A, B)``, in [1, 2]."""
    h = joint_histogram(a, b, bins)
    h_joint = entropy(h.counts)
    if h_joint == 0:
        raise DegenerateInput("joint entropy is zero")
    return (entropy(h.marginal_a) + entropy(h.marginal_b)) / h_joint


def similarity(metric: str, a, b, bins: int = DEFAULT_BINS) -> float:
    if metric == "cc":
        return ncc(a, b)
    if metric == "nmi":
        return nmi(a, b, bins)
    raise ValueError(f"unknown metric {metric!r}; valid options: {', '.join(METRICS)}")
