"""Named 3D target points in CT coordinates, stored as ``name,x_mm,y_mm,z_mm`` CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyLandmarks, FormatError


@dataclass(frozen=True)
class LandmarkSet:
    names: tuple[str, ...]
    points_mm: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        pts = np.array(self.points_mm, dtype=float).reshape(-1, 3)
        if len(names) != len(pts):
            raise ValueError("one name per landmark required")
        if len(set(names)) != len(names):
            raise ValueError("landmark names must be unique")
        pts.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "points_mm", pts)

    @classmethod
    def from_pairs(cls, pairs) -> LandmarkSet:
        pairs = list(pairs)
        return cls(tuple(n for n, _ in pairs), np.array([p for _, p in pairs], dtype=float))

    def __len__(self):
        return len(self.names)

    def require_nonempty(self):
        if len(self) == 0:
            raise EmptyLandmarks("landmark set is empty")


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "x_mm", "y_mm", "z_mm"])
        for name, p in zip(landmarks.names, landmarks.points_mm):
            w.writerow([name] + [repr(float(v)) for v in p])


def load_landmarks(path) -> LandmarkSet:
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
    if not rows or [c.strip() for c in rows[0]] != ["name", "x_mm", "y_mm", "z_mm"]:
        raise FormatError(f"{path}: expected header name,x_mm,y_mm,z_mm")
    pairs = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise FormatError(f"{path}:{i}: expected 4 fields, got {len(row)}")
        try:
            pairs.append((row[0].strip(), [float(v) for v in row[1:]]))
        except ValueError:
            raise FormatError(f"{path}:{i}: non-numeric coordinate") from None
    if not pairs:
        return LandmarkSet((), np.zeros((0, 3)))
    return LandmarkSet.from_pairs(pairs)
