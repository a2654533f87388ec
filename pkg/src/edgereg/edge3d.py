"""3D edge points from depth and reflectance discontinuities along scan rings."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import PointCloud
from .errors import ContractError

DEPTH, REFLECT, BOTH = 1, 2, 3
PROVENANCE_NAMES = {DEPTH: "depth", REFLECT: "reflectance", BOTH: "both"}
MODES = ("depth", "reflect", "both")


@dataclass(frozen=True)
class ScanRing:
    start: int
    end: int  # exclusive

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class EdgePointSet:
    points: np.ndarray      # (N, 4) rows copied from the source cloud
    indices: np.ndarray     # (N,) source indices, ascending
    provenance: np.ndarray  # (N,) DEPTH / REFLECT / BOTH

    def __len__(self) -> int:
        return len(self.indices)

    def to_csv(self, path: str | Path) -> None:
        lines = ["x,y,z,reflectance,provenance"]
        for row, flag in zip(self.points, self.provenance):
            lines.append(",".join(f"{v:.9g}" for v in row) + f",{PROVENANCE_NAMES[int(flag)]}")
        Path(path).write_text("\n".join(lines) + "\n")


def segment_rings(cloud: PointCloud) -> list[ScanRing]:
    """Split a scan-ordered cloud into rings at azimuth wrap-arounds."""
    n = len(cloud)
    if n == 0:
        return []
    az = np.arctan2(cloud.points[:, 1], cloud.points[:, 0])
    d = np.diff(az)
    wrapped = (d + np.pi) % (2 * np.pi) - np.pi
    direction = 1.0 if wrapped.sum() >= 0 else -1.0
    cuts = np.flatnonzero(direction * d < -np.pi) + 1
    bounds = [0, *cuts.tolist(), n]
    rings = [ScanRing(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    merged: list[ScanRing] = []
    for ring in rings:
        if merged and (len(ring) < 2 or len(merged[-1]) < 2):
            merged[-1] = ScanRing(merged[-1].start, ring.end)
        else:
            merged.append(ring)
    return merged


def _jump_selection(values: np.ndarray, ring: ScanRing, eps: float, relative: bool) -> np.ndarray:
    if len(ring) < 2:
        return np.empty(0, dtype=np.int64)
    v = values[ring.start:ring.end]
    delta = v[1:] - v[:-1]
    if relative:
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.where(v[:-1] > 0, delta / v[:-1], 0.0)
    i = np.arange(len(delta))
    rising = i[delta > eps] - 1       # jump away: take the point one step before
    falling = i[delta < -eps] + 1     # jump towards: take the point after
    local = np.clip(np.concatenate([rising, falling]), 0, len(v) - 1)
    return np.unique(local) + ring.start


def depth_discontinuities(cloud: PointCloud, ring: ScanRing, eps_depth: float) -> np.ndarray:
    """Indices where the relative range change to the next point exceeds ``eps_depth``."""
    if eps_depth <= 0:
        raise ContractError("eps_depth must be positive")
    r = np.linalg.norm(cloud.xyz, axis=1)
    return _jump_selection(r, ring, eps_depth, relative=True)


def reflectance_discontinuities(cloud: PointCloud, ring: ScanRing, eps_reflect: float) -> np.ndarray:
    if eps_reflect <= 0:
        raise ContractError("eps_reflect must be positive")
    return _jump_selection(cloud.reflectance, ring, eps_reflect, relative=False)


def extract_edge_points(cloud: PointCloud, eps_depth: float = 0.1, eps_reflect: float = 0.2,
                        mode: str = "both") -> EdgePointSet:
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}")
    if eps_depth <= 0 or eps_reflect <= 0:
        raise ContractError("thresholds must be positive")
    flags = np.zeros(len(cloud), dtype=np.int64)
    if len(cloud):
        r = np.linalg.norm(cloud.xyz, axis=1)
        refl = cloud.reflectance
        for ring in segment_rings(cloud):
            if mode in ("depth", "both"):
                flags[_jump_selection(r, ring, eps_depth, relative=True)] |= DEPTH
            if mode in ("reflect", "both"):
                flags[_jump_selection(refl, ring, eps_reflect, relative=False)] |= REFLECT
    idx = np.flatnonzero(flags)
    return EdgePointSet(cloud.points[idx].copy(), idx, flags[idx])
