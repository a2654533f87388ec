"""Feature extraction for edge pixels and edge points.

Image branch: three stride-2 3x3 conv + relu stages, then bilinear sampling of
the W/8 x H/8 grid at edge pixels. Point branch: two set-abstraction stages on
farthest-point-sampled centres, then inverse-distance feature propagation onto
the edge points. Positional embeddings are small MLPs whose output is added to
the sampled features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

STRIDE = 8


@dataclass
class ImageFeatureGrid:
    features: Tensor  # (gh, gw, D)

    @property
    def gh(self) -> int:
        return self.features.shape[0]

    @property
    def gw(self) -> int:
        return self.features.shape[1]


@dataclass
class PointFeatureSet:
    positions: np.ndarray  # (M, 3)
    features: Tensor       # (M, C)


# ------------------------------------------------------------------ parameters

def init_featnet_params(rng: np.random.Generator, feature_dim: int, image_channels=(16, 32),
                        sa_widths=(32, 64)) -> dict[str, Tensor]:
    D = feature_dim
    c1, c2 = image_channels
    w1, w2 = sa_widths
    params: dict[str, Tensor] = {}
    for k, (cin, cout) in enumerate(((1, c1), (c1, c2), (c2, D))):
        params.update(ad.linear_params(rng, f"img.conv{k}", 9 * cin, cout))
    params.update(ad.mlp_params(rng, "pt.sa0", [3 + 1, w1, w1]))
    params.update(ad.mlp_params(rng, "pt.sa1", [3 + w1, w2, w2]))
    params.update(ad.mlp_params(rng, "pt.fp0", [w2 + w1, w1]))
    params.update(ad.mlp_params(rng, "pt.fp1", [w1 + 4, D, D]))
    params.update(ad.mlp_params(rng, "pos2d", [2, 2 * D, D]))
    params.update(ad.mlp_params(rng, "pos3d", [4, 2 * D, D]))
    return params


# ------------------------------------------------------------------ image branch

def _conv_index(h: int, w: int) -> tuple[np.ndarray, int, int]:
    """Row indices (into an h*w + 1 table whose last row is zero) for 3x3/stride-2 patches."""
    ho, wo = (h + 1) // 2, (w + 1) // 2
    oy, ox = np.meshgrid(np.arange(ho) * 2, np.arange(wo) * 2, indexing="ij")
    idx = np.empty((ho * wo, 9), dtype=np.int64)
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            y, x = oy + dy, ox + dx
            inside = (y >= 0) & (y < h) & (x >= 0) & (x < w)
            idx[:, k] = np.where(inside, y * w + x, h * w).ravel()
            k += 1
    return idx, ho, wo


def conv3x3_s2(x: Tensor, h: int, w: int, params, prefix: str) -> tuple[Tensor, int, int]:
    """x is (h*w, C) row-major; returns relu(conv) as (ho*wo, C_out)."""
    idx, ho, wo = _conv_index(h, w)
    table = ad.concat([x, np.zeros((1, x.shape[1]))], axis=0)
    patches = ad.reshape(ad.gather_rows(table, idx), (ho * wo, 9 * x.shape[1]))
    return ad.relu(ad.linear(patches, params, prefix)), ho, wo


def extract_image_features(image, params) -> ImageFeatureGrid:
    """``image`` is a GrayImage or an (H, W) array of intensities."""
    arr = np.asarray(getattr(image, "intensities", image), dtype=np.float64)
    h, w = arr.shape
    if h < STRIDE or w < STRIDE:
        raise ContractError("image must be at least 8 x 8")
    x: Tensor = Tensor(arr.reshape(-1, 1))
    for k in range(3):
        x, h, w = conv3x3_s2(x, h, w, params, f"img.conv{k}")
    return ImageFeatureGrid(ad.reshape(x, (h, w, x.shape[1])))


def bilinear_weights(pixels: np.ndarray, gh: int, gw: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat cell indices (N, 4) and blend weights (N, 4) for pixel (u, v) -> grid (u/8, v/8)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    gx = np.clip(pixels[:, 0] / STRIDE, 0.0, gw - 1)
    gy = np.clip(pixels[:, 1] / STRIDE, 0.0, gh - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    fx, fy = gx - x0, gy - y0
    idx = np.stack([y0 * gw + x0, y0 * gw + x1, y1 * gw + x0, y1 * gw + x1], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, wts


def sample_bilinear(grid: ImageFeatureGrid, pixels) -> Tensor:
    idx, wts = bilinear_weights(pixels, grid.gh, grid.gw)
    flat = ad.reshape(grid.features, (grid.gh * grid.gw, grid.features.shape[2]))
    corners = ad.gather_rows(flat, idx)                     # (N, 4, D)
    return ad.sum(ad.mul(corners, wts[:, :, None]), axis=1)


# ------------------------------------------------------------------ point branch

def farthest_point_sample(points: np.ndarray, count: int, rng: np.random.Generator | None = None,
                          first: int | None = None) -> np.ndarray:
    """Greedy max-min selection; the first index comes from ``rng`` unless given."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(points)
    if not 1 <= count <= m:
        raise ContractError(f"cannot sample {count} of {m} points")
    if first is None:
        first = int(rng.integers(m)) if rng is not None else 0
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = first
    dist = np.sum((points - points[first]) ** 2, axis=1)
    for k in range(1, count):
        nxt = int(np.argmax(dist))  # argmax returns the lowest index on ties
        chosen[k] = nxt
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def ball_neighbors(positions: np.ndarray, centers: np.ndarray, radius: float, k_max: int) -> np.ndarray:
    """(M, k_max) neighbour indices within ``radius``, nearest first, padded with the nearest."""
    tree = cKDTree(positions)
    k = min(k_max, len(positions))
    dist, idx = tree.query(centers, k=k, distance_upper_bound=radius)
    idx = np.asarray(idx).reshape(len(centers), k)
    dist = np.asarray(dist).reshape(len(centers), k)
    missing = ~np.isfinite(dist)
    idx = np.where(missing, idx[:, :1], idx)
    if k < k_max:
        idx = np.concatenate([idx, np.repeat(idx[:, :1], k_max - k, axis=1)], axis=1)
    return idx


def set_abstraction(positions: np.ndarray, features: Tensor, centers: np.ndarray, radius: float,
                    k_max: int, params, prefix: str) -> PointFeatureSet:
    """Shared MLP over (offset, feature) of each ball neighbour, max-pooled per centre."""
    if radius <= 0:
        raise ContractError("radius must be positive")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    nbr = ball_neighbors(positions, centers, radius, k_max)        # (M, k)
    offsets = positions[nbr] - centers[:, None, :]                 # (M, k, 3)
    feats = ad.gather_rows(features, nbr)                          # (M, k, C)
    x = ad.concat([offsets, feats], axis=-1)
    m, k, c = x.shape
    layers = sum(1 for key in params if key.startswith(prefix + ".") and key.endswith(".w"))
    h = ad.mlp(ad.reshape(x, (m * k, c)), params, prefix, layers, final_relu=True)
    return PointFeatureSet(centers, ad.max(ad.reshape(h, (m, k, h.shape[1])), axis=1))


def interpolation_weights(targets: np.ndarray, sources: np.ndarray, k: int = 3):
    """Indices (N, k) of the nearest sources and normalized 1/(d^2 + 1e-8) weights."""
    k = min(k, len(sources))
    dist, idx = cKDTree(sources).query(targets, k=k)
    dist = np.asarray(dist).reshape(len(targets), k)
    idx = np.asarray(idx).reshape(len(targets), k)
    w = 1.0 / (dist ** 2 + 1e-8)
    return idx, w / w.sum(axis=1, keepdims=True)


def feature_propagation(target_positions: np.ndarray, target_features, sources: PointFeatureSet,
                        params, prefix: str, final_relu: bool = False) -> Tensor:
    """Interpolate source features onto targets, concatenate target features, apply the unit MLP."""
    if len(sources.positions) == 0:
        raise ContractError("feature propagation needs at least one source point")
    idx, w = interpolation_weights(np.asarray(target_positions).reshape(-1, 3), sources.positions)
    interp = ad.sum(ad.mul(ad.gather_rows(sources.features, idx), w[:, :, None]), axis=1)
    x = ad.concat([interp, target_features], axis=-1)
    layers = sum(1 for key in params if key.startswith(prefix + ".") and key.endswith(".w"))
    return ad.mlp(x, params, prefix, layers, final_relu=final_relu)


def extract_point_features(cloud_points: np.ndarray, edge_points: np.ndarray, params,
                           fps_counts=(2048, 512), radii=(2.0, 8.0), k_max: int = 16,
                           rng: np.random.Generator | None = None) -> Tensor:
    """F_3D (N_3D, D) for ``edge_points`` (N_3D, 4) given the (downsampled) cloud (N, 4)."""
    cloud_points = np.asarray(cloud_points, dtype=np.float64)
    pos = cloud_points[:, :3]
    n0 = min(fps_counts[0], len(pos))
    c0 = farthest_point_sample(pos, n0, rng)
    l1 = set_abstraction(pos, Tensor(cloud_points[:, 3:4]), pos[c0], radii[0], k_max, params, "pt.sa0")
    n1 = min(fps_counts[1], n0)
    c1 = farthest_point_sample(l1.positions, n1, rng)
    l2 = set_abstraction(l1.positions, l1.features, l1.positions[c1], radii[1], k_max, params, "pt.sa1")
    up = feature_propagation(l1.positions, l1.features, l2, params, "pt.fp0", final_relu=True)
    l1b = PointFeatureSet(l1.positions, up)
    edge_points = np.asarray(edge_points, dtype=np.float64).reshape(-1, 4)
    return feature_propagation(edge_points[:, :3], edge_points, l1b, params, "pt.fp1")


# ------------------------------------------------------------------ positions

def normalize_pixels(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([2.0 * p[:, 0] / max(width - 1, 1) - 1.0,
                            2.0 * p[:, 1] / max(height - 1, 1) - 1.0])


def normalize_points(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    return np.column_stack([p[:, :3] / 100.0, p[:, 3]])


def positional_embedding(normalized_positions: np.ndarray, params, prefix: str) -> Tensor:
    """Two-layer MLP (hidden 2D) applied to already-normalized positions."""
    return ad.mlp(Tensor(normalized_positions), params, prefix, 2)
