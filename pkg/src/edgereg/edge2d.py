"""2D edge pixels: a gradient-orientation line-segment detector plus Sobel/Canny.

The segment detector follows the classic region-growing recipe (Gaussian
downscale, 2x2 gradients, pseudo-ordered seeds, angle-tolerant growth,
rectangle fit) but validates candidates with a density gate and a minimum
length instead of an a-contrario false-alarm test.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataio import GrayImage
from .errors import ContractError

SCALE = 0.8
SIGMA_SCALE = 0.6
ANGLE_TOL = np.radians(22.5)
GRAD_QUANT = 2.0  # gray levels; sets the gradient floor q / sin(tau)
MIN_DENSITY = 0.7
MIN_LENGTH = 8.0
REFINE_MIN_TOL = np.radians(2.0)

_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class LineSegment:
    x1: float
    y1: float
    x2: float
    y2: float
    width: float

    @property
    def length(self) -> float:
        return float(np.hypot(self.x2 - self.x1, self.y2 - self.y1))

    @property
    def angle(self) -> float:
        """Undirected orientation in degrees, [0, 180)."""
        return float(np.degrees(np.arctan2(self.y2 - self.y1, self.x2 - self.x1)) % 180.0)


@dataclass
class EdgePixelSet:
    pixels: np.ndarray  # (N, 2) integer (u, v), ascending (v, u)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.pixels)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "EdgePixelSet":
        v, u = np.nonzero(mask)  # row-major: already sorted by (v, u)
        return cls(np.column_stack([u, v]))

    def to_csv(self, path: str | Path) -> None:
        body = "\n".join(f"{u},{v}" for u, v in self.pixels)
        Path(path).write_text("u,v\n" + body + ("\n" if body else ""))


# ------------------------------------------------------------------ segment detector

def _downscale(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    sigma = SIGMA_SCALE / SCALE
    blurred = ndimage.gaussian_filter(img, sigma, mode="nearest")
    nh, nw = int(np.floor(h * SCALE)), int(np.floor(w * SCALE))
    yy, xx = np.meshgrid(np.arange(nh) / SCALE, np.arange(nw) / SCALE, indexing="ij")
    return ndimage.map_coordinates(blurred, [yy, xx], order=1, mode="nearest")


def _gradients(img: np.ndarray):
    a = img[:-1, :-1]
    b = img[:-1, 1:]
    c = img[1:, :-1]
    d = img[1:, 1:]
    com1 = d - a
    com2 = b - c
    gx = com1 + com2
    gy = com1 - com2
    mag = np.sqrt(gx * gx + gy * gy) / 2.0
    angle = np.arctan2(gx, -gy)  # level-line orientation
    return mag, angle


def _grow(seed, angles, usable, tol):
    h, w = angles.shape
    sy, sx = seed
    region = [seed]
    usable[sy, sx] = False
    theta = angles[sy, sx]
    sum_c, sum_s = np.cos(theta), np.sin(theta)
    queue = deque([seed])
    while queue:
        y, x = queue.popleft()
        for dy, dx in _NEIGHBORS:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and usable[ny, nx]:
                a = angles[ny, nx]
                d = abs((a - theta + np.pi) % (2 * np.pi) - np.pi)
                if d <= tol:
                    usable[ny, nx] = False
                    region.append((ny, nx))
                    queue.append((ny, nx))
                    sum_c += np.cos(a)
                    sum_s += np.sin(a)
                    theta = np.arctan2(sum_s, sum_c)
    return np.array(region), theta


def _fit_rect(region: np.ndarray, mag: np.ndarray):
    ys = region[:, 0].astype(np.float64)
    xs = region[:, 1].astype(np.float64)
    wgt = mag[region[:, 0], region[:, 1]]
    cx = np.sum(wgt * xs) / wgt.sum()
    cy = np.sum(wgt * ys) / wgt.sum()
    dx, dy = xs - cx, ys - cy
    cov = np.array([[np.sum(wgt * dx * dx), np.sum(wgt * dx * dy)],
                    [np.sum(wgt * dx * dy), np.sum(wgt * dy * dy)]])
    _, evecs = np.linalg.eigh(cov)
    direction = evecs[:, 1]
    perp = np.array([-direction[1], direction[0]])
    lproj = dx * direction[0] + dy * direction[1]
    wproj = dx * perp[0] + dy * perp[1]
    length = lproj.max() - lproj.min() + 1.0
    width = max(wproj.max() - wproj.min() + 1.0, 1.0)
    p1 = np.array([cx, cy]) + lproj.min() * direction
    p2 = np.array([cx, cy]) + lproj.max() * direction
    density = len(region) / (length * width)
    return p1, p2, width, density


def _refine(region, seed, angles, usable, mag, width):
    """Re-grow from the seed with a tolerance taken from the angle spread near it."""
    sy, sx = seed
    theta = angles[sy, sx]
    near = np.hypot(region[:, 0] - sy, region[:, 1] - sx) < width
    dev = (angles[region[near, 0], region[near, 1]] - theta + np.pi) % (2 * np.pi) - np.pi
    # a perfectly aligned neighbourhood gives zero spread; keep a small floor
    tol = max(2.0 * np.sqrt(np.mean(dev ** 2)), REFINE_MIN_TOL)
    if tol >= ANGLE_TOL:
        return (region, *_fit_rect(region, mag))
    usable[region[:, 0], region[:, 1]] = True
    region, _ = _grow(seed, angles, usable, tol)
    if len(region) < 3:
        return (region, None, None, 1.0, 0.0)
    return (region, *_fit_rect(region, mag))


def detect_line_segments(image: GrayImage) -> list[LineSegment]:
    img = np.asarray(image.intensities, dtype=np.float64) * 255.0
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise ContractError("line-segment detection needs an image of at least 8 x 8")
    small = _downscale(img)
    mag, angles = _gradients(small)
    threshold = GRAD_QUANT / np.sin(ANGLE_TOL)
    usable = mag > threshold
    order = np.argsort(-mag, axis=None, kind="stable")
    order = order[usable.ravel()[order]]
    h_img, w_img = img.shape
    segments = []
    for flat in order:
        sy, sx = divmod(int(flat), mag.shape[1])
        if not usable[sy, sx]:
            continue
        region, _ = _grow((sy, sx), angles, usable, ANGLE_TOL)
        if len(region) < 3:
            continue
        p1, p2, width, density = _fit_rect(region, mag)
        if density < MIN_DENSITY:
            region, p1, p2, width, density = _refine(region, (sy, sx), angles, usable, mag, width)
        while density < MIN_DENSITY and len(region) >= 3:
            # shrink the region around the seed until it is rectangle-like;
            # trimmed pixels go back to the pool for later seeds
            dist = np.hypot(region[:, 0] - sy, region[:, 1] - sx)
            radius = 0.75 * dist.max()
            drop = region[dist > radius]
            usable[drop[:, 0], drop[:, 1]] = True
            region = region[dist <= radius]
            if len(region) < 3:
                break
            p1, p2, width, density = _fit_rect(region, mag)
        if density < MIN_DENSITY or len(region) < 3:
            continue
        # gradient sample (i, j) sits at (j + 0.5, i + 0.5) of the downscaled grid
        q1 = (p1 + 0.5) / SCALE
        q2 = (p2 + 0.5) / SCALE
        if np.hypot(*(q2 - q1)) < MIN_LENGTH:
            continue
        q1 = np.clip(q1, 0.0, [w_img - 1, h_img - 1])
        q2 = np.clip(q2, 0.0, [w_img - 1, h_img - 1])
        segments.append(LineSegment(float(q1[0]), float(q1[1]), float(q2[0]), float(q2[1]), float(width / SCALE)))
    return segments


def _bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_segments(segments, width: int, height: int) -> EdgePixelSet:
    """Union of integer line traversals between rounded endpoints, sorted by (v, u)."""
    mask = np.zeros((height, width), dtype=bool)
    for s in segments:
        for u, v in _bresenham(int(round(s.x1)), int(round(s.y1)), int(round(s.x2)), int(round(s.y2))):
            if 0 <= u < width and 0 <= v < height:
                mask[v, u] = True
    return EdgePixelSet.from_mask(mask)


def lsd_edges(image: GrayImage) -> EdgePixelSet:
    return rasterize_segments(detect_line_segments(image), image.width, image.height)


# ------------------------------------------------------------------ gradient operators

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.correlate(img, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(img, _SOBEL_X.T, mode="nearest")
    return gx, gy


def _check_thresholds(low: float, high: float) -> None:
    if not 0 <= low < high:
        raise ContractError("thresholds need 0 <= low < high")


def sobel_edges(image: GrayImage, low: float = 0.0, high: float = 150.0) -> EdgePixelSet:
    """Pixels whose normalized Sobel magnitude (gray levels per pixel) lies in (low, high]."""
    _check_thresholds(low, high)
    gx, gy = _sobel(image.intensities * 255.0)
    mag = np.hypot(gx, gy) / 8.0
    mag[mag < 1e-9] = 0.0  # summation round-off on flat regions
    return EdgePixelSet.from_mask((mag > low) & (mag <= high))


def canny_edges(image: GrayImage, low: float = 50.0, high: float = 150.0) -> EdgePixelSet:
    """Gaussian(1.4) smoothing, Sobel gradients, non-maximum suppression, 8-connected hysteresis."""
    _check_thresholds(low, high)
    img = ndimage.gaussian_filter(image.intensities * 255.0, 1.4, mode="nearest")
    gx, gy = _sobel(img)
    mag = np.hypot(gx, gy)
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    sector = np.select([(angle < 22.5) | (angle >= 157.5), angle < 67.5, angle < 112.5], [0, 1, 2], 3)
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        back = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        # ties resolved towards the forward neighbour so plateaus stay 1 px wide
        keep |= (sector == s) & (mag >= back) & (mag > fwd)
    nms = np.where(keep, mag, 0.0)
    weak = nms > low
    strong = nms > high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return EdgePixelSet(np.empty((0, 2)))
    good = np.zeros(n + 1, dtype=bool)
    good[np.unique(labels[strong])] = True
    good[0] = False
    return EdgePixelSet.from_mask(good[labels])


def extract_edge_pixels(image: GrayImage, method: str = "lsd", sobel_thresholds=(0.0, 150.0),
                        canny_thresholds=(50.0, 150.0)) -> EdgePixelSet:
    if method == "lsd":
        return lsd_edges(image)
    if method == "sobel":
        return sobel_edges(image, *sobel_thresholds)
    if method == "canny":
        return canny_edges(image, *canny_thresholds)
    raise ContractError(f"unknown edge method '{method}'")
