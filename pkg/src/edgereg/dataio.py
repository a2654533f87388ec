"""Sensor frame containers and KITTI-style readers/writers."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .geometry import CameraIntrinsics, PoseSE3


@dataclass
class PointCloud:
    """N x 4 rows of (x, y, z, reflectance) in sensor scan order."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ContractError(f"point cloud must be N x 4, got {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass
class GrayImage:
    """Row-major intensities in [0, 1]; ``intensities[v, u]``."""

    intensities: np.ndarray

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.ndim != 2:
            raise ContractError("GrayImage needs a 2-D intensity array")

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]


@dataclass
class FramePair:
    cloud: PointCloud
    image: GrayImage
    K: CameraIntrinsics
    T_gt: PoseSE3  # LiDAR frame -> camera frame
    meta: dict = field(default_factory=dict)


# ------------------------------------------------------------------ velodyne

def read_point_cloud_bin(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(pts)


def write_point_cloud_bin(path: str | Path, cloud: PointCloud) -> None:
    Path(path).write_bytes(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


# ------------------------------------------------------------------ images

def _pnm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    tokens = []
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def _read_pnm(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}")
    (w, h, maxval), pos = _pnm_tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    channels = 3 if magic in (b"P3", b"P6") else 1
    n = w * h * channels
    if magic in (b"P5", b"P6"):
        dtype = ">u2" if maxval > 255 else "u1"
        pos += 1  # single whitespace after maxval
        data = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    else:
        toks, _ = _pnm_tokens(buf, n, pos)
        data = np.array([int(t) for t in toks])
    arr = data.astype(np.float64).reshape(h, w, channels) * (255.0 / maxval)
    return arr[..., 0] if channels == 1 else arr


def to_gray(arr: np.ndarray) -> np.ndarray:
    """8-bit-scale raster (H x W or H x W x 3) -> intensities in [0, 1]."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
    return np.clip(arr / 255.0, 0.0, 1.0)


def load_grayscale(path: str | Path) -> GrayImage:
    """Read a PGM/PPM (or, through Pillow, PNG/JPEG) raster as a GrayImage."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:1] == b"P" and buf[1:2] in (b"2", b"3", b"5", b"6"):
        return GrayImage(to_gray(_read_pnm(buf)))
    try:
        from PIL import Image, UnidentifiedImageError
    except ImportError:  # pragma: no cover - Pillow ships with the test env
        raise FormatError(f"{path}: unsupported image codec") from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError):
        raise FormatError(f"{path}: unsupported image codec") from None
    return GrayImage(to_gray(arr))


def write_pgm(path: str | Path, image: GrayImage) -> None:
    data = np.round(np.clip(image.intensities, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """``rgb`` is H x W x 3 uint8."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + rgb.tobytes())


# ------------------------------------------------------------------ calibration

def _calib_rows(path: Path) -> dict[str, np.ndarray]:
    rows = {}
    for line in path.read_text().splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            rows[key.strip()] = np.array([float(x) for x in rest.split()])
        except ValueError:
            raise FormatError(f"{path}: non-numeric values on line '{key}'") from None
    return rows


def parse_kitti_calibration(path: str | Path) -> tuple[CameraIntrinsics, PoseSE3]:
    """Intrinsics from P2 and the LiDAR->camera pose with P2's baseline folded in."""
    path = Path(path)
    rows = _calib_rows(path)
    for key in ("P2", "Tr"):
        if key not in rows:
            raise FormatError(f"{path}: missing '{key}:' line")
        if rows[key].size != 12:
            raise FormatError(f"{path}: '{key}:' needs 12 values, got {rows[key].size}")
    P2 = rows["P2"].reshape(3, 4)
    Tr = rows["Tr"].reshape(3, 4)
    K = CameraIntrinsics(P2[0, 0], P2[1, 1], P2[0, 2], P2[1, 2])
    baseline = np.linalg.solve(P2[:, :3], P2[:, 3])
    T = PoseSE3(Tr[:, :3], Tr[:, 3])
    return K, PoseSE3(T.R, T.t + baseline)


def write_kitti_calibration(path: str | Path, K: CameraIntrinsics, T: PoseSE3) -> None:
    P2 = np.hstack([K.matrix(), np.zeros((3, 1))])
    Tr = np.hstack([T.R, T.t[:, None]])
    fmt = lambda a: " ".join(f"{v:.17g}" for v in a.ravel())  # noqa: E731
    Path(path).write_text(f"P2: {fmt(P2)}\nTr: {fmt(Tr)}\n")


# ------------------------------------------------------------------ sampling

def downsample_random(cloud: PointCloud, target: int, rng: np.random.Generator) -> PointCloud:
    """Uniform subset without replacement, keeping the original relative order."""
    if target < 1:
        raise ContractError("target must be >= 1")
    if len(cloud) <= target:
        return cloud
    keep = np.sort(rng.choice(len(cloud), size=target, replace=False))
    return PointCloud(cloud.points[keep])


# ------------------------------------------------------------------ manifests

def pose_to_row(T: PoseSE3) -> list[float]:
    return [float(v) for v in np.hstack([T.R, T.t[:, None]]).ravel()]


def pose_from_row(row) -> PoseSE3:
    arr = np.asarray(row, dtype=np.float64)
    if arr.size != 12:
        raise FormatError(f"pose rows need 12 floats, got {arr.size}")
    arr = arr.reshape(3, 4)
    return PoseSE3(arr[:, :3], arr[:, 3])


def write_manifest(path: str | Path, entries: list[dict]) -> None:
    Path(path).write_text(json.dumps({"frames": entries}, indent=1) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    doc = json.loads(path.read_text())
    frames = doc.get("frames")
    if not isinstance(frames, list):
        raise FormatError(f"{path}: manifest needs a 'frames' list")
    base = path.parent
    out = []
    for entry in frames:
        e = dict(entry)
        for key in ("cloud", "image", "calib"):
            if key in e and not Path(e[key]).is_absolute():
                e[key] = str(base / e[key])
        out.append(e)
    return out


def load_frame(entry: dict) -> FramePair:
    """Load one manifest entry (cloud, image, calib or K + T_gt)."""
    cloud = read_point_cloud_bin(entry["cloud"])
    image = load_grayscale(entry["image"])
    if "calib" in entry:
        K, T = parse_kitti_calibration(entry["calib"])
    else:
        K = CameraIntrinsics(*entry["K"])
        T = pose_from_row(entry["T_gt"])
    if "T_gt" in entry:
        T = pose_from_row(entry["T_gt"])
    return FramePair(cloud, image, K, T, meta={"name": entry.get("name", Path(entry["cloud"]).stem)})
