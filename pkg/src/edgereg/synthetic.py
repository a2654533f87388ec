"""Procedural LiDAR + camera frames with exact ground truth.

The scene is a walled yard (ground plane plus four vertical walls with
reflectance stripes) containing axis-aligned boxes. Every surface carries
piecewise-constant reflectance, so depth and reflectance discontinuities exist
by construction. The LiDAR is ray-cast ring by ring; the image is ray-cast per
pixel from the camera with flat Lambertian shading, using reflectance as albedo.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import FramePair, GrayImage, PointCloud
from .errors import SpecError
from .geometry import CameraIntrinsics, PoseSE3, rot_z

SKY = -1
GROUND = 0
WALLS = (1, 2, 3, 4)  # +x, -x, +y, -y
FIRST_BOX = 5

# camera axes expressed in the LiDAR frame: x right = -y_l, y down = -z_l, z forward = x_l
CAM_FROM_LIDAR = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
LIGHT = np.array([0.45, 0.3, 0.84]) / np.linalg.norm([0.45, 0.3, 0.84])
PALETTE = np.array([0.05, 0.3, 0.55, 0.8])


@dataclass
class SceneSpec:
    n_boxes: tuple[int, int] = (4, 7)
    box_footprint: tuple[float, float] = (0.8, 3.0)   # side length range (m)
    box_height: tuple[float, float] = (0.8, 3.0)
    box_range: tuple[float, float] = (4.0, 14.0)      # distance of box centre from LiDAR (m)
    box_azimuth_deg: tuple[float, float] = (-60.0, 60.0)
    sensor_height: float = 1.7                        # LiDAR above ground (m)
    ground: bool = True
    yard_half_extent: tuple[float, float] = (22.0, 18.0)
    wall_height: float = 5.0
    stripe_width: tuple[float, float] = (2.0, 6.0)
    rings: int = 32
    elevation_deg: tuple[float, float] = (-24.0, 2.0)
    azimuth_step_deg: float = 0.5
    width: int = 192
    height: int = 96
    focal: float = 96.0
    camera_offset: tuple[float, float, float] = (0.27, 0.0, -0.08)
    yaw_range_deg: float = 0.0
    xy_range: float = 0.0
    image_noise: float = 0.0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0)


@dataclass
class Scene:
    boxes: np.ndarray        # (B, 2, 3) lo/hi corners
    box_refl: np.ndarray     # (B, 2) reflectance of the x-low / x-high halves
    stripes: list            # per wall: (edges along wall, reflectance per stripe)
    ground_refl: float
    spec: SceneSpec


def _sample_scene(rng: np.random.Generator, spec: SceneSpec) -> Scene:
    lo_n, hi_n = spec.n_boxes
    hx, hy = spec.yard_half_extent
    if hi_n < 0 or lo_n > hi_n or hx <= 0 or hy <= 0:
        raise SpecError("scene needs positive yard extents and a valid box-count range")
    if hi_n == 0 and spec.wall_height <= 0 and not spec.ground:
        raise SpecError("scene has no surfaces")
    if spec.rings < 1 or spec.azimuth_step_deg <= 0:
        raise SpecError("scene needs at least one LiDAR ring and a positive azimuth step")
    n = int(rng.integers(lo_n, hi_n + 1))
    ground_z = -spec.sensor_height
    boxes, refl = [], []
    tries = 0
    while len(boxes) < n and tries < 200:
        tries += 1
        r = rng.uniform(*spec.box_range)
        az = np.radians(rng.uniform(*spec.box_azimuth_deg))
        sx, sy = rng.uniform(*spec.box_footprint, size=2)
        h = rng.uniform(*spec.box_height)
        c = np.array([r * np.cos(az), r * np.sin(az)])
        lo = np.array([c[0] - sx / 2, c[1] - sy / 2, ground_z])
        hi = np.array([c[0] + sx / 2, c[1] + sy / 2, ground_z + h])
        # keep clear of the sensors and of other boxes
        if np.all(np.abs(c) < np.array([sx, sy]) / 2 + 1.5):
            continue
        if any(np.all(lo[:2] < b[1][:2] + 0.3) and np.all(hi[:2] > b[0][:2] - 0.3) for b in boxes):
            continue
        if np.any(hi[:2] > np.array([hx, hy]) - 0.5) or np.any(lo[:2] < -np.array([hx, hy]) + 0.5):
            continue
        boxes.append(np.stack([lo, hi]))
        a, b = rng.choice(len(PALETTE), size=2, replace=False)
        refl.append([PALETTE[a], PALETTE[b]])
    stripes = []
    for wall in WALLS:
        extent = hy if wall in (1, 2) else hx
        edges = [-extent]
        while edges[-1] < extent:
            edges.append(edges[-1] + rng.uniform(*spec.stripe_width))
        edges = np.array(edges)
        vals = [int(rng.integers(len(PALETTE)))]
        for _ in range(len(edges) - 2):
            choices = [k for k in range(len(PALETTE)) if k != vals[-1]]
            vals.append(int(rng.choice(choices)))
        stripes.append((edges, PALETTE[np.array(vals)]))
    return Scene(
        boxes=np.array(boxes).reshape(-1, 2, 3),
        box_refl=np.array(refl).reshape(-1, 2),
        stripes=stripes,
        ground_refl=float(rng.choice(PALETTE[1:3])),
        spec=spec,
    )


def _cast(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray: (t, surface id, normal axis, sub-patch index)."""
    spec = scene.spec
    m = len(dirs)
    t_best = np.full(m, np.inf)
    surf = np.full(m, SKY)
    sub = np.zeros(m, dtype=np.int64)
    normal = np.zeros((m, 3))
    ground_z = -spec.sensor_height
    hx, hy = spec.yard_half_extent
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        # ground plane
        tg = (ground_z - origin[2]) * inv[:, 2]
        ok = (dirs[:, 2] < 0) & (tg > 0) & spec.ground
        t_best[ok], surf[ok] = tg[ok], GROUND
        normal[ok] = [0.0, 0.0, 1.0]
        # yard walls: exit of the inner slab along x and y
        for wall, axis, bound, n_vec in ((1, 0, hx, [-1, 0, 0]), (2, 0, -hx, [1, 0, 0]),
                                         (3, 1, hy, [0, -1, 0]), (4, 1, -hy, [0, 1, 0])):
            tw = (bound - origin[axis]) * inv[:, axis]
            z = origin[2] + tw * dirs[:, 2]
            other = 1 - axis
            q = origin[other] + tw * dirs[:, other]
            lim = hy if axis == 0 else hx
            ok = (tw > 0) & (tw < t_best) & (np.abs(q) <= lim) \
                & (z >= ground_z) & (z <= ground_z + spec.wall_height)
            t_best[ok], surf[ok] = tw[ok], wall
            normal[ok] = n_vec
        # boxes (slab method, origin assumed outside every box)
        for b, (lo, hi) in enumerate(scene.boxes):
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
            tn = np.minimum(t1, t2)
            tf = np.maximum(t1, t2)
            tn = np.where(np.isnan(tn), -np.inf, tn)
            tf = np.where(np.isnan(tf), np.inf, tf)
            t_near = tn.max(axis=1)
            t_far = tf.min(axis=1)
            ok = (t_near <= t_far) & (t_near > 0) & (t_near < t_best)
            if not ok.any():
                continue
            axis = tn[ok].argmax(axis=1)
            t_best[ok], surf[ok] = t_near[ok], FIRST_BOX + b
            nv = np.zeros((ok.sum(), 3))
            nv[np.arange(len(axis)), axis] = -np.sign(dirs[ok][np.arange(len(axis)), axis])
            normal[ok] = nv
    hit = surf != SKY
    pts = origin + np.where(hit, t_best, 0.0)[:, None] * dirs
    refl = np.zeros(m)
    refl[surf == GROUND] = scene.ground_refl
    for k, wall in enumerate(WALLS):
        sel = surf == wall
        if not sel.any():
            continue
        edges, vals = scene.stripes[k]
        coord = pts[sel, 1] if wall in (1, 2) else pts[sel, 0]
        idx = np.clip(np.searchsorted(edges, coord, side="right") - 1, 0, len(vals) - 1)
        refl[sel] = vals[idx]
        sub[sel] = idx
    for b, (lo, hi) in enumerate(scene.boxes):
        sel = surf == FIRST_BOX + b
        if not sel.any():
            continue
        half = (pts[sel, 0] >= (lo[0] + hi[0]) / 2).astype(np.int64)
        refl[sel] = scene.box_refl[b][half]
        sub[sel] = half
    return t_best, surf, sub, normal, pts, refl


def _lidar_dirs(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    elev = np.radians(np.linspace(spec.elevation_deg[0], spec.elevation_deg[1], spec.rings))
    n_az = int(round(360.0 / spec.azimuth_step_deg))
    az = -np.pi + np.arange(n_az) * (2 * np.pi / n_az) + 1e-6
    E, A = np.meshgrid(elev, az, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
    ring = np.repeat(np.arange(spec.rings), n_az)
    return dirs.reshape(-1, 3), ring


def camera_pose(spec: SceneSpec, yaw: float = 0.0, dxy=(0.0, 0.0)) -> PoseSE3:
    """LiDAR->camera pose for the nominal mount rotated by ``yaw`` about LiDAR z and shifted in xy."""
    centre = np.array(spec.camera_offset, dtype=np.float64) + np.array([dxy[0], dxy[1], 0.0])
    R = CAM_FROM_LIDAR @ rot_z(yaw).T
    return PoseSE3(R, -R @ centre)


def render_image(scene: Scene, K: CameraIntrinsics, T: PoseSE3, width: int, height: int):
    """Returns (intensities, surface id map, patch id map)."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs = d_cam @ T.R  # R^T applied to each row
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = -T.R.T @ T.t
    _, surf, sub, normal, _, refl = _cast(scene, origin, dirs)
    shade = 0.55 + 0.45 * np.abs(normal @ LIGHT)
    img = np.where(surf == SKY, 0.97, 0.04 + 0.9 * refl * shade)
    face = np.abs(normal) @ np.array([1, 2, 3])
    patch = np.where(surf == SKY, -1, (surf * 64 + sub * 4 + face).astype(np.int64))
    return img.reshape(height, width), surf.reshape(height, width), patch.reshape(height, width)


def generate_synthetic_frame(rng: np.random.Generator, spec: SceneSpec | None = None) -> FramePair:
    spec = spec or SceneSpec()
    scene = _sample_scene(rng, spec)
    yaw = np.radians(rng.uniform(-spec.yaw_range_deg, spec.yaw_range_deg)) if spec.yaw_range_deg else 0.0
    dxy = rng.uniform(-spec.xy_range, spec.xy_range, size=2) if spec.xy_range else np.zeros(2)
    K = spec.intrinsics()
    T = camera_pose(spec, yaw, dxy)

    dirs, ring = _lidar_dirs(spec)
    _, surf, sub, _, pts, refl = _cast(scene, np.zeros(3), dirs)
    hit = surf != SKY
    cloud = PointCloud(np.column_stack([pts[hit], refl[hit]]))

    img, surf_map, patch_map = render_image(scene, K, T, spec.width, spec.height)
    if spec.image_noise > 0:
        img = np.clip(img + rng.normal(0.0, spec.image_noise, img.shape), 0.0, 1.0)
    meta = {
        "ring": ring[hit],
        "surface": surf[hit],
        "patch": surf[hit] * 64 + sub[hit],
        "surface_map": surf_map,
        "patch_map": patch_map,
        "scene": scene,
    }
    return FramePair(cloud, GrayImage(img), K, T, meta)
