"""Acceptance suite: one test per primary criterion, each reporting a PASS/FAIL line.

The end-to-end and ablation criteria train real models and take most of an
hour on one CPU core; everything else finishes in a few minutes.
"""
from __future__ import annotations

import time

import numpy as np
import pytest
from scipy import ndimage

from edgereg import autodiff as ad
from edgereg import exchange, featnet, matchlayer
from edgereg import trainer as tr
from edgereg.autodiff import Graph, Tensor, check_gradients
from edgereg.config import desk_config
from edgereg.dataio import (PointCloud, parse_kitti_calibration, read_point_cloud_bin,
                            write_point_cloud_bin)
from edgereg.edge2d import lsd_edges
from edgereg.edge3d import DEPTH, REFLECT, extract_edge_points
from edgereg.geometry import (CameraIntrinsics, PoseError, PoseSE3, compute_pose_error, project_points, rot_x,
                              rot_y, rot_z, se3_compose)
from edgereg.pose import ransac_epnp
from edgereg.synthetic import SceneSpec, generate_synthetic_frame

from conftest import report

# toy registration task shared by the end-to-end and ablation criteria
TOY_SCENE = SceneSpec(yaw_range_deg=30.0, xy_range=2.0)
TOY_CONFIG = dict(learning_rate=3e-3, layer_norm=True, augment=False, train_max_keypoints=256,
                  lr_schedule="cosine")
TRAIN_FRAMES, HELD_OUT_FRAMES = 500, 100
TRAIN_BUDGET_S = 25 * 60
CPU_BUDGET_S = 30 * 60


# ---------------------------------------------------------------- gradient integrity

def _tiny_pipeline(seed: int, layer_norm: bool):
    rng = np.random.default_rng(seed)
    D = 8
    params = featnet.init_featnet_params(rng, D, (2, 2), (4, 4))
    params.update(exchange.init_exchange_params(rng, D, 1))
    params.update(matchlayer.init_match_params(rng, D))
    for t in params.values():  # nonzero biases exercise every bias gradient
        if t.ndim == 1:
            t.data = rng.normal(scale=0.1, size=t.shape)
    image = rng.random((16, 16))
    cloud = np.column_stack([rng.uniform(-3, 3, (24, 3)), rng.random(24)])
    edges = cloud[rng.choice(24, 5, replace=False)]
    kp2d = rng.uniform(0, 15, (6, 2))
    pairs = np.array([[0, 1], [2, 3], [5, 0]])
    s2, s3 = np.zeros(6, bool), np.zeros(5, bool)
    s2[pairs[:, 0]] = True
    s3[pairs[:, 1]] = True
    labels = matchlayer.GroundTruthLabels(np.array([1, 1, 0, 1, 1], bool), s2, s3, pairs)

    def fn(params):
        grid = featnet.extract_image_features(image, params)
        f2d = featnet.sample_bilinear(grid, kp2d) + featnet.positional_embedding(
            featnet.normalize_pixels(kp2d, 16, 16), params, "pos2d")
        f3d = featnet.extract_point_features(cloud, edges, params, (8, 4), (3.0, 6.0), 4,
                                             np.random.default_rng(seed)) + featnet.positional_embedding(
            featnet.normalize_points(edges), params, "pos3d")
        d2, d3 = exchange.run_exchange_stack(f2d, f3d, params, 1, 4, layer_norm)
        S = matchlayer.similarity_matrix(d2, d3, params, 1 / np.sqrt(D))
        sig2, sig3 = matchlayer.matchability_scores(d2, d3, params)
        assign = matchlayer.assignment_matrix(S, sig2, sig3)
        return matchlayer.compute_losses(assign, sig2, sig3, matchlayer.predict_fov_scores(d3, params),
                                         labels).total

    return Graph(fn, params)


def test_gradient_integrity():
    t0 = time.perf_counter()
    worst = 0.0
    seeds = 30
    for seed in range(seeds):
        err = check_gradients(_tiny_pipeline(seed, seed % 2 == 1), step=1e-5, max_entries=3,
                              rng=np.random.default_rng(seed))
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    report("gradient integrity", ok, f"max rel err {worst:.2e} over {seeds} seeds at D=8 in {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- assignment layer

def _mutual_argmax_oracle(P: np.ndarray) -> set:
    """O(N^2): strict row winners, kept when they also strictly win their column."""
    def strict_winner(vec):
        order = np.argsort(vec)[::-1]
        if len(vec) > 1 and vec[order[0]] == vec[order[1]]:
            return -1
        return int(order[0])

    col_win = [strict_winner(P[:, j]) for j in range(P.shape[1])]
    out = set()
    for i in range(P.shape[0]):
        j = strict_winner(P[i])
        if j >= 0 and col_win[j] == i:
            out.add((i, j))
    return out


def test_assignment_layer():
    rng = np.random.default_rng(2024)
    worst_sum = 0.0
    mismatches = 0
    for k in range(1000):
        n2, n3 = rng.integers(1, 65, size=2)
        S = rng.normal(scale=rng.uniform(0.1, 20), size=(n2, n3))
        if k % 4 == 0:  # quantized scores force ties
            S = np.round(S)
        col = ad.softmax(Tensor(S), axis=0).data
        row = ad.softmax(Tensor(S), axis=1).data
        worst_sum = max(worst_sum, np.abs(col.sum(axis=0) - 1).max(), np.abs(row.sum(axis=1) - 1).max())
        P = matchlayer.assignment_matrix(S, rng.random(n2), rng.random(n3)).P.data
        got = {tuple(p) for p in matchlayer.extract_correspondences(P).pairs}
        mismatches += got != _mutual_argmax_oracle(P)
    ones = np.ones(2)
    p0 = matchlayer.assignment_matrix(np.zeros((2, 2)), ones, ones).P.data
    p1 = matchlayer.assignment_matrix(np.array([[10.0, 0], [0, 10.0]]), ones, ones).P.data
    spot = max(np.abs(p0 - 0.25).max(), abs(p1[0, 0] - 0.99991), abs(p1[1, 1] - 0.99991),
               abs(p1[0, 1] - 2.06e-9), abs(p1[1, 0] - 2.06e-9))
    ok = worst_sum <= 1e-12 and mismatches == 0 and spot < 1e-4
    report("assignment layer", ok,
           f"softmax sum err {worst_sum:.1e}, oracle mismatches {mismatches}/1000, worked-example err {spot:.1e}")
    assert ok


# ---------------------------------------------------------------- pose oracle

def test_pose_solver_oracle():
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
    ok_trials = 0
    times = []
    for trial in range(500):
        rng = np.random.default_rng([31, trial])
        R = rot_z(rng.uniform(-np.pi, np.pi)) @ rot_y(rng.uniform(-0.5, 0.5)) @ rot_x(rng.uniform(-0.5, 0.5))
        T = PoseSE3(R, rng.uniform(-5, 5, 3))
        cam = np.column_stack([rng.uniform(-4, 4, 100), rng.uniform(-3, 3, 100), rng.uniform(4, 20, 100)])
        pw = (cam - T.t) @ T.R
        px = project_points(K, T, pw).uv
        bad = rng.permutation(100)[:30]
        px[bad] = rng.uniform([0, 0], [640, 480], (30, 2))
        t0 = time.perf_counter()
        res = ransac_epnp(px, pw, K, 2.0, 0.999, 2000, rng)
        times.append(time.perf_counter() - t0)
        if res.success:
            err = compute_pose_error(T, res.pose)
            ok_trials += err.rre < 0.01 and err.rte < 1e-3
    median_ms = 1e3 * float(np.median(times))
    ok = ok_trials >= 495 and median_ms < 50
    report("pose solver oracle", ok, f"{ok_trials}/500 within 0.01 deg / 1 mm, median solve {median_ms:.1f} ms")
    assert ok


# ---------------------------------------------------------------- edge recall

def _planted_image_edges(frame, min_contrast=0.1, min_len=16):
    """Boundary runs between rendered patches with clear contrast, as (rows, cols, dy, dx)."""
    patch = frame.meta["patch_map"]
    img = frame.image.intensities
    h, w = patch.shape
    out = []
    for dy, dx in ((0, 1), (1, 0)):
        a, b = patch[:h - dy, :w - dx], patch[dy:, dx:]
        m = (a != b) & (np.abs(img[:h - dy, :w - dx] - img[dy:, dx:]) >= min_contrast)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        for key in set(zip(lo[m].tolist(), hi[m].tolist())):
            lab, n = ndimage.label(m & (lo == key[0]) & (hi == key[1]), np.ones((3, 3)))
            for c in range(1, n + 1):
                yy, xx = np.nonzero(lab == c)
                if np.hypot(np.ptp(yy), np.ptp(xx)) + 1 >= min_len:
                    out.append((yy, xx, dy, dx))
    return out


def _missed_steps(values, flags, ring, kind, threshold, relative):
    """Consecutive same-ring pairs with a step above ``threshold`` and no flagged point within one step."""
    missed = total = 0
    n = len(values)
    same = ring[1:] == ring[:-1]
    a, b = values[:-1], values[1:]
    if relative:
        step = np.maximum(a, b) / np.maximum(np.minimum(a, b), 1e-12) - 1.0
    else:
        step = np.abs(b - a)
    for i in np.flatnonzero(same & (step > threshold)):
        total += 1
        near = [k for k in range(i - 1, i + 3) if 0 <= k < n and ring[k] == ring[i]]
        missed += not np.any(flags[near] & kind)
    return missed, total


def test_edge_extraction_recall():
    eps_d, eps_r = 0.1, 0.2
    depth_missed = depth_total = refl_missed = refl_total = 0
    covered = boundary = 0
    per_edge = []
    for s in range(200):
        frame = generate_synthetic_frame(np.random.default_rng([7, s]))
        edges = extract_edge_points(frame.cloud, eps_d, eps_r, "both")
        flags = np.zeros(len(frame.cloud), dtype=np.int64)
        flags[edges.indices] = edges.provenance
        ring = frame.meta["ring"]
        r = np.linalg.norm(frame.cloud.xyz, axis=1)
        m, t = _missed_steps(r, flags, ring, DEPTH, 2 * eps_d, relative=True)
        depth_missed, depth_total = depth_missed + m, depth_total + t
        m, t = _missed_steps(frame.cloud.reflectance, flags, ring, REFLECT, 2 * eps_r, relative=False)
        refl_missed, refl_total = refl_missed + m, refl_total + t

        px = lsd_edges(frame.image).pixels
        mask = np.zeros(frame.meta["patch_map"].shape, bool)
        mask[px[:, 1], px[:, 0]] = True
        near = ndimage.binary_dilation(mask, np.ones((3, 3), bool))
        for yy, xx, dy, dx in _planted_image_edges(frame):
            hit = near[yy, xx] | near[yy + dy, xx + dx]
            covered += int(hit.sum())
            boundary += len(hit)
            per_edge.append(hit.mean())
    coverage = covered / boundary
    per_edge = np.asarray(per_edge)
    ok = depth_missed == 0 and refl_missed == 0 and coverage >= 0.8
    report("edge extraction recall", ok,
           f"depth {depth_total - depth_missed}/{depth_total}, reflectance {refl_total - refl_missed}/{refl_total}, "
           f"image coverage {100 * coverage:.1f}% over {len(per_edge)} edges "
           f"({100 * np.mean(per_edge >= 0.8):.1f}% of edges individually >= 80%)")
    assert ok


# ---------------------------------------------------------------- GT pair density

def test_gt_pair_density():
    config = desk_config()
    params = tr.init_params(config)
    ratios = []
    for s in range(50):
        frame = generate_synthetic_frame(np.random.default_rng([13, s]))
        kp2d, pts = tr.frame_edges(frame, config)
        labels = matchlayer.ground_truth_labels(kp2d, pts.points, frame.K, frame.T_gt, frame.image.width,
                                                frame.image.height, config.eps_corr)
        ratios.append(len(labels.pairs) / len(pts))
    del params
    mean = float(np.mean(ratios))
    ok = mean > 0.10
    report("GT pair density", ok, f"mean |M|/N_3D = {100 * mean:.1f}% over 50 frames (min {100 * min(ratios):.1f}%)")
    assert ok


# ---------------------------------------------------------------- training-based criteria

@pytest.fixture(scope="module")
def toy_data():
    config = desk_config(**TOY_CONFIG)
    rng = np.random.default_rng(1)
    train = [generate_synthetic_frame(rng, TOY_SCENE) for _ in range(TRAIN_FRAMES)]
    rng = np.random.default_rng(2)
    held = [generate_synthetic_frame(rng, TOY_SCENE) for _ in range(HELD_OUT_FRAMES)]
    for f in train:
        tr.frame_edges(f, config)
    return train, held


def _train_and_evaluate(train, held, config):
    t0 = time.process_time()
    state = tr.train(train, config, 10**9, 1, tr.TrainState.create(tr.init_params(config), 0),
                     time_budget_s=TRAIN_BUDGET_S)
    summary = tr.evaluate_dataset(held, state.params, config)
    return state, time.process_time() - t0, summary


@pytest.fixture(scope="module")
def full_model(toy_data):
    train, held = toy_data
    config = desk_config(**TOY_CONFIG)
    state, cpu, summary = _train_and_evaluate(train, held, config)
    return config, state, cpu, summary


def test_end_to_end_toy_training(full_model):
    config, state, cpu, summary = full_model
    ratio = summary.precision / max(summary.random_precision, 1e-12)
    ok = summary.acc >= 70.0 and ratio >= 5.0 and cpu <= CPU_BUDGET_S
    report("end-to-end toy training", ok,
           f"success {summary.acc:.0f}% on {summary.frames} held-out frames after {state.step} steps "
           f"({cpu / 60:.1f} CPU min); precision {summary.precision:.3f} vs random {summary.random_precision:.4f} "
           f"({ratio:.0f}x); filtered RRE {summary.rre_mean:.2f} deg, RTE {summary.rte_mean:.2f} m")
    assert ok


def test_ablation_direction(toy_data, full_model):
    train, held = toy_data
    config, state, _, full = full_model
    single = {}
    for mode in ("depth", "reflect"):
        single[mode] = tr.evaluate_dataset(held, state.params, config.replace(edge3d_mode=mode)).acc
    no_xch_config = config.replace(use_exchange=False)
    _, _, no_xch = _train_and_evaluate(train, held, no_xch_config)
    edges_ok = all(full.acc >= acc - 5.0 for acc in single.values())
    drop = full.acc - no_xch.acc
    ok = edges_ok and drop >= 30.0
    report("ablation direction", ok,
           f"combined {full.acc:.0f}% vs depth-only {single['depth']:.0f}% / reflectance-only "
           f"{single['reflect']:.0f}%; without exchange {no_xch.acc:.0f}% (drop {drop:.0f} points)")
    assert ok


# ---------------------------------------------------------------- metrics

def test_metrics_unit_suite():
    I = PoseSE3.identity()
    rng = np.random.default_rng(4)
    T = PoseSE3(rot_z(rng.uniform(-3, 3)) @ rot_x(rng.uniform(-1, 1)), rng.normal(size=3))
    e0 = compute_pose_error(T, T)
    e1 = compute_pose_error(I, PoseSE3(rot_z(np.radians(2.0)), np.zeros(3)))
    e2 = compute_pose_error(I, PoseSE3(np.eye(3), np.array([3.0, 4.0, 0.0])))
    e3 = compute_pose_error(T, se3_compose(T, PoseSE3(rot_z(np.radians(2.0)), np.zeros(3))))
    closed = max(e0.rre, e0.rte, abs(e1.rre - 2.0), e1.rte, e2.rre, abs(e2.rte - 5.0), abs(e3.rre - 2.0))
    s = tr.summarize([PoseError(1.0, 0.5), PoseError(12.0, 0.3), PoseError(3.0, 6.0)])
    filt = (s.rre_mean == 1.0 and s.rte_mean == 0.5 and s.filtered_frames == 1 and s.frames == 3
            and s.acc == 100.0 / 3.0)
    ok = closed <= 1e-9 and filt
    report("metrics unit suite", ok, f"closed-form max err {closed:.1e}; filtering example Acc {s.acc:.4f}%")
    assert ok


# ---------------------------------------------------------------- format fidelity

def test_format_fidelity(tmp_path):
    rng = np.random.default_rng(8)
    pts = rng.normal(scale=20, size=(5000, 4)).astype(np.float32)
    pts[:3] = [[np.float32(1e-30), -0.0, np.finfo(np.float32).max, 0.5]] * 3
    write_point_cloud_bin(tmp_path / "c.bin", PointCloud(pts.astype(np.float64)))
    raw_ok = (tmp_path / "c.bin").read_bytes() == pts.astype("<f4").tobytes()
    back = read_point_cloud_bin(tmp_path / "c.bin")
    write_point_cloud_bin(tmp_path / "d.bin", back)
    bin_ok = raw_ok and (tmp_path / "d.bin").read_bytes() == (tmp_path / "c.bin").read_bytes()

    K = np.array([[721.5, 0.0, 609.6], [0.0, 721.5, 172.9], [0.0, 0.0, 1.0]])
    P2 = np.hstack([K, np.array([[44.86], [0.2163], [0.002746]])])
    R = rot_z(0.02) @ CAM_FROM_LIDAR_LIKE
    Tr = np.hstack([R, np.array([[-0.004], [-0.076], [-0.27]])])
    fmt = lambda a: " ".join(f"{v:.17g}" for v in a.ravel())  # noqa: E731
    (tmp_path / "calib.txt").write_text(f"P0: {fmt(P2)}\nP2: {fmt(P2)}\nTr: {fmt(Tr)}\n")
    Kc, T = parse_kitti_calibration(tmp_path / "calib.txt")
    xyz = np.column_stack([rng.uniform(5, 60, 100), rng.uniform(-20, 20, 100), rng.uniform(-2, 2, 100)])
    h = P2 @ np.vstack([Tr @ np.vstack([xyz.T, np.ones(100)]), np.ones(100)])
    ref = (h[:2] / h[2]).T
    err = float(np.abs(project_points(Kc, T, xyz).uv - ref).max())
    ok = bin_ok and err < 1e-9
    report("format fidelity", ok, f".bin round-trip {'bit-exact' if bin_ok else 'MISMATCH'}; "
                                  f"calibration fold-in max err {err:.1e} px on 100 points")
    assert ok


CAM_FROM_LIDAR_LIKE = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
