"""Training and evaluation loops for the registration network."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import exchange, featnet, matchlayer
from .autodiff import Tensor
from .config import PipelineConfig
from .dataio import FramePair, downsample_random
from .edge2d import extract_edge_pixels
from .edge3d import EdgePointSet, extract_edge_points
from .errors import ContractError, EdgeRegError, NumericError
from .geometry import PoseError, PoseSE3, compute_pose_error, project_points, sample_pose_perturbation, se3_compose, se3_invert
from .pose import RansacResult, ransac_epnp

LOG_FIELDS = ("step", "L_fov", "L_sigma", "L_P", "L_total")
FILTER_RRE, FILTER_RTE = 10.0, 5.0
SUCCESS_RRE, SUCCESS_RTE = 5.0, 2.0


class EmptyFrameError(EdgeRegError):
    """A frame produced no edge pixels or no edge points."""


# ------------------------------------------------------------------ parameters

def init_params(config: PipelineConfig, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = featnet.init_featnet_params(rng, config.feature_dim, config.image_channels, config.sa_widths)
    if config.exchange_blocks > 0:
        params.update(exchange.init_exchange_params(rng, config.feature_dim, config.exchange_blocks))
    params.update(matchlayer.init_match_params(rng, config.feature_dim))
    return params


def save_params(path: str | Path, params: dict[str, Tensor]) -> None:
    ad.save_checkpoint(path, params)


def load_params(path: str | Path) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in ad.load_checkpoint(path).items()}


# ------------------------------------------------------------------ forward

@dataclass
class FrameOutput:
    assignment: matchlayer.AssignmentMatrix
    s_3d: Tensor
    labels: matchlayer.GroundTruthLabels
    losses: matchlayer.Losses
    kp2d: np.ndarray          # (N_2D, 2) pixel coordinates
    kp3d: np.ndarray          # (N_3D, 4) edge points in the (possibly augmented) LiDAR frame
    T: PoseSE3                # pose that maps kp3d into the camera
    edge_points: EdgePointSet

    @property
    def no_pairs(self) -> bool:
        return self.losses.no_pairs


def frame_edges(frame: FramePair, config: PipelineConfig) -> tuple[np.ndarray, EdgePointSet]:
    """Edge pixels and edge points for ``frame``, cached on the frame for reuse."""
    key = (config.edge2d_method, tuple(config.sobel_thresholds), tuple(config.canny_thresholds),
           config.edge3d_mode, config.eps_depth, config.eps_reflect)
    cache = frame.meta.setdefault("_edge_cache", {})
    if key not in cache:
        px = extract_edge_pixels(frame.image, config.edge2d_method, config.sobel_thresholds,
                                 config.canny_thresholds).pixels
        pts = extract_edge_points(frame.cloud, config.eps_depth, config.eps_reflect, config.edge3d_mode)
        cache[key] = (px, pts)
    return cache[key]


def _subsample(n: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    if cap <= 0 or n <= cap:
        return np.arange(n)
    return np.sort(rng.choice(n, cap, replace=False))


def forward_frame(frame: FramePair, params: dict[str, Tensor], config: PipelineConfig,
                  rng: np.random.Generator | None = None, augment: bool = False,
                  training: bool = False) -> FrameOutput:
    """Edges -> (augmentation) -> features -> exchange -> matching heads -> labels and losses.

    With ``augment`` the cloud is moved by a random planar pose P and the
    labels use the composite pose T_gt * P^-1, which the network must recover.
    With ``training`` each keypoint set is randomly thinned to
    ``config.train_max_keypoints``.
    """
    kp2d, edges = frame_edges(frame, config)
    if len(kp2d) == 0 or len(edges) == 0:
        raise EmptyFrameError(f"frame has {len(kp2d)} edge pixels and {len(edges)} edge points")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if training and config.train_max_keypoints:
        kp2d = kp2d[_subsample(len(kp2d), config.train_max_keypoints, rng)]
        keep = _subsample(len(edges), config.train_max_keypoints, rng)
        edges = EdgePointSet(edges.points[keep], edges.indices[keep], edges.provenance[keep])
    kp3d = edges.points.copy()
    T = frame.T_gt
    cloud = downsample_random(frame.cloud, config.point_downsample, rng).points.copy()
    if augment:
        yaw = None if config.aug_max_yaw_deg is None else np.radians(config.aug_max_yaw_deg)
        P = sample_pose_perturbation(rng, config.aug_max_xy, yaw)
        kp3d[:, :3] = P.apply(kp3d[:, :3])
        cloud[:, :3] = P.apply(cloud[:, :3])
        T = se3_compose(frame.T_gt, se3_invert(P))

    img = frame.image
    grid = featnet.extract_image_features(img, params)
    f2d = ad.add(featnet.sample_bilinear(grid, kp2d),
                 featnet.positional_embedding(featnet.normalize_pixels(kp2d, img.width, img.height), params, "pos2d"))
    f3d = featnet.extract_point_features(cloud, kp3d, params, config.fps_counts, config.sa_radii,
                                         config.sa_kmax, rng)
    f3d = ad.add(f3d, featnet.positional_embedding(featnet.normalize_points(kp3d), params, "pos3d"))
    if config.use_exchange and config.exchange_blocks > 0:
        f2d, f3d = exchange.run_exchange_stack(f2d, f3d, params, config.exchange_blocks, config.heads,
                                               config.layer_norm)
    S = matchlayer.similarity_matrix(f2d, f3d, params, 1.0 / np.sqrt(config.feature_dim))
    s2, s3 = matchlayer.matchability_scores(f2d, f3d, params)
    assign = matchlayer.assignment_matrix(S, s2, s3)
    s_3d = matchlayer.predict_fov_scores(f3d, params)
    labels = matchlayer.ground_truth_labels(kp2d, kp3d, frame.K, T, img.width, img.height, config.eps_corr)
    losses = matchlayer.compute_losses(assign, s2, s3, s_3d, labels,
                                       (config.lambda_fov, config.lambda_sigma, config.lambda_p))
    return FrameOutput(assign, s_3d, labels, losses, kp2d, kp3d, T, edges)


# ------------------------------------------------------------------ optimisation

@dataclass
class TrainState:
    params: dict[str, Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: np.random.Generator
    step: int = 0
    lr_scale: float = 1.0
    running: dict[str, float] = field(default_factory=dict)
    history: list[dict[str, float]] = field(default_factory=list)

    @classmethod
    def create(cls, params: dict[str, Tensor], seed: int = 0) -> "TrainState":
        m = {k: np.zeros_like(t.data) for k, t in params.items()}
        v = {k: np.zeros_like(t.data) for k, t in params.items()}
        return cls(params, m, v, np.random.default_rng(seed))


def _zero_grads(params):
    for t in params.values():
        t.grad = None


def train_step(state: TrainState, frames: Sequence[FramePair], config: PipelineConfig,
               ema: float = 0.9) -> dict[str, float]:
    """One optimiser step on the batch-mean loss; frames without true pairs are skipped."""
    params = state.params
    rng_state = state.rng.bit_generator.state
    _zero_grads(params)
    totals = dict.fromkeys(("L_fov", "L_sigma", "L_P", "L_total"), 0.0)
    used = skipped = 0
    try:
        for frame in frames:
            try:
                out = forward_frame(frame, params, config, state.rng, augment=config.augment, training=True)
            except EmptyFrameError:
                skipped += 1
                continue
            if out.no_pairs:
                skipped += 1
                continue
            total = out.losses.total
            if not np.isfinite(total.data):
                raise NumericError("non-finite training loss")
            total.backward()
            for k, val in out.losses.values().items():
                totals[k] += val
            used += 1
    except NumericError:
        _zero_grads(params)
        state.rng.bit_generator.state = rng_state
        raise
    if used == 0:
        _zero_grads(params)
        raise ContractError("no usable frame in the batch (all lacked edges or true pairs)")

    grads = {k: (t.grad / used if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if not np.isfinite(norm):
        _zero_grads(params)
        state.rng.bit_generator.state = rng_state
        raise NumericError("non-finite gradient norm")
    if config.grad_clip > 0 and norm > config.grad_clip:
        grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    lr_t = config.learning_rate * state.lr_scale * np.sqrt(1 - b2 ** state.step) / (1 - b1 ** state.step)
    for k, t in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        t.data = t.data - lr_t * state.m[k] / (np.sqrt(state.v[k]) + config.adam_eps)
    _zero_grads(params)

    record = {k: v / used for k, v in totals.items()}
    for k, val in record.items():
        prev = state.running.get(k)
        state.running[k] = val if prev is None else ema * prev + (1 - ema) * val
    record.update(step=state.step, used=used, skipped=skipped, grad_norm=norm)
    state.history.append(record)
    return record


def write_log(path: str | Path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for row in history:
            writer.writerow([row["step"]] + [f"{row[k]:.9g}" for k in LOG_FIELDS[1:]])


def train(frames: Sequence[FramePair], config: PipelineConfig, steps: int, batch_size: int = 1,
          state: TrainState | None = None, time_budget_s: float | None = None,
          callback: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Run ``steps`` optimiser steps over shuffled epochs of ``frames``."""
    if not frames:
        raise ContractError("training needs at least one frame")
    state = state or TrainState.create(init_params(config), config.seed)
    start = time.perf_counter()
    order: list[int] = []
    for i in range(steps):
        if config.lr_schedule == "cosine":
            progress = i / steps
            if time_budget_s:
                progress = max(progress, (time.perf_counter() - start) / time_budget_s)
            state.lr_scale = 0.5 * (1.0 + np.cos(np.pi * min(progress, 1.0)))
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(state.rng.permutation(len(frames)))
            batch.append(frames[order.pop()])
        try:
            record = train_step(state, batch, config)
        except ContractError:
            continue
        if callback is not None:
            callback(state, record)
        if time_budget_s is not None and time.perf_counter() - start > time_budget_s:
            break
    return state


# ------------------------------------------------------------------ evaluation

@dataclass
class FrameResult:
    error: PoseError | None
    correspondences: int
    inliers: int
    correct: int              # predicted pairs within eps_corr of the true projection
    random_rate: float        # fraction of all (pixel, point) pairs within eps_corr
    pose: PoseSE3 | None = None
    ransac: RansacResult | None = None

    @property
    def success(self) -> bool:
        return self.error is not None and self.error.rre < SUCCESS_RRE and self.error.rte < SUCCESS_RTE


@dataclass
class EvalSummary:
    rte_mean: float
    rte_std: float
    rre_mean: float
    rre_std: float
    acc: float                # percent of all frames that succeed
    frames: int
    filtered_frames: int
    results: list[FrameResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("rte_mean", "rte_std", "rre_mean", "rre_std", "acc",
                                              "frames", "filtered_frames")}

    @property
    def precision(self) -> float:
        pred = sum(r.correspondences for r in self.results)
        return sum(r.correct for r in self.results) / pred if pred else 0.0

    @property
    def random_precision(self) -> float:
        rates = [r.random_rate for r in self.results if r.correspondences]
        return float(np.mean(rates)) if rates else 0.0


def summarize(errors: Sequence[PoseError | None]) -> EvalSummary:
    """Filtered means over frames with RRE < 10 deg and RTE < 5 m; Acc over all frames."""
    if not errors:
        raise ContractError("no frames to summarize")
    kept = [e for e in errors if e is not None and e.rre < FILTER_RRE and e.rte < FILTER_RTE]
    ok = sum(1 for e in errors if e is not None and e.rre < SUCCESS_RRE and e.rte < SUCCESS_RTE)
    rre = np.array([e.rre for e in kept])
    rte = np.array([e.rte for e in kept])

    def stat(a, fn):
        return float(fn(a)) if len(a) else float("nan")

    return EvalSummary(stat(rte, np.mean), stat(rte, np.std), stat(rre, np.mean), stat(rre, np.std),
                       100.0 * ok / len(errors), len(errors), len(kept))


def _pair_hits(kp2d, kp3d, T, K, eps) -> np.ndarray:
    """(N_2D, N_3D) mask of pairs whose projection lies within ``eps`` of the pixel."""
    proj = project_points(K, T, kp3d[:, :3])
    uv = np.where(proj.in_front[:, None], proj.uv, np.inf)
    d = np.hypot(kp2d[:, None, 0] - uv[None, :, 0], kp2d[:, None, 1] - uv[None, :, 1])
    return d <= eps


def register_frame(frame: FramePair, params, config: PipelineConfig, rng: np.random.Generator) -> FrameResult:
    try:
        out = forward_frame(frame, params, config, rng, augment=False)
    except EmptyFrameError:
        return FrameResult(None, 0, 0, 0, 0.0)
    corr = matchlayer.extract_correspondences(out.assignment.P, config.min_confidence)
    hits = _pair_hits(out.kp2d.astype(np.float64), out.kp3d, out.T, frame.K, config.eps_corr)
    random_rate = float(hits.mean())
    n = len(corr)
    correct = int(hits[corr.pairs[:, 0], corr.pairs[:, 1]].sum()) if n else 0
    if n < 4:
        return FrameResult(None, n, 0, correct, random_rate)
    corr = corr.resolve(out.kp2d, out.kp3d)
    result = ransac_epnp(corr.pixels, corr.points, frame.K, config.ransac_threshold, config.ransac_confidence,
                         config.ransac_max_iters, rng)
    if not result.success:
        return FrameResult(None, n, 0, correct, random_rate, ransac=result)
    err = compute_pose_error(frame.T_gt, result.pose)
    return FrameResult(err, n, result.inlier_count, correct, random_rate, result.pose, result)


def evaluate_dataset(frames: Sequence[FramePair], params, config: PipelineConfig, workers: int = 1) -> EvalSummary:
    """Register every frame and summarise; each frame gets its own seeded generator."""
    if not frames:
        raise ContractError("evaluation needs at least one frame")

    def run(index: int) -> FrameResult:
        return register_frame(frames[index], params, config, np.random.default_rng([config.seed, index]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(frames))))
    else:
        results = [run(i) for i in range(len(frames))]
    summary = summarize([r.error for r in results])
    summary.results = results
    return summary
