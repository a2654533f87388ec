"""Partial-assignment matching head, correspondence extraction, labels and losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import CameraIntrinsics, PoseSE3, project_points

PROB_CLAMP = 1e-12


def init_match_params(rng: np.random.Generator, feature_dim: int) -> dict[str, Tensor]:
    D = feature_dim
    params: dict[str, Tensor] = {}
    params.update(ad.linear_params(rng, "match.proj2d", D, D))
    params.update(ad.linear_params(rng, "match.proj3d", D, D))
    params.update(ad.linear_params(rng, "match.sigma2d", D, 1))
    params.update(ad.linear_params(rng, "match.sigma3d", D, 1))
    params.update(ad.linear_params(rng, "fov", D, 1))
    return params


@dataclass
class AssignmentMatrix:
    P: Tensor
    sigma_2d: Tensor
    sigma_3d: Tensor
    S: Tensor
    log_P: Tensor


@dataclass
class CorrespondenceSet:
    pairs: np.ndarray        # (M, 2) (pixel index i, point index j)
    confidence: np.ndarray   # (M,)
    pixels: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))  # (M, 2) u, v
    points: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))  # (M, 3) x, y, z

    def __len__(self) -> int:
        return len(self.pairs)

    def resolve(self, kp2d: np.ndarray, kp3d: np.ndarray) -> "CorrespondenceSet":
        i, j = self.pairs[:, 0], self.pairs[:, 1]
        return CorrespondenceSet(self.pairs, self.confidence,
                                 np.asarray(kp2d, dtype=np.float64)[i].reshape(-1, 2),
                                 np.asarray(kp3d, dtype=np.float64)[j, :3].reshape(-1, 3))

    def to_csv(self, path: str | Path) -> None:
        lines = ["i,u,v,j,x,y,z,confidence"]
        for (i, j), c, (u, v), (x, y, z) in zip(self.pairs, self.confidence, self.pixels, self.points):
            lines.append(f"{i},{u:.6g},{v:.6g},{j},{x:.9g},{y:.9g},{z:.9g},{c:.9g}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class GroundTruthLabels:
    s_hat_3d: np.ndarray       # (N_3D,) bool, projects inside the image
    sigma_hat_2d: np.ndarray   # (N_2D,) bool
    sigma_hat_3d: np.ndarray   # (N_3D,) bool
    pairs: np.ndarray          # (M, 2) true (i, j)
    projected: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))  # (N_3D, 2) uv, NaN if behind

    def check(self) -> None:
        if len(self.pairs):
            i, j = self.pairs[:, 0], self.pairs[:, 1]
            assert self.sigma_hat_2d[i].all() and self.sigma_hat_3d[j].all() and self.s_hat_3d[j].all()
            assert len(np.unique(i)) == len(i) and len(np.unique(j)) == len(j)
        assert self.sigma_hat_3d.sum() == len(self.pairs) == self.sigma_hat_2d.sum()


def similarity_matrix(d2d: Tensor, d3d: Tensor, params, scale: float = 1.0) -> Tensor:
    """Bilinear scores between projected descriptors, optionally multiplied by ``scale``."""
    a = ad.linear(d2d, params, "match.proj2d")
    b = ad.linear(d3d, params, "match.proj3d")
    S = ad.matmul(a, ad.transpose(b))
    return S if scale == 1.0 else ad.mul(S, scale)


def matchability_scores(d2d: Tensor, d3d: Tensor, params) -> tuple[Tensor, Tensor]:
    s2 = ad.sigmoid(ad.linear(d2d, params, "match.sigma2d"))
    s3 = ad.sigmoid(ad.linear(d3d, params, "match.sigma3d"))
    return ad.reshape(s2, (d2d.shape[0],)), ad.reshape(s3, (d3d.shape[0],))


def log_assignment(S: Tensor, sigma_2d: Tensor, sigma_3d: Tensor) -> Tensor:
    """log P with the column softmax (over pixels) and row softmax (over points) in log space."""
    S = ad.as_tensor(S)
    n2, n3 = S.shape
    log_s2 = ad.reshape(ad.log(ad.clip(ad.as_tensor(sigma_2d), PROB_CLAMP, 1.0)), (n2, 1))
    log_s3 = ad.reshape(ad.log(ad.clip(ad.as_tensor(sigma_3d), PROB_CLAMP, 1.0)), (1, n3))
    return log_s2 + log_s3 + ad.log_softmax(S, axis=0) + ad.log_softmax(S, axis=1)


def assignment_matrix(S, sigma_2d, sigma_3d) -> AssignmentMatrix:
    S = ad.as_tensor(S)
    s2, s3 = ad.as_tensor(sigma_2d), ad.as_tensor(sigma_3d)
    col = ad.softmax(S, axis=0)
    row = ad.softmax(S, axis=1)
    P = ad.reshape(s2, (S.shape[0], 1)) * ad.reshape(s3, (1, S.shape[1])) * col * row
    return AssignmentMatrix(P, s2, s3, S, log_assignment(S, s2, s3))


def extract_correspondences(P, min_confidence: float = 0.0) -> CorrespondenceSet:
    """Pairs whose entry is the strict maximum of both its row and its column."""
    P = np.asarray(getattr(P, "data", P), dtype=np.float64)
    if P.size == 0:
        return CorrespondenceSet(np.empty((0, 2), dtype=np.int64), np.empty(0))
    row_max = P.max(axis=1, keepdims=True)
    col_max = P.max(axis=0, keepdims=True)
    row_unique = (P == row_max).sum(axis=1, keepdims=True) == 1
    col_unique = (P == col_max).sum(axis=0, keepdims=True) == 1
    ok = (P == row_max) & (P == col_max) & row_unique & col_unique & (P >= min_confidence)
    i, j = np.nonzero(ok)
    return CorrespondenceSet(np.column_stack([i, j]).astype(np.int64), P[i, j])


def ground_truth_labels(kp2d: np.ndarray, kp3d: np.ndarray, K: CameraIntrinsics, T: PoseSE3,
                        width: int, height: int, eps_corr: float = 3.0) -> GroundTruthLabels:
    """Project edge points with the true pose and pair each with its nearest edge pixel.

    A point pairs with the nearest pixel closer than ``eps_corr`` (ties: lowest
    pixel index); a pixel claimed by several points keeps the closest one
    (ties: lowest point index), so pairs are one-to-one.
    """
    kp2d = np.asarray(kp2d, dtype=np.float64).reshape(-1, 2)
    kp3d = np.asarray(kp3d, dtype=np.float64)
    n2, n3 = len(kp2d), len(kp3d)
    proj = project_points(K, T, kp3d[:, :3])
    uv = proj.uv
    inside = proj.in_front.copy()
    inside[inside] = ((uv[inside, 0] >= -0.5) & (uv[inside, 0] < width - 0.5)
                      & (uv[inside, 1] >= -0.5) & (uv[inside, 1] < height - 0.5))
    best_pixel = np.full(n3, -1)
    best_dist = np.full(n3, np.inf)
    cand = np.flatnonzero(inside)
    if n2 and len(cand):
        tree = cKDTree(kp2d)
        hits = tree.query_ball_point(uv[cand], r=eps_corr)
        for j, near in zip(cand, hits):
            if not near:
                continue
            near = np.asarray(near)
            d = np.hypot(*(kp2d[near] - uv[j]).T)
            ok = d < eps_corr
            if not ok.any():
                continue
            near, d = near[ok], d[ok]
            order = np.lexsort((near, d))
            best_pixel[j], best_dist[j] = near[order[0]], d[order[0]]
    owner: dict[int, int] = {}
    for j in np.flatnonzero(best_pixel >= 0):
        i = int(best_pixel[j])
        prev = owner.get(i)
        if prev is None or best_dist[j] < best_dist[prev]:
            owner[i] = int(j)
    pairs = np.array(sorted((i, j) for i, j in owner.items()), dtype=np.int64).reshape(-1, 2)
    sig2 = np.zeros(n2, dtype=bool)
    sig3 = np.zeros(n3, dtype=bool)
    sig2[pairs[:, 0]] = True
    sig3[pairs[:, 1]] = True
    return GroundTruthLabels(inside, sig2, sig3, pairs, uv)


def predict_fov_scores(d3d: Tensor, params) -> Tensor:
    return ad.reshape(ad.sigmoid(ad.linear(d3d, params, "fov")), (d3d.shape[0],))


def binary_cross_entropy(p: Tensor, target: np.ndarray) -> Tensor:
    p = ad.clip(ad.as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(target, dtype=np.float64)
    terms = ad.mul(ad.log(p), y) + ad.mul(ad.log(1.0 - p), 1.0 - y)
    return -ad.mean(terms)


@dataclass
class Losses:
    fov: Tensor
    sigma: Tensor
    match: Tensor
    total: Tensor
    no_pairs: bool

    def values(self) -> dict[str, float]:
        return {"L_fov": float(self.fov.data), "L_sigma": float(self.sigma.data),
                "L_P": float(self.match.data), "L_total": float(self.total.data)}


def compute_losses(assign: AssignmentMatrix | Tensor, sigma_2d: Tensor, sigma_3d: Tensor, s_3d: Tensor,
                   labels: GroundTruthLabels, weights=(1.0, 1.0, 1.0)) -> Losses:
    """FOV BCE, matchability BCEs and the mean negative log-assignment over true pairs.

    ``assign`` may be an AssignmentMatrix (its log-domain P is used) or a plain
    P tensor, in which case log P is taken after clamping.
    """
    l_fov = binary_cross_entropy(s_3d, labels.s_hat_3d)
    l_sigma = binary_cross_entropy(sigma_2d, labels.sigma_hat_2d) + binary_cross_entropy(sigma_3d, labels.sigma_hat_3d)
    no_pairs = len(labels.pairs) == 0
    if no_pairs:
        l_p = Tensor(0.0)
    else:
        if isinstance(assign, AssignmentMatrix):
            # log-softmax terms are finite by construction and the sigmas are
            # clamped already; clamping here would cut the gradient of
            # confidently wrong assignments
            logp = assign.log_P
        else:
            logp = ad.log(ad.clip(ad.as_tensor(assign), PROB_CLAMP, 1.0 - PROB_CLAMP))
        n3 = logp.shape[1]
        flat = ad.reshape(logp, (-1,))
        picked = ad.gather_rows(flat, labels.pairs[:, 0] * n3 + labels.pairs[:, 1])
        l_p = -ad.mean(picked)
    wf, ws, wp = weights
    total = ad.mul(l_fov, wf) + ad.mul(l_sigma, ws) + ad.mul(l_p, wp)
    return Losses(l_fov, l_sigma, l_p, total, no_pairs)
