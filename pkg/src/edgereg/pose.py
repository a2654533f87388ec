"""Pose from 2D-3D correspondences: EPnP, RANSAC wrapper, reprojection errors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegeneracyError
from .geometry import CameraIntrinsics, PoseSE3, project_points

PLANAR_TOL = 1e-6
COLLINEAR_TOL = 1e-10
MIN_SAMPLE = 4
GOOD_FIT_PX = 0.25  # stop multi-start refinement once the fit is this tight


def reprojection_errors(pixels, points, K: CameraIntrinsics, T: PoseSE3) -> np.ndarray:
    """Per-pair pixel distance to the projection; +inf for points behind the camera."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    proj = project_points(K, T, points)
    err = np.full(len(pixels), np.inf)
    ok = proj.in_front
    err[ok] = np.hypot(*(proj.uv[ok] - pixels[ok]).T)
    return err


def _control_points(pw: np.ndarray):
    centroid = pw.mean(axis=0)
    centred = pw - centroid
    evals, evecs = np.linalg.eigh(centred.T @ centred / len(pw))
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if evals[0] <= 0 or evals[1] / evals[0] < COLLINEAR_TOL:
        raise DegeneracyError("points are collinear or coincident")
    planar = np.sqrt(max(evals[2], 0.0) / evals[0]) < PLANAR_TOL
    count = 2 if planar else 3
    axes = evecs[:, :count] * np.sqrt(evals[:count])
    return np.vstack([centroid, centroid + axes.T]), centred, evecs[:, :count] / np.sqrt(evals[:count])


def _design_matrix(alphas: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    n, nc = alphas.shape
    M = np.zeros((n, 2, nc, 3))
    M[:, 0, :, 0] = alphas * K.fx
    M[:, 0, :, 2] = alphas * (K.cx - pixels[:, :1])
    M[:, 1, :, 1] = alphas * K.fy
    M[:, 1, :, 2] = alphas * (K.cy - pixels[:, 1:])
    return M.reshape(2 * n, 3 * nc)


def _procrustes(pw: np.ndarray, pc: np.ndarray) -> PoseSE3:
    mw, mc = pw.mean(axis=0), pc.mean(axis=0)
    U, _, Vt = np.linalg.svd((pc - mc).T @ (pw - mw))
    if np.linalg.det(U @ Vt) < 0:
        U = U * np.array([1.0, 1.0, -1.0])
    R = U @ Vt
    return PoseSE3(R, mc - R @ mw)


def _mean_reprojection(pixels, pw, K: CameraIntrinsics, T: PoseSE3) -> float:
    cam = pw @ T.R.T + T.t
    z = cam[:, 2]
    if np.any(z <= 0):
        return np.inf
    du = K.fx * cam[:, 0] / z + K.cx - pixels[:, 0]
    dv = K.fy * cam[:, 1] / z + K.cy - pixels[:, 1]
    return float(np.mean(np.sqrt(du * du + dv * dv)))


def _gauss_newton(betas, dv, rho, iters: int = 5):
    """Refine kernel weights so control-point distances match ``rho``; ``dv`` is (pairs, 3, n)."""
    n = len(betas)
    for _ in range(iters):
        d = dv @ betas                              # (pairs, 3)
        r = np.einsum("pk,pk->p", d, d) - rho
        J = 2.0 * np.einsum("pk,pkn->pn", d, dv)
        JtJ = J.T @ J
        JtJ.flat[::n + 1] *= 1.0 + 1e-12
        try:
            step = np.linalg.solve(JtJ, -J.T @ r)
        except np.linalg.LinAlgError:
            break
        betas = betas + step
        if np.abs(step).max() < 1e-10 * (1.0 + np.abs(betas).max()):
            break
    return betas


def _linearized_betas(dv, rho):
    """Closed-form kernel weights from the linearized distance constraints (None if underdetermined)."""
    n = dv.shape[2]
    a, b = np.triu_indices(n)
    if len(a) > len(rho):
        return None
    L = np.einsum("pka,pkb->pab", dv, dv)[:, a, b] * np.where(a == b, 1.0, 2.0)
    prod, *_ = np.linalg.lstsq(L, rho, rcond=None)
    full = np.zeros((n, n))
    full[a, b] = prod
    betas = np.sqrt(np.abs(np.diag(full)))
    if betas[0] > 0:
        betas[1:] *= np.sign(full[0, 1:]) + (full[0, 1:] == 0)
    return betas


def epnp(pixels, points, K: CameraIntrinsics, multistart: bool = True) -> PoseSE3:
    """Efficient PnP for >= 4 correspondences (3 control points when the points are planar).

    With 4 or 5 points the kernel is too large to linearize, so weights are
    refined from the lower-dimensional estimates; ``multistart`` adds axis
    starts as well, which is slower and unnecessary inside RANSAC.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    pw = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pw) < MIN_SAMPLE or len(pixels) != len(pw):
        raise ContractError("EPnP needs at least 4 matched pixel/point pairs")
    ctrl, centred, proj = _control_points(pw)
    nc = len(ctrl)
    coeffs = centred @ proj
    alphas = np.column_stack([1.0 - coeffs.sum(axis=1), coeffs])
    M = _design_matrix(alphas, pixels, K)
    _, kernel = np.linalg.eigh(M.T @ M)             # ascending eigenvalues
    i, j = np.triu_indices(nc, 1)
    rho = np.sum((ctrl[i] - ctrl[j]) ** 2, axis=1)
    blocks = kernel.reshape(nc, 3, -1)
    diff = blocks[i] - blocks[j]                    # (pairs, 3, 3 * nc)

    best, best_err = None, np.inf

    def consider(betas):
        nonlocal best, best_err
        k = len(betas)
        pc = alphas @ (kernel[:, :k] @ betas).reshape(nc, 3)
        if pc[:, 2].mean() < 0:
            pc = -pc
        T = _procrustes(pw, pc)
        err = _mean_reprojection(pixels, pw, K, T)
        if best is None or err < best_err:
            best, best_err = T, err

    found = []
    small = len(pw) < 6 and nc == 4
    # for 4 or 5 points only the 3-dim estimate is a useful start for the full kernel
    dims = (3,) if small and not multistart else (1, 2, 3)
    for n in dims:
        dv = diff[:, :, :n]
        betas = _linearized_betas(dv, rho)
        if betas is None:
            continue
        betas = _gauss_newton(betas, dv, rho)
        found.append(betas)
        consider(betas)
        if best_err < GOOD_FIT_PX and len(pw) >= 6:
            break
    if small and best_err >= GOOD_FIT_PX:
        dv = diff[:, :, :4]
        starts = [np.append(b, np.zeros(4 - len(b))) for b in found]
        if multistart:
            scale = np.sqrt(rho.mean() / 2.0)
            starts += [scale * sign * np.eye(4)[k] for k in range(4) for sign in (1.0, -1.0)]
        for start in starts:
            consider(_gauss_newton(start, dv, rho, iters=15))
            if best_err < GOOD_FIT_PX:
                break
    if best is None:
        raise DegeneracyError("EPnP found no valid pose")
    return best


def _solve_damped(JtJ, rhs):
    n = JtJ.shape[-1]
    trace = np.trace(JtJ, axis1=-2, axis2=-1)[..., None, None]
    return np.linalg.solve(JtJ + (1e-12 * trace + 1e-30) * np.eye(n), rhs[..., None])[..., 0]


def _gauss_newton_batch(betas, dv, rho, iters):
    for _ in range(iters):
        d = np.einsum("bpkn,bn->bpk", dv, betas)
        r = np.einsum("bpk,bpk->bp", d, d) - rho
        J = 2.0 * np.einsum("bpk,bpkn->bpn", d, dv)
        step = _solve_damped(np.einsum("bpn,bpm->bnm", J, J), -np.einsum("bpn,bp->bn", J, r))
        betas = betas + step
        if np.all(np.abs(step) <= 1e-10 * (1.0 + np.abs(betas))):
            break
    return betas


def _epnp_minimal_batch(pixels: np.ndarray, pw: np.ndarray, K: CameraIntrinsics):
    """Vectorized EPnP for a stack of non-planar 4-point samples.

    Returns (R, t, usable); samples that are planar or degenerate are flagged
    unusable and left to the scalar solver.
    """
    B, n = pw.shape[:2]
    centroid = pw.mean(axis=1)
    centred = pw - centroid[:, None]
    evals, evecs = np.linalg.eigh(np.einsum("bni,bnj->bij", centred, centred) / n)
    evals, evecs = evals[:, ::-1], evecs[:, :, ::-1]
    top = np.maximum(evals[:, 0], 1e-300)
    usable = ((evals[:, 0] > 0) & (evals[:, 1] / top >= COLLINEAR_TOL)
              & (np.sqrt(np.maximum(evals[:, 2], 0.0) / top) >= PLANAR_TOL))
    sq = np.sqrt(np.where(usable[:, None], np.maximum(evals, 1e-300), 1.0))
    ctrl = np.concatenate([centroid[:, None], centroid[:, None] + (evecs * sq[:, None]).transpose(0, 2, 1)], axis=1)
    coeffs = np.einsum("bni,bik->bnk", centred, evecs / sq[:, None])
    alphas = np.concatenate([1.0 - coeffs.sum(axis=2, keepdims=True), coeffs], axis=2)   # (B, n, 4)

    M = np.zeros((B, n, 2, 4, 3))
    M[:, :, 0, :, 0] = alphas * K.fx
    M[:, :, 0, :, 2] = alphas * (K.cx - pixels[:, :, :1])
    M[:, :, 1, :, 1] = alphas * K.fy
    M[:, :, 1, :, 2] = alphas * (K.cy - pixels[:, :, 1:])
    M = M.reshape(B, 2 * n, 12)
    _, kernel = np.linalg.eigh(np.einsum("bri,brj->bij", M, M))
    i, j = np.triu_indices(4, 1)
    rho = np.sum((ctrl[:, i] - ctrl[:, j]) ** 2, axis=2)                                   # (B, 6)
    blocks = kernel.reshape(B, 4, 3, 12)
    diff = blocks[:, i] - blocks[:, j]                                                     # (B, 6, 3, 12)

    starts = []
    for k in (1, 2, 3):
        dv = diff[..., :k]
        a, b = np.triu_indices(k)
        L = np.einsum("zpkx,zpky->zpxy", dv, dv)[:, :, a, b] * np.where(a == b, 1.0, 2.0)
        prod = np.einsum("zij,zj->zi", np.linalg.pinv(L), rho)
        full = np.zeros((B, k, k))
        full[:, a, b] = prod
        betas = np.sqrt(np.abs(np.diagonal(full, axis1=1, axis2=2)))
        betas[:, 1:] *= np.sign(full[:, 0, 1:]) + (full[:, 0, 1:] == 0)
        betas = _gauss_newton_batch(betas, dv, rho, 5)
        starts.append(np.concatenate([betas, np.zeros((B, 4 - k))], axis=1))
    scale = np.sqrt(rho.mean(axis=1) / 2.0)[:, None]
    starts += [scale * sign * np.eye(4)[k] for k in range(4) for sign in (1.0, -1.0)]
    S = len(starts)
    # every start refined in the full kernel, all samples and starts at once
    betas = _gauss_newton_batch(np.concatenate(starts), np.tile(diff[..., :4], (S, 1, 1, 1)), np.tile(rho, (S, 1)), 15)
    cands = [betas[s * B:(s + 1) * B] for s in range(S)] + [st for st in starts[:3]]

    best_R = np.tile(np.eye(3), (B, 1, 1))
    best_t = np.zeros((B, 3))
    best_err = np.full(B, np.inf)
    mw = pw.mean(axis=1)
    for betas in cands:
        cc = np.einsum("bik,bk->bi", kernel[:, :, :4], betas).reshape(B, 4, 3)
        pc = np.einsum("bnc,bci->bni", alphas, cc)
        pc = np.where((pc[:, :, 2].mean(axis=1) < 0)[:, None, None], -pc, pc)
        mc = pc.mean(axis=1)
        H = np.einsum("bni,bnj->bij", pc - mc[:, None], pw - mw[:, None])
        H = np.where(np.isfinite(H), H, 0.0)
        U, _, Vt = np.linalg.svd(H)
        flip = np.linalg.det(U @ Vt) < 0
        U[flip, :, 2] *= -1.0
        R = U @ Vt
        t = mc - np.einsum("bij,bj->bi", R, mw)
        err = _batch_errors(pixels, pw, K, R, t).mean(axis=1)
        better = err < best_err
        best_R[better], best_t[better], best_err[better] = R[better], t[better], err[better]
    usable &= np.isfinite(best_err)
    return best_R, best_t, usable


def _batch_errors(pixels, pw, K: CameraIntrinsics, R, t) -> np.ndarray:
    """(B, N) reprojection errors for B poses; +inf behind the camera."""
    cam = np.einsum("bij,bnj->bni", R, pw) + t[:, None] if pw.ndim == 3 else np.einsum("bij,nj->bni", R, pw) + t[:, None]
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = K.fx * cam[..., 0] / z + K.cx - pixels[..., 0]
        dv = K.fy * cam[..., 1] / z + K.cy - pixels[..., 1]
        err = np.sqrt(du * du + dv * dv)
    return np.where(z > 0, err, np.inf)


@dataclass
class RansacResult:
    success: bool
    pose: PoseSE3 | None
    inlier_mask: np.ndarray
    iterations_used: int
    mean_inlier_reproj_error: float

    @property
    def inlier_count(self) -> int:
        return int(self.inlier_mask.sum())


def _required_iterations(inlier_ratio: float, confidence: float) -> float:
    if inlier_ratio <= 0:
        return np.inf
    w4 = inlier_ratio ** MIN_SAMPLE
    if w4 >= 1.0:
        return 0.0
    return np.log(1.0 - confidence) / np.log(1.0 - w4)


def ransac_epnp(pixels, points, K: CameraIntrinsics, threshold_px: float = 3.0, confidence: float = 0.999,
                max_iters: int = 2000, rng: np.random.Generator | None = None, chunk: int = 32) -> RansacResult:
    """Robust EPnP: 4-point hypotheses, adaptive stopping, all-inlier refit.

    Hypotheses are drawn and solved in chunks but scored in draw order, so the
    result for a fixed ``rng`` does not depend on ``chunk``.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    pw = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pw)
    if n < MIN_SAMPLE or len(pixels) != n:
        raise ContractError("RANSAC needs at least 4 matched correspondences")
    if threshold_px <= 0 or not 0 < confidence < 1 or max_iters < 1:
        raise ContractError("threshold must be positive, confidence in (0, 1), max_iters >= 1")
    rng = rng or np.random.default_rng(0)
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    best_err = np.inf
    best_pose = None
    needed = float(max_iters)
    it = 0
    while it < min(max_iters, needed):
        size = int(min(chunk, max_iters - it))
        samples = np.stack([rng.choice(n, size=MIN_SAMPLE, replace=False) for _ in range(size)])
        R, t, usable = _epnp_minimal_batch(pixels[samples], pw[samples], K)
        for k in np.flatnonzero(~usable):
            try:
                T = epnp(pixels[samples[k]], pw[samples[k]], K, multistart=False)
            except DegeneracyError:
                continue
            R[k], t[k], usable[k] = T.R, T.t, True
        errs = _batch_errors(pixels, pw, K, R, t)
        for k in range(size):
            if it >= min(max_iters, needed):
                break
            it += 1
            if not usable[k]:
                continue
            mask = errs[k] <= threshold_px
            count = int(mask.sum())
            # a 4-point model nearly always fits its own sample, so consensus
            # has to come from pairs that were not used to build it
            if count - int(mask[samples[k]].sum()) < MIN_SAMPLE:
                continue
            mean_err = float(errs[k][mask].mean())
            if count > best_count or (count == best_count and mean_err < best_err):
                best_mask, best_count, best_err = mask, count, mean_err
                best_pose = PoseSE3(R[k].copy(), t[k].copy())
                needed = _required_iterations(count / n, confidence)
    if best_pose is None:
        return RansacResult(False, None, np.zeros(n, dtype=bool), it, float("nan"))
    try:
        refit = epnp(pixels[best_mask], pw[best_mask], K)
        err = reprojection_errors(pixels, pw, K, refit)
        mask = err <= threshold_px
        if mask.sum() >= best_count:
            best_pose, best_mask, best_err = refit, mask, float(err[mask].mean())
    except DegeneracyError:
        pass
    return RansacResult(True, best_pose, best_mask, it, float(best_err))
