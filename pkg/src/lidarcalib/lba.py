"""Sliding-window LiDAR bundle adjustment over the reference sensor's frames.

The frame sequence is cut into overlapping windows (window size w, step d,
overlap o = d/2, count k = ceil((n-d)/(d-o)) + 1, m-th window starting at
frame 1 + (m-1)(d-o), 1-based). Within a window the first pose is held fixed
and the remaining poses are refined by point-to-plane Levenberg-Marquardt:
each point of a non-reference frame is matched to a local plane fit over its
k nearest neighbors from the other frames, planes are frozen during the
inner LM solve, and association is repeated for a few rounds. Windows are
stitched by seeding the shared frames from the previous window's result and
tying the first o of them with a quadratic prior on log(prev^-1 * current).

The union of the refined, downsampled frames becomes the reference map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from . import pointcloud as pc
from .errors import DegenerateGeometry, InvalidParams, StampMismatch
from .geometry import Pose
from .pointcloud import Frame, Trajectory


@dataclass
class LbaParams:
    window: int = 20
    step: int = 10
    k_neighbors: int = 5
    query_k: int = 24
    max_corr_dist: float = 1.0
    eta_max: float = 0.1
    assoc_rounds: int = 4
    # Cauchy robust weight 1 / (1 + (r / (factor * scale))^2) with scale =
    # max(floor, median |r|), frozen per association round. Soft weighting
    # (not trimming) so sparse constraints along weakly observed directions
    # keep their gradient, while a corner point matching a clean plane fit
    # from the adjacent surface is driven to negligible weight. The factor
    # anneals across rounds (graduated non-convexity): a scale that tracks
    # the shrinking error keeps partial weight on cross-surface matches and
    # would stall the iteration millimeters short of the optimum.
    cauchy_factor: float = 3.0
    cauchy_decay: float = 0.7
    cauchy_factor_min: float = 1.2
    cauchy_scale_floor: float = 1e-8
    # neighbor sets whose max point-to-plane deviation exceeds
    # max(floor, 3 * residual scale, ratio * patch extent) are rejected
    set_dev_floor: float = 0.04
    set_dev_ratio: float = 0.3
    mu0: float = 1e-4
    mu_up: float = 10.0
    mu_down: float = 0.5
    max_inner: int = 30
    inner_tol: float = 1e-7
    overlap_weight: float = 1e3
    downsample_leaf: float = 0.25

    def validate(self):
        if self.window < 2:
            raise InvalidParams("window size must be >= 2")
        if self.step % 2 != 0:
            raise InvalidParams("step size d must be even (overlap o = d/2)")
        if self.step > self.window:
            raise InvalidParams("step size d must not exceed window size w")


@dataclass
class WindowPlan:
    n: int
    w: int
    d: int
    o: int
    windows: list[tuple[int, int]]  # 0-based inclusive (start, end)


def plan_windows(n: int, w: int, d: int) -> WindowPlan:
    """Partition n frames into k = ceil((n-d)/(d-o)) + 1 overlapping windows."""
    if n < 1:
        raise InvalidParams("need at least one frame")
    if w < 2:
        raise InvalidParams("window size must be >= 2")
    if d % 2 != 0:
        raise InvalidParams("step size d must be even")
    if d > w:
        raise InvalidParams("step size d must not exceed window size w")
    o = d // 2
    if n <= d or w > n:
        return WindowPlan(n, w, d, o, [(0, n - 1)])
    k = math.ceil((n - d) / (d - o)) + 1
    windows = []
    for m in range(k):
        start = m * (d - o)
        end = min(start + w - 1, n - 1)
        windows.append((start, end))
    return WindowPlan(n, w, d, o, windows)


@dataclass
class WindowCorrespondences:
    """Frozen point-to-plane matches for one window round."""

    pt_local: np.ndarray   # (M, 3) sensor-frame points
    frame: np.ndarray      # (M,) owner frame index within the window
    normal: np.ndarray     # (M, 3) world-frame plane normals
    centroid: np.ndarray   # (M, 3) world-frame plane centroids
    n_frames: int
    weight: np.ndarray | None = None  # (M,) robust weights, ones when None

    def __len__(self) -> int:
        return len(self.frame)


@dataclass
class WindowResult:
    relative_poses: list[Pose]
    refined_poses: list[Pose]
    final_cost: float
    initial_cost: float
    trace: list[dict] = field(default_factory=list)


@dataclass
class ReferenceMap:
    """Accumulated world-frame map with per-point frame provenance."""

    points: np.ndarray
    source_frame_ids: np.ndarray


@dataclass
class LbaResult:
    trajectory: Trajectory
    map: ReferenceMap
    window_results: list[WindowResult]
    # (frame index, translation gap, rotation gap) between the two windows'
    # estimates for doubly-covered frames, measured before the later window
    # overwrites the earlier result
    overlap_discrepancies: list[tuple[int, float, float]]


def _match_frame_to_pool(points_local: np.ndarray, pose: Pose,
                         pool_pts: np.ndarray, params: LbaParams,
                         cauchy_factor: float | None = None):
    """Local plane fits over the k nearest pool neighbors of each point.

    Returns (pt_local, normal, centroid, weight) for the accepted matches.
    Pool points are world frame and frozen; acceptance requires planarity
    eta < eta_max; Cauchy weights are computed from the point's own residual
    against the robust per-frame scale.
    """
    kn = params.k_neighbors
    empty = (np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    kq = min(params.query_k, len(pool_pts))
    if kq < kn or len(points_local) == 0:
        return empty
    world = geo.apply(pose, points_local)
    tree = cKDTree(pool_pts)
    dist, idx = tree.query(world, k=kq, distance_upper_bound=params.max_corr_dist)
    if kq == 1:
        dist, idx = dist[:, None], idx[:, None]
    valid = np.isfinite(dist)
    idx_safe = np.where(valid, idx, 0)
    cum = np.cumsum(valid, axis=1)
    enough = cum[:, -1] >= kn
    take = valid & (cum <= kn) & enough[:, None]
    if not take.any():
        return empty
    nbr_pts = pool_pts[idx_safe[take].reshape(-1, kn)]   # (M, kn, 3)
    pts = points_local[enough]
    world_pts = world[enough]
    centroid = nbr_pts.mean(axis=1)
    centered = nbr_pts - centroid[:, None, :]
    cov = np.einsum("mki,mkj->mij", centered, centered) / kn
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    normal = evecs[:, :, 0]
    lam_sum = evals[:, 1] + evals[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = np.where(lam_sum > 0.0, evals[:, 0] / lam_sum, np.inf)
    keep = eta < params.eta_max
    if not keep.any():
        return empty
    resid_all = np.abs(np.einsum("ij,ij->i", normal, world_pts - centroid))
    scale = max(params.cauchy_scale_floor, float(np.median(resid_all[keep])))
    # flatness gate on the neighbor sets themselves: eta is an RMS ratio and
    # admits sets mixing two surfaces near a corner; their max deviation
    # gives them away. The floor tracks the round's residual scale so the
    # slab-like (but legitimate) sets of the early iterations survive.
    dev = np.max(np.abs(np.einsum("mki,mi->mk", centered, normal)), axis=1)
    dev_gate = np.maximum(params.set_dev_floor,
                          np.maximum(3.0 * scale,
                                     params.set_dev_ratio * np.sqrt(lam_sum)))
    keep &= dev <= dev_gate
    if not keep.any():
        return empty
    resid = resid_all[keep]
    factor = params.cauchy_factor if cauchy_factor is None else cauchy_factor
    weight = 1.0 / (1.0 + (resid / (factor * scale)) ** 2)
    return pts[keep], normal[keep], centroid[keep], weight


def _build_correspondences(frames: list[Frame], poses: list[Pose],
                           params: LbaParams,
                           cauchy_factor: float | None = None
                           ) -> WindowCorrespondences:
    """Window snapshot: every frame matched against the lower-indexed pool.

    Pooling neighbors from the already-anchored prefix (rather than from all
    other frames) pins every frame to the window reference through the
    chain: a plane pool that moves with the frames being optimized leaves a
    coherent whole-block drift mode that robust weighting cannot anchor.
    """
    w = len(frames)
    world = [geo.apply(poses[j], frames[j].positions) for j in range(w)]
    cand = []
    for j in range(1, w):
        pool_pts = np.vstack(world[:j])
        pts, normal, centroid, weight = _match_frame_to_pool(
            frames[j].positions, poses[j], pool_pts, params, cauchy_factor)
        cand.append((pts, np.full(len(pts), j), normal, centroid, weight))
    if not cand:
        return WindowCorrespondences(np.zeros((0, 3)), np.zeros(0, dtype=int),
                                     np.zeros((0, 3)), np.zeros((0, 3)), w,
                                     np.zeros(0))
    return WindowCorrespondences(
        np.vstack([c[0] for c in cand]),
        np.concatenate([c[1] for c in cand]),
        np.vstack([c[2] for c in cand]),
        np.vstack([c[3] for c in cand]),
        w,
        np.concatenate([c[4] for c in cand]))


def point_to_plane_cost(poses: list[Pose], corr: WindowCorrespondences,
                        prior: tuple[list[int], list[Pose], float] | None = None,
                        ) -> tuple[float, np.ndarray, np.ndarray]:
    """Window objective with its gradient and Gauss-Newton Hessian.

    The state stacks one twist per non-reference frame (frames 1..w-1), so
    gradient length and Hessian side are 6(w-1). Plane parameters are fixed;
    each residual depends only on its owner frame's pose, which makes the
    Hessian block diagonal. Residuals are scaled by the correspondence
    weights when present. `prior` = (frame indices, reference poses, weight)
    adds quadratic terms weight * |log(ref^-1 pose)|^2.
    """
    w = corr.n_frames
    dim = 6 * (w - 1)
    grad = np.zeros(dim)
    hess = np.zeros((dim, dim))
    cost = 0.0
    weights = np.ones(len(corr)) if corr.weight is None else corr.weight
    for j in range(1, w):
        sel = corr.frame == j
        if not sel.any():
            continue
        p_local = corr.pt_local[sel]
        n = corr.normal[sel]
        c = corr.centroid[sel]
        wt = weights[sel]
        rot, trans = poses[j].rotation, poses[j].translation
        q = p_local @ rot.T + trans
        r = np.einsum("ij,ij->i", n, q - c)
        cost += float(wt @ (r * r))
        u = n @ rot                       # = R^T n per row
        jrow = np.empty((len(r), 6))
        jrow[:, :3] = np.cross(p_local, u)
        jrow[:, 3:] = u
        s = slice(6 * (j - 1), 6 * j)
        grad[s] += 2.0 * jrow.T @ (wt * r)
        hess[s, s] += 2.0 * jrow.T @ (wt[:, None] * jrow)
    if prior is not None:
        indices, refs, weight = prior
        for idx, ref in zip(indices, refs):
            if idx == 0:
                continue
            rho = geo.log_se3(geo.compose(geo.inverse(ref), poses[idx])).as_vector()
            cost += weight * float(rho @ rho)
            s = slice(6 * (idx - 1), 6 * idx)
            grad[s] += 2.0 * weight * rho
            hess[s, s] += 2.0 * weight * np.eye(6)
    return cost, grad, hess


def _check_frame_constraints(j: int, pts: np.ndarray, normal: np.ndarray):
    count = len(pts)
    if count < 6:
        raise DegenerateGeometry(
            f"frame {j} has {count} point-to-plane constraints (< 6)")
    jrow = np.empty((count, 6))
    jrow[:, :3] = np.cross(pts, normal)
    jrow[:, 3:] = normal
    evals = np.linalg.eigvalsh(jrow.T @ jrow)
    if evals[0] < 1e-10 * max(evals[-1], 1e-30):
        raise DegenerateGeometry(
            f"frame {j} constraints are rank deficient (plane geometry "
            "does not pin down 6 DoF)")


def _lm_refine_frame(pose: Pose, pts: np.ndarray, normal: np.ndarray,
                     centroid: np.ndarray, weight: np.ndarray,
                     prior: tuple[Pose, float] | None,
                     params: LbaParams) -> tuple[Pose, list[dict], float]:
    """Damped point-to-plane solve of a single frame against frozen planes."""

    def objective(p: Pose):
        q = geo.apply(p, pts)
        r = np.einsum("ij,ij->i", normal, q - centroid)
        cost = float(weight @ (r * r))
        if prior is not None:
            ref, lam = prior
            rho = geo.log_se3(geo.compose(geo.inverse(ref), p)).as_vector()
            cost += lam * float(rho @ rho)
        return cost, r

    mu = params.mu0
    cost, r = objective(pose)
    trace: list[dict] = []
    for it in range(params.max_inner):
        u = normal @ pose.rotation
        jrow = np.empty((len(r), 6))
        jrow[:, :3] = np.cross(pts, u)
        jrow[:, 3:] = u
        h = jrow.T @ (weight[:, None] * jrow)
        g = jrow.T @ (weight * r)
        if prior is not None:
            ref, lam = prior
            rho = geo.log_se3(geo.compose(geo.inverse(ref), pose)).as_vector()
            h += lam * np.eye(6)
            g += lam * rho
        step = -np.linalg.solve(h + mu * np.eye(6), g)
        cand = geo.compose(pose, geo.exp_se3(step))
        cand_cost, cand_r = objective(cand)
        accepted = cand_cost < cost
        trace.append({"iter": it, "cost": cost, "cand_cost": cand_cost,
                      "accepted": accepted, "step_inf": float(np.max(np.abs(step)))})
        if accepted:
            pose, cost, r = cand, cand_cost, cand_r
            mu *= params.mu_down
        else:
            mu *= params.mu_up
        if np.max(np.abs(step)) < params.inner_tol:
            break
    return pose, trace, cost


def optimize_window(frames: list[Frame], init_poses: list[Pose],
                    fixed_prefix: list[Pose], params: LbaParams) -> WindowResult:
    """Refine one window's poses; the first pose is held fixed throughout.

    Each association round sweeps the frames in order: frame j is matched
    against the current world points of frames 0..j-1 and solved alone by
    damped point-to-plane LM (Gauss-Seidel on the chain, so refinements
    propagate forward within a round). fixed_prefix (empty or the stitching
    overlap) overrides the leading init poses and ties them with the
    quadratic overlap prior.
    """
    w = len(frames)
    if len(init_poses) != w:
        raise InvalidParams("frames and init_poses must have equal length")
    poses = list(init_poses)
    n_prefix = len(fixed_prefix)
    if n_prefix:
        for i, p in enumerate(fixed_prefix):
            poses[i] = p
    start_poses = list(poses)

    snapshot = _build_correspondences(frames, start_poses, params)
    prior = (None if n_prefix == 0 else
             (list(range(1, n_prefix)), list(fixed_prefix[1:]),
              params.overlap_weight))
    initial_cost, _, _ = point_to_plane_cost(start_poses, snapshot, prior)

    trace: list[dict] = []
    for rnd in range(params.assoc_rounds):
        factor = max(params.cauchy_factor_min,
                     params.cauchy_factor * params.cauchy_decay ** rnd)
        world = [geo.apply(poses[j], frames[j].positions) for j in range(w)]
        pool = world[0]
        max_move = 0.0
        for j in range(1, w):
            pts, normal, centroid, weight = _match_frame_to_pool(
                frames[j].positions, poses[j], pool, params, factor)
            if rnd == 0:
                _check_frame_constraints(j, pts, normal)
            frame_prior = None
            if 0 < j < n_prefix:
                frame_prior = (fixed_prefix[j], params.overlap_weight)
            new_pose, frame_trace, _ = _lm_refine_frame(
                poses[j], pts, normal, centroid, weight, frame_prior, params)
            move = geo.translation_error(new_pose, poses[j]) + \
                geo.rotation_error(new_pose, poses[j])
            max_move = max(max_move, move)
            poses[j] = new_pose
            world[j] = geo.apply(new_pose, frames[j].positions)
            for entry in frame_trace:
                entry.update({"round": rnd, "frame": j})
            trace.extend(frame_trace)
            pool = np.vstack([pool, world[j]])
        if max_move < params.inner_tol:
            break

    final_corr = _build_correspondences(frames, poses, params)
    final_cost, _, _ = point_to_plane_cost(poses, final_corr, prior)
    init_cost_on_final, _, _ = point_to_plane_cost(start_poses, final_corr, prior)
    if init_cost_on_final < final_cost:
        # refinement lost ground on the final association: reject it
        poses = start_poses
        final_cost = init_cost_on_final

    relative = [geo.compose(geo.inverse(poses[j]), poses[j + 1])
                for j in range(w - 1)]
    return WindowResult(relative, poses, final_cost, initial_cost, trace)


def run_sliding_lba(frames: list[Frame], trajectory: Trajectory,
                    params: LbaParams | None = None) -> LbaResult:
    """Refine the full trajectory window by window and accumulate the map.

    Frames are expected to be motion compensated already. Each frame is
    voxel-downsampled once; the same reduced clouds feed both the window
    optimizations and the final map union, so the map point count equals the
    sum of the downsampled frame sizes.
    """
    params = params or LbaParams()
    params.validate()
    if len(frames) != len(trajectory):
        raise StampMismatch("frames and trajectory must correspond one-to-one")
    for f, stamp in zip(frames, trajectory.stamps):
        if abs(f.stamp - stamp) > pc.STAMP_TOL:
            raise StampMismatch(
                f"frame stamp {f.stamp:.6f} does not match trajectory {stamp:.6f}")
    n = len(frames)
    ds_frames = [pc.voxel_downsample(f, params.downsample_leaf)
                 if params.downsample_leaf > 0 else f for f in frames]
    plan = plan_windows(n, params.window, params.step)
    poses = list(trajectory.poses)
    refined_flag = np.zeros(n, dtype=bool)
    window_results: list[WindowResult] = []
    discrepancies: list[tuple[int, float, float]] = []

    for m, (start, end) in enumerate(plan.windows):
        win_frames = ds_frames[start:end + 1]
        init = poses[start:end + 1]
        prefix = poses[start:start + plan.o] if m > 0 else []
        try:
            result = optimize_window(win_frames, init, prefix, params)
        except DegenerateGeometry as exc:
            raise DegenerateGeometry(str(exc), window=m) from exc
        for k, idx in enumerate(range(start, end + 1)):
            if refined_flag[idx]:
                discrepancies.append((
                    idx,
                    geo.translation_error(result.refined_poses[k], poses[idx]),
                    geo.rotation_error(result.refined_poses[k], poses[idx]),
                ))
            poses[idx] = result.refined_poses[k]
            refined_flag[idx] = True
        window_results.append(result)

    map_points = np.vstack([geo.apply(poses[j], ds_frames[j].positions)
                            for j in range(n)])
    source_ids = np.repeat(np.arange(n), [len(f) for f in ds_frames])
    refined = Trajectory(trajectory.stamps, poses)
    return LbaResult(refined, ReferenceMap(map_points, source_ids),
                     window_results, discrepancies)


def trajectory_error(est: Trajectory, gt: Trajectory) -> tuple[float, float]:
    """Mean first-pose-aligned pose error (meters, radians).

    Both trajectories are expressed relative to their own first pose before
    comparison, which removes the free gauge (the first pose is pinned
    during optimization, so its error is not attributable to the refiner).
    """
    if len(est) != len(gt):
        raise InvalidParams("trajectories must have equal length")
    e0_inv = geo.inverse(est.poses[0])
    g0_inv = geo.inverse(gt.poses[0])
    terrs, rerrs = [], []
    for e, g in zip(est.poses, gt.poses):
        rel_e = geo.compose(e0_inv, e)
        rel_g = geo.compose(g0_inv, g)
        terrs.append(geo.translation_error(rel_e, rel_g))
        rerrs.append(geo.rotation_error(rel_e, rel_g))
    return float(np.mean(terrs)), float(np.mean(rerrs))
