"""Extrinsic recovery of the source LiDAR against the voxelized reference map.

Each source frame's points are carried into the map's world frame through
the synchronized reference-sensor pose (the anchor) composed with the
current extrinsic estimate, matched to voxel planes by containment, and the
extrinsic is refined by weighted point-to-plane Levenberg-Marquardt on the
Lie algebra. An outer loop refines every frame independently from the
shared estimate, averages the per-frame corrections on the tangent space
(discarding outliers beyond 3x the median twist norm), re-associates with a
shrinking distance gate, and stops once the averaged update drops below the
convergence threshold.

Per-frame solves within one outer iteration are independent; the averaging
step is a deterministic reduction in frame order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from scipy.spatial import cKDTree

from . import geometry as geo
from . import pointcloud as pc
from . import voxelmap as vm
from .errors import AngleNearPi, InvalidParams, NoCorrespondences, Unobservable
from .geometry import Pose
from .pointcloud import Frame
from .voxelmap import PlaneFeature, VoxelMapIndex


@dataclass
class CalibConfig:
    max_outer_iters: int = 30
    convergence_delta: float = 1e-5
    mu0: float = 1e-4
    mu_up: float = 10.0
    mu_down: float = 0.5
    max_inner: int = 30
    inner_tol: float = 1e-7
    frame_stride: int = 1
    # association gate shrinks geometrically from start to end over the
    # first reject_iters outer iterations, tolerating coarse initial guesses
    reject_start: float = 0.5
    reject_end: float = 0.1
    reject_iters: int = 5
    deskew: bool = True
    downsample_leaf: float = 0.1
    min_frame_corr: int = 20
    max_points_per_voxel: int = 0  # 0 = use all associated points
    cond_limit: float = 1e12
    # Cauchy robustification folded into the per-correspondence weights at
    # association time (scale = max(floor, median |r|) per frame): a source
    # point can fall inside a mapped cell whose plane belongs to a surface
    # the reference sensor saw from a different band, and the confidence
    # weight alone cannot suppress such cross-surface matches
    cauchy_factor: float = 3.0
    cauchy_scale_floor: float = 1e-8
    # association additionally requires agreement between the source
    # point's own local surface normal and the matched plane normal:
    # points falling into a cell (or near a surface) that belongs to a
    # different structure are rejected categorically instead of relying on
    # residual-scale weighting (0 disables)
    normal_gate: float = 0.85
    # rotation multi-start: the point-to-plane basin covers ~10 degrees of
    # rotation error in room-scale scenes, well short of the tolerated
    # 30-degree guess envelope; before iterating, rotation offsets around
    # the guess are scored by robust match quality and the best becomes the
    # working initial estimate (0 disables)
    rot_seed_candidates: int = 40
    rot_seed_max_deg: float = 35.0
    rot_seed_frames: int = 6
    rot_seed_kernel: float = 0.07
    # translation analogue: after rotation seeding, a +-step grid of
    # translation offsets is scored the same way (covers the cube envelope)
    trans_seed_step: float = 0.45

    def validate(self):
        if self.max_outer_iters < 1:
            raise InvalidParams("max_outer_iters must be >= 1")
        if self.convergence_delta <= 0.0:
            raise InvalidParams("convergence delta must be positive")
        if self.frame_stride < 1:
            raise InvalidParams("frame stride must be >= 1")


@dataclass(frozen=True)
class Correspondence:
    """One source point paired with a map plane through its anchor pose."""

    point: np.ndarray
    plane: PlaneFeature
    anchor: Pose


@dataclass
class OuterIteration:
    iteration: int
    objective_before: float
    objective_after: float
    update_norm: float
    frames_used: int
    reject_dist: float
    skipped_frames: list[int] = field(default_factory=list)


@dataclass
class CalibrationResult:
    extrinsic: Pose
    outer_trace: list[OuterIteration]
    frame_transforms: list[Pose]
    converged: bool
    iterations: int
    lm_traces: list[list[dict]] = field(default_factory=list)


def residual(corr: Correspondence, transform: Pose) -> float:
    """Signed point-to-plane distance after mapping the source point into
    the map frame: n . (anchor * transform * point - centroid)."""
    world = geo.apply(corr.anchor, geo.apply(transform, corr.point))
    return float(np.dot(corr.plane.normal, world - corr.plane.centroid))


def global_objective(correspondences: list[Correspondence], transform: Pose) -> float:
    """Confidence-weighted sum of squared residuals (meters squared)."""
    return float(sum(c.plane.weight * residual(c, transform) ** 2
                     for c in correspondences))


def jacobian_row(corr: Correspondence, transform: Pose) -> np.ndarray:
    """Derivative of the residual along a right-multiplied twist update,
    ordered (rotation, translation): [p x u, u] with u = (R_anchor R)^T n."""
    u = (corr.anchor.rotation @ transform.rotation).T @ corr.plane.normal
    return np.concatenate([np.cross(corr.point, u), u])


class _FrameBatch:
    """Vectorized residual/Jacobian evaluation for one frame's matches."""

    def __init__(self, points: np.ndarray, normals: np.ndarray,
                 centroids: np.ndarray, weights: np.ndarray, anchor: Pose):
        self.points = points
        self.normals = normals
        self.centroids = centroids
        self.weights = weights
        self.anchor = anchor

    def __len__(self) -> int:
        return len(self.points)

    def residuals(self, transform: Pose) -> np.ndarray:
        world = geo.apply(self.anchor, geo.apply(transform, self.points))
        return np.einsum("ij,ij->i", self.normals, world - self.centroids)

    def objective(self, transform: Pose) -> float:
        r = self.residuals(transform)
        return float(self.weights @ (r * r))

    def jacobian(self, transform: Pose) -> np.ndarray:
        u = self.normals @ (self.anchor.rotation @ transform.rotation)
        rows = np.empty((len(self.points), 6))
        rows[:, :3] = np.cross(self.points, u)
        rows[:, 3:] = u
        return rows


def lm_solve(batch: _FrameBatch | list[Correspondence], t_init: Pose,
             cfg: CalibConfig) -> tuple[Pose, list[dict]]:
    """Weighted point-to-plane LM for a single frame.

    Normal equations use H = J^T W J + mu*I and g = J^T W r; accepted steps
    strictly decrease the weighted objective. Raises Unobservable when the
    undamped H at the initial estimate has condition number above the limit.
    """
    if isinstance(batch, list):
        batch = _FrameBatch(
            np.stack([c.point for c in batch]),
            np.stack([c.plane.normal for c in batch]),
            np.stack([c.plane.centroid for c in batch]),
            np.array([c.plane.weight for c in batch]),
            batch[0].anchor)
    if len(batch) < 6:
        raise Unobservable(f"only {len(batch)} correspondences (< 6)")
    pose = t_init
    r = batch.residuals(pose)
    jac = batch.jacobian(pose)
    h0 = jac.T @ (batch.weights[:, None] * jac)
    if np.linalg.cond(h0) > cfg.cond_limit:
        raise Unobservable("normal equations are ill conditioned "
                           "(degenerate plane geometry)")
    cost = float(batch.weights @ (r * r))
    mu = cfg.mu0
    trace: list[dict] = []
    for it in range(cfg.max_inner):
        g = jac.T @ (batch.weights * r)
        h = jac.T @ (batch.weights[:, None] * jac)
        step = -np.linalg.solve(h + mu * np.eye(6), g)
        cand = geo.compose(pose, geo.exp_se3(step))
        cand_r = batch.residuals(cand)
        cand_cost = float(batch.weights @ (cand_r * cand_r))
        accepted = cand_cost < cost
        trace.append({"iter": it, "cost": cost, "cand_cost": cand_cost,
                      "accepted": accepted, "mu": mu,
                      "step_inf": float(np.max(np.abs(step)))})
        if accepted:
            pose, cost, r = cand, cand_cost, cand_r
            jac = batch.jacobian(pose)
            mu *= cfg.mu_down
        else:
            mu *= cfg.mu_up
        if np.max(np.abs(step)) < cfg.inner_tol:
            break
    return pose, trace


class _NearestPlaneLookup:
    """Nearest-surface association for the coarse stages.

    Containment association cannot reach past one voxel, which caps the
    convergence basin well below the tolerated initial-guess envelope; while
    the gate is wide, points are matched to the plane owning their nearest
    mapped surface point instead (the iteratively-tightened matching idea),
    and containment takes over for the final stage.
    """

    def __init__(self, index: VoxelMapIndex):
        owner = np.full(len(index.points), -1, dtype=int)
        for leaf_idx, plane in enumerate(index.leaf_planes):
            owner[plane.point_indices] = index.leaf_to_plane[leaf_idx]
        owned = owner >= 0
        self.plane_ids = owner[owned]
        self.tree = cKDTree(index.points[owned])

    def query(self, points: np.ndarray, radius: float) -> np.ndarray:
        dist, idx = self.tree.query(points, k=1, distance_upper_bound=radius)
        hit = np.isfinite(dist)
        out = np.full(len(points), -1, dtype=int)
        out[hit] = self.plane_ids[idx[hit]]
        return out


def _local_normals(points: np.ndarray, k: int = 6) -> np.ndarray:
    """Unit normals of each point's k-neighborhood within its own cloud."""
    tree = cKDTree(points)
    _, idx = tree.query(points, k=min(k, len(points)))
    nbr = points[idx]
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _seed_initial(map_index: VoxelMapIndex, nearest: "_NearestPlaneLookup",
                  frames: list[Frame], anchors: list[Pose], t_guess: Pose,
                  cfg: CalibConfig) -> Pose:
    """Pick the best-scoring (rotation, translation) offset of the guess.

    The point-to-plane basin is narrower than the tolerated guess envelope,
    so a joint grid (identity plus a fixed, seeded set of axis-angle offsets
    within rot_seed_max_deg, crossed with a +-trans_seed_step cube) is
    scored on subsampled probe frames. The score combines chamfer proximity
    to the mapped surface points with agreement between each probe point's
    own local normal and the matched plane normal: with a partially covered
    map, proximity alone rewards sliding unmapped regions onto other
    surfaces, and only the normal term breaks such impostor alignments.
    The result is a deterministic function of the inputs.
    """
    if cfg.rot_seed_candidates <= 0:
        return t_guess
    rng = np.random.default_rng(1234)
    rot_offsets = [np.zeros(3)]
    for _ in range(cfg.rot_seed_candidates):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.15, math.radians(cfg.rot_seed_max_deg))
        rot_offsets.append(axis * angle)
    s = cfg.trans_seed_step
    trans_offsets = ([np.array([dx, dy, dz])
                      for dx in (-s, 0.0, s) for dy in (-s, 0.0, s)
                      for dz in (-s, 0.0, s)]
                     if s > 0.0 else [np.zeros(3)])
    step = max(1, len(frames) // cfg.rot_seed_frames)
    probe = []
    for j in range(0, len(frames), step):
        pts = frames[j].positions
        if len(pts) > 600:
            pts = pts[:: len(pts) // 600 + 1]
        if len(pts) < 8:
            continue
        probe.append((pts, _local_normals(pts), anchors[j]))

    kernel = max(cfg.rot_seed_kernel, 0.1)

    def chamfer(cand: Pose) -> float:
        # per normal-direction bucket, then averaged: a slide along the
        # dominant planes keeps their proximity and normals intact, and only
        # the minority directions (walls vs. floor) expose the impostor
        bucket_sum = np.zeros(3)
        bucket_cnt = np.zeros(3)
        for pts, local_n, anchor in probe:
            world = geo.apply(anchor, geo.apply(cand, pts))
            rot_w = anchor.rotation @ cand.rotation
            n_world = local_n @ rot_w.T
            buckets = np.argmax(np.abs(n_world), axis=1)
            np.add.at(bucket_cnt, buckets, 1.0)
            dist, idx = nearest.tree.query(
                world, k=1, distance_upper_bound=cfg.reject_start)
            hit = np.isfinite(dist)
            if not hit.any():
                continue
            plane_ids = nearest.plane_ids[idx[hit]]
            agree = np.abs(np.einsum(
                "ij,ij->i", map_index._normals[plane_ids], n_world[hit]))
            prox = 1.0 / (1.0 + (dist[hit] / kernel) ** 2)
            np.add.at(bucket_sum, buckets[hit], prox * (agree >= 0.85))
        occupied = bucket_cnt > 0
        if not occupied.any():
            return 0.0
        return float(np.mean(bucket_sum[occupied] / bucket_cnt[occupied]))

    # rank rotations at the guessed translation first, then run the full
    # translation grid only for the leaders (rotation ranking at a wrong
    # translation is noisy, so several leaders are kept). A challenger must
    # beat the guess by a clear margin: near the optimum the chamfer score
    # is flat and a nearby offset could displace an already-good guess.
    ranked = sorted(rot_offsets,
                    key=lambda off: -chamfer(Pose(
                        t_guess.rotation @ geo.exp_so3(off), t_guess.translation)))
    best_pose = t_guess
    best_score = 1.10 * chamfer(t_guess)
    for rot_off in ranked[:8]:
        rot = t_guess.rotation @ geo.exp_so3(rot_off)
        for trans_off in trans_offsets:
            cand = Pose(rot, t_guess.translation + trans_off)
            score = chamfer(cand)
            if score > best_score:
                best_score = score
                best_pose = cand
    return best_pose


def _reject_schedule(cfg: CalibConfig, stage: int) -> float:
    """Geometric gate sequence from reject_start down to reject_end.

    `stage` advances only while the estimate keeps pace (see calibrate):
    shrinking the gate past the current error level would cull exactly the
    planes aligned with the remaining error and freeze the iteration.
    """
    if cfg.reject_iters <= 1:
        return cfg.reject_end
    frac = min(stage, cfg.reject_iters - 1) / (cfg.reject_iters - 1)
    return cfg.reject_start * (cfg.reject_end / cfg.reject_start) ** frac


def _associate_frame(index: VoxelMapIndex, points: np.ndarray, anchor: Pose,
                     estimate: Pose, reject_dist: float, cap: int,
                     cfg: CalibConfig,
                     nearest: _NearestPlaneLookup | None = None,
                     local_normals: np.ndarray | None = None) -> _FrameBatch | None:
    world = geo.apply(anchor, geo.apply(estimate, points))
    if nearest is not None:
        ids = nearest.query(world, reject_dist)
        if (ids >= 0).any():
            resid = np.abs(np.einsum(
                "ij,ij->i", index._normals[np.maximum(ids, 0)],
                world - index._centroids[np.maximum(ids, 0)]))
            ids = np.where(resid <= reject_dist, ids, -1)
    else:
        ids = vm.associate_batch(world, index, reject_dist)
    if local_normals is not None and cfg.normal_gate > 0.0 and (ids >= 0).any():
        rot_w = anchor.rotation @ estimate.rotation
        agree = np.abs(np.einsum("ij,ij->i", index._normals[np.maximum(ids, 0)],
                                 local_normals @ rot_w.T))
        ids = np.where(agree >= cfg.normal_gate, ids, -1)
    matched = ids >= 0
    if not matched.any():
        return None
    world = world[matched]
    ids = ids[matched]
    pts = points[matched]
    if cap > 0:
        keep = np.zeros(len(ids), dtype=bool)
        for plane_id in np.unique(ids):
            sel = np.nonzero(ids == plane_id)[0]
            keep[sel[:cap]] = True
        ids, pts, world = ids[keep], pts[keep], world[keep]
    normals = index._normals[ids]
    centroids = index._centroids[ids]
    weights = np.array([index.planes[i].weight for i in ids])
    resid = np.abs(np.einsum("ij,ij->i", normals, world - centroids))
    # robust scale per dominant normal axis: residual magnitudes are highly
    # anisotropic while converging, and a single global scale would crush
    # the sparse constraints along directions that are still far off
    robust = np.ones_like(resid)
    buckets = np.argmax(np.abs(normals), axis=1)
    for b in range(3):
        sel = buckets == b
        if not sel.any():
            continue
        scale = max(cfg.cauchy_scale_floor, float(np.median(resid[sel])))
        robust[sel] = 1.0 / (1.0 + (resid[sel] / (cfg.cauchy_factor * scale)) ** 2)
    return _FrameBatch(pts, normals, centroids, weights * robust, anchor)


def _average_corrections(t_prev: Pose,
                         locals_: list[Pose]) -> tuple[np.ndarray, np.ndarray]:
    """Tangent-space mean of per-frame corrections, discarding twists whose
    norm exceeds 3x the median norm. Returns (mean twist, kept mask)."""
    prev_inv = geo.inverse(t_prev)
    twists = np.stack([geo.log_se3(geo.compose(prev_inv, t)).as_vector()
                       for t in locals_])
    norms = np.linalg.norm(twists, axis=1)
    med = float(np.median(norms))
    keep = norms <= 3.0 * med if med > 0.0 else np.ones(len(norms), dtype=bool)
    if not keep.any():
        keep = np.ones(len(norms), dtype=bool)
    return twists[keep].mean(axis=0), keep


def calibrate(map_index: VoxelMapIndex, frames_b: list[Frame],
              anchors: list[Pose], t_guess: Pose,
              cfg: CalibConfig | None = None) -> CalibrationResult:
    """Iterate-and-average extrinsic estimation against the reference map.

    Per outer iteration every strided frame is deskewed with the reference
    motion conjugated by the current estimate, associated to map planes
    under the current rejection gate, and refined independently from the
    shared estimate; the tangent-space average of the per-frame solutions
    becomes the next estimate (accepted only if the snapshot objective does
    not increase, halving the step when needed).

    Frames that fail association or are degenerate this iteration are
    skipped; if none survive, NoCorrespondences or Unobservable (with the
    offending frame indices) is raised.
    """
    cfg = cfg or CalibConfig()
    cfg.validate()
    if len(frames_b) != len(anchors):
        raise InvalidParams("frames and anchors must correspond one-to-one")
    sel = list(range(0, len(frames_b), cfg.frame_stride))
    frames = [frames_b[i] for i in sel]
    anchor_list = [anchors[i] for i in sel]
    if cfg.downsample_leaf > 0:
        frames = [pc.voxel_downsample(f, cfg.downsample_leaf) for f in frames]

    # reference-frame relative motion over each scan, for deskewing
    rels = []
    for i in sel:
        if i + 1 < len(anchors):
            rels.append(geo.compose(geo.inverse(anchors[i]), anchors[i + 1]))
        elif len(anchors) >= 2:
            rels.append(geo.compose(geo.inverse(anchors[-2]), anchors[-1]))
        else:
            rels.append(Pose.identity())

    nearest_lookup = _NearestPlaneLookup(map_index)
    # sensor-frame local normals, computed once per frame (deskewing warps
    # positions by at most the intra-scan motion, which leaves 6-neighbor
    # normal directions unchanged at any useful tolerance)
    frame_normals: list[np.ndarray | None] = [
        _local_normals(f.positions) if cfg.normal_gate > 0 and len(f) >= 8
        else None
        for f in frames]
    t_prev = _seed_initial(map_index, nearest_lookup, frames, anchor_list,
                           t_guess, cfg)
    outer_trace: list[OuterIteration] = []
    lm_traces: list[list[dict]] = []
    frame_transforms: list[Pose] = []
    converged = False
    iterations = 0
    stage = 0
    for it in range(cfg.max_outer_iters):
        iterations = it + 1
        reject = _reject_schedule(cfg, stage)
        coarse = stage < cfg.reject_iters - 1
        prev_inv = geo.inverse(t_prev)
        batches: list[_FrameBatch | None] = []
        skipped: list[int] = []
        for k, (f, anchor, rel) in enumerate(zip(frames, anchor_list, rels)):
            cur = f
            if cfg.deskew and f.scan_duration > 0.0 and len(f):
                rel_b = geo.compose(prev_inv, geo.compose(rel, t_prev))
                cur = pc.deskew(f, Pose.identity(), rel_b)
            batch = _associate_frame(map_index, cur.positions, anchor, t_prev,
                                     reject, cfg.max_points_per_voxel, cfg,
                                     nearest=nearest_lookup if coarse else None,
                                     local_normals=frame_normals[k])
            batches.append(batch)
        usable = [i for i, b in enumerate(batches)
                  if b is not None and len(b) >= cfg.min_frame_corr]
        usable_set = set(usable)
        if not usable:
            raise NoCorrespondences(
                "no frame found enough map correspondences (check FoV overlap "
                "with the map and the initial guess)")
        locals_: list[Pose] = []
        consensus_batch_ids: list[int] = []
        unobservable: list[int] = []
        frame_transforms = []
        iter_lm: list[dict] = []
        for i in usable:
            try:
                pose_i, trace_i = lm_solve(batches[i], t_prev, cfg)
            except Unobservable:
                unobservable.append(sel[i])
                skipped.append(sel[i])
                continue
            # trust region: a correction far beyond the association gate's
            # reach means the frame slid along a weakly constrained
            # direction; its matches cannot support such a move
            try:
                corr = geo.log_se3(geo.compose(prev_inv, pose_i))
            except AngleNearPi:
                skipped.append(sel[i])
                continue
            if (np.linalg.norm(corr.trans) > 3.0 * reject + 0.5
                    or np.linalg.norm(corr.rot) > 1.0):
                skipped.append(sel[i])
                continue
            locals_.append(pose_i)
            consensus_batch_ids.append(i)
            frame_transforms.append(pose_i)
            iter_lm.extend({**e, "frame": sel[i]} for e in trace_i)
        if not locals_:
            raise Unobservable(
                "every usable frame is degenerate or outside the trust region",
                frame_indices=unobservable)
        lm_traces.append(iter_lm)

        mean_twist, kept = _average_corrections(t_prev, locals_)
        # the step acceptance objective sums the frames whose corrections
        # formed the mean: a frame whose own solve was discarded as an
        # outlier must not get to veto the consensus step either
        consensus = [consensus_batch_ids[k] for k in np.nonzero(kept)[0]]
        objective_before = float(sum(batches[i].objective(t_prev)
                                     for i in consensus))
        proposed = geo.exp_se3(mean_twist)
        update = (float(np.linalg.norm(proposed.translation))
                  + 0.5 * geo.rotation_error(proposed, Pose.identity()))
        # pace of the gate schedule: the median per-frame correction keeps
        # tracking the remaining error even when the frames disagree in
        # direction and their tangent mean (the update) is much smaller
        frame_mags = [float(np.linalg.norm(geo.log_se3(
            geo.compose(prev_inv, p)).trans))
            + 0.5 * geo.rotation_error(geo.compose(prev_inv, p), Pose.identity())
            for p in locals_]
        pace = float(np.median(frame_mags))
        t_new = t_prev
        objective_after = objective_before
        accepted = False
        for alpha in (1.0, 0.5, 0.25, 0.125, 1.0 / 16, 1.0 / 64):
            cand = geo.compose(t_prev, geo.exp_se3(alpha * mean_twist))
            cand_obj = float(sum(batches[i].objective(cand) for i in consensus))
            if cand_obj <= objective_before:
                t_new, objective_after = cand, cand_obj
                accepted = True
                break

        outer_trace.append(OuterIteration(it, objective_before, objective_after,
                                          update, len(locals_), reject, skipped))
        t_prev = t_new
        # convergence is judged on the proposed averaged correction, not the
        # possibly line-search-clipped step: a rejected large step must not
        # masquerade as convergence
        if update < cfg.convergence_delta:
            converged = True
            break
        if not accepted:
            # the estimate cannot move under this gate: associations and the
            # next proposal are deterministic functions of (estimate, gate),
            # so either tighten the gate or stop
            if stage < cfg.reject_iters - 1:
                stage += 1
                continue
            break
        if pace < 0.5 * reject and stage < cfg.reject_iters - 1:
            stage += 1
    return CalibrationResult(t_prev, outer_trace, frame_transforms, converged,
                             iterations, lm_traces)


def evaluate(result: CalibrationResult | Pose, gt: Pose) -> tuple[float, float]:
    """Translation error (m) and rotation error (rad) against ground truth."""
    est = result.extrinsic if isinstance(result, CalibrationResult) else result
    return geo.translation_error(est, gt), geo.rotation_error(est, gt)


def write_report(path, result: CalibrationResult, gt: Pose | None = None,
                 config_echo: dict | None = None) -> None:
    """Calibration report: estimate line, outer-iteration CSV, error metrics.

    The estimate is returned as the averaged absolute transform; composing
    it once more with the initial guess would double-count the guess, so no
    such composition is applied (noted here for audit against descriptions
    that state a final re-composition).
    """
    with open(path, "w") as fh:
        if config_echo:
            for key in sorted(config_echo):
                fh.write(f"# config {key} = {config_echo[key]}\n")
        fh.write("# extrinsic estimate (stamp tx ty tz qx qy qz qw)\n")
        fh.write(pc.format_pose_line(result.extrinsic, 0.0) + "\n")
        fh.write(f"# converged {result.converged} iterations {result.iterations}\n")
        fh.write("iter,objective,update_norm,frames_used\n")
        for entry in result.outer_trace:
            fh.write(f"{entry.iteration},{entry.objective_after:.9g},"
                     f"{entry.update_norm:.9g},{entry.frames_used}\n")
        if gt is not None:
            e_trans, e_rot = evaluate(result, gt)
            fh.write(f"e_trans_m {e_trans:.9g}\n")
            fh.write(f"e_rot_rad {e_rot:.9g}\n")
