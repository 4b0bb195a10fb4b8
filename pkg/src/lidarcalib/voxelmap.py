"""Adaptive octree voxelization of a reference map into planar features.

Space is cut into l_parent cells on a grid anchored at the world origin
(cells are half-open, lower-inclusive; boundary points belong to the
higher-index cell). Cells whose point covariance is flat enough become
planes; complex cells subdivide into eight children of half the edge length
until max_depth. Face-adjacent coplanar leaves can be merged, and every
plane carries a confidence weight

    weight = point_count / (1 + sigma_lambda) * exp(-gamma * eta)

where eta = lambda1 / (lambda2 + lambda3) is the planarity index.

The finished index is immutable and safe for concurrent association queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import Degenerate

_COLLINEAR_EPS = 1e-12

PLANAR = "planar"
SUBDIVIDED = "subdivided"
DISCARDED = "discarded"


@dataclass
class VoxelParams:
    l_parent: float = 1.0
    eta_max: float = 0.1
    max_depth: int = 3
    min_points: int = 10
    gamma: float = 1.0
    sigma_mode: str = "eigenvalues"  # or "smallest"
    # planar acceptance also requires max |point-to-plane| below
    # max(dev_floor, dev_ratio * sqrt(lambda2 + lambda3)): the eta ratio is
    # an RMS criterion and lets thin L-shaped corner sets (two perpendicular
    # wall strips) pass as "planar" with a blended 45-degree normal
    max_dev_floor: float = 0.04
    max_dev_ratio: float = 0.3

    def validate(self):
        if self.l_parent <= 0.0:
            raise ValueError("l_parent must be positive")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_points < 3:
            raise ValueError("min_points must be >= 3")
        if self.sigma_mode not in ("eigenvalues", "smallest"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")


@dataclass(frozen=True)
class PlaneFeature:
    """Fitted voxel plane: unit normal, centroid, ascending eigenvalues."""

    normal: np.ndarray
    centroid: np.ndarray
    eigenvalues: np.ndarray
    point_count: int
    eta: float
    sigma_lambda: float
    weight: float
    voxel_keys: tuple
    point_indices: np.ndarray

    def distance(self, p: np.ndarray) -> float:
        return float(np.dot(self.normal, np.asarray(p) - self.centroid))


def fit_plane(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least-squares plane of a point set via covariance eigendecomposition.

    Returns (unit normal, centroid, eigenvalues ascending). The normal sign
    is fixed so its largest-magnitude component is positive. Raises
    Degenerate for fewer than 3 points or (near-)collinear sets.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    m = len(points)
    if m < 3:
        raise Degenerate(f"need >= 3 points, got {m}")
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / m
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    if evals[1] < _COLLINEAR_EPS:
        raise Degenerate("points are collinear")
    normal = evecs[:, 0]
    k = int(np.argmax(np.abs(normal)))
    if normal[k] < 0.0:
        normal = -normal
    return normal, centroid, evals


def planarity(eigenvalues: np.ndarray) -> float:
    """eta = lambda1 / (lambda2 + lambda3), ascending eigenvalue order."""
    return float(eigenvalues[0] / (eigenvalues[1] + eigenvalues[2]))


def confidence_weight(point_count: int, sigma_lambda: float, eta: float,
                      gamma: float) -> float:
    return point_count / (1.0 + sigma_lambda) * math.exp(-gamma * eta)


def _sigma_lambda(evals: np.ndarray, mode: str) -> float:
    if mode == "smallest":
        return float(evals[0])
    return float(np.std(evals))


class VoxelMapIndex:
    """Octree classification over map points plus the extracted planes.

    nodes maps (depth, ix, iy, iz) to PLANAR/SUBDIVIDED/DISCARDED; planar
    nodes also record their index into leaf_planes. After merge_neighbors,
    `planes` holds merged features and leaf_to_plane redirects leaves.
    """

    def __init__(self, points: np.ndarray, params: VoxelParams):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.params = params
        self.nodes: dict[tuple, tuple[str, int | None]] = {}
        self.leaf_planes: list[PlaneFeature] = []
        self.planes: list[PlaneFeature] = []
        self.leaf_to_plane: np.ndarray = np.zeros(0, dtype=int)
        self._normals = np.zeros((0, 3))
        self._centroids = np.zeros((0, 3))

    def _finalize(self, planes: list[PlaneFeature], leaf_to_plane: np.ndarray):
        self.planes = planes
        self.leaf_to_plane = leaf_to_plane
        self._normals = (np.stack([p.normal for p in planes])
                         if planes else np.zeros((0, 3)))
        self._centroids = (np.stack([p.centroid for p in planes])
                           if planes else np.zeros((0, 3)))

    def edge_length(self, depth: int) -> float:
        return self.params.l_parent / (2 ** depth)


def build_adaptive(source, params: VoxelParams | None = None) -> VoxelMapIndex:
    """Classify a reference map (or raw (N, 3) array) into a plane index."""
    params = params or VoxelParams()
    params.validate()
    points = getattr(source, "points", source)
    index = VoxelMapIndex(points, params)
    pts = index.points
    if len(pts) == 0:
        index._finalize([], np.zeros(0, dtype=int))
        return index
    root_keys = np.floor(pts / params.l_parent).astype(np.int64)
    order = np.lexsort((root_keys[:, 2], root_keys[:, 1], root_keys[:, 0]))
    sorted_keys = root_keys[order]
    boundaries = np.nonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1))[0] + 1
    groups = np.split(order, boundaries)
    for grp in groups:
        coords = tuple(int(c) for c in root_keys[grp[0]])
        _classify(index, np.asarray(grp), 0, coords)
    index._finalize(list(index.leaf_planes), np.arange(len(index.leaf_planes)))
    return index


def _make_feature(index: VoxelMapIndex, point_idx: np.ndarray,
                  normal, centroid, evals, keys: tuple) -> PlaneFeature:
    params = index.params
    eta = planarity(evals)
    sigma = _sigma_lambda(evals, params.sigma_mode)
    weight = confidence_weight(len(point_idx), sigma, eta, params.gamma)
    return PlaneFeature(normal, centroid, evals, len(point_idx), eta, sigma,
                        weight, keys, point_idx)


def _classify(index: VoxelMapIndex, point_idx: np.ndarray, depth: int,
              coords: tuple[int, int, int]):
    params = index.params
    key = (depth,) + coords
    if len(point_idx) < params.min_points:
        index.nodes[key] = (DISCARDED, None)
        return
    try:
        normal, centroid, evals = fit_plane(index.points[point_idx])
    except Degenerate:
        index.nodes[key] = (DISCARDED, None)
        return
    max_dev = float(np.max(np.abs((index.points[point_idx] - centroid) @ normal)))
    dev_gate = max(params.max_dev_floor,
                   params.max_dev_ratio * math.sqrt(evals[1] + evals[2]))
    if planarity(evals) < params.eta_max and max_dev <= dev_gate:
        index.nodes[key] = (PLANAR, len(index.leaf_planes))
        index.leaf_planes.append(
            _make_feature(index, point_idx, normal, centroid, evals, (key,)))
        return
    if depth >= params.max_depth:
        index.nodes[key] = (DISCARDED, None)
        return
    index.nodes[key] = (SUBDIVIDED, None)
    child_edge = index.edge_length(depth + 1)
    child_keys = np.floor(index.points[point_idx] / child_edge).astype(np.int64)
    order = np.lexsort((child_keys[:, 2], child_keys[:, 1], child_keys[:, 0]))
    sorted_keys = child_keys[order]
    boundaries = np.nonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1))[0] + 1
    for grp in np.split(order, boundaries):
        child_coords = tuple(int(c) for c in child_keys[grp[0]])
        _classify(index, point_idx[np.asarray(grp)], depth + 1, child_coords)


def _leaf_int_boxes(index: VoxelMapIndex) -> tuple[np.ndarray, np.ndarray]:
    """Integer AABBs of planar leaves in units of the finest cell edge."""
    max_depth = index.params.max_depth
    mins, maxs = [], []
    for plane in index.leaf_planes:
        depth, ix, iy, iz = plane.voxel_keys[0]
        scale = 2 ** (max_depth - depth)
        lo = np.array([ix, iy, iz], dtype=np.int64) * scale
        mins.append(lo)
        maxs.append(lo + scale)
    if not mins:
        return np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    return np.stack(mins), np.stack(maxs)


def merge_neighbors(index: VoxelMapIndex, tau_theta: float, tau_d: float) -> VoxelMapIndex:
    """Merge face-adjacent coplanar leaves (transitively, via union-find).

    Merging always starts over from the unmerged leaves, so applying this
    twice equals applying it once. Merged planes are refit over the union of
    their member points; the plane count never increases.
    """
    n = len(index.leaf_planes)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    if n > 1:
        mins, maxs = _leaf_int_boxes(index)
        normals = np.stack([p.normal for p in index.leaf_planes])
        centroids = np.stack([p.centroid for p in index.leaf_planes])
        for i in range(n - 1):
            touch = ((maxs[i] == mins[i + 1:]) | (maxs[i + 1:] == mins[i]))
            overlap = (mins[i] < maxs[i + 1:]) & (mins[i + 1:] < maxs[i])
            face = (touch & ~overlap).sum(axis=1) == 1
            adjacent = face & (overlap | touch).all(axis=1)
            if not adjacent.any():
                continue
            cand = np.nonzero(adjacent)[0] + i + 1
            cos_t = np.clip(np.abs(normals[cand] @ normals[i]), 0.0, 1.0)
            theta = np.arccos(cos_t)
            dist = np.linalg.norm(centroids[cand] - centroids[i], axis=1)
            for j in cand[(theta < tau_theta) & (dist < tau_d)]:
                union(i, int(j))

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    merged: list[PlaneFeature] = []
    leaf_to_plane = np.zeros(n, dtype=int)
    for root in sorted(groups):
        members = groups[root]
        for m in members:
            leaf_to_plane[m] = len(merged)
        if len(members) == 1:
            merged.append(index.leaf_planes[members[0]])
            continue
        point_idx = np.concatenate([index.leaf_planes[m].point_indices for m in members])
        normal, centroid, evals = fit_plane(index.points[point_idx])
        keys = tuple(k for m in members for k in index.leaf_planes[m].voxel_keys)
        merged.append(_make_feature(index, point_idx, normal, centroid, evals, keys))

    out = VoxelMapIndex(index.points, index.params)
    out.nodes = index.nodes
    out.leaf_planes = index.leaf_planes
    out._finalize(merged, leaf_to_plane)
    return out


def associate(point: np.ndarray, index: VoxelMapIndex,
              reject_dist: float = 0.3) -> PlaneFeature | None:
    """Plane of the deepest classified cell containing the point, or None.

    Matches whose point-to-plane distance exceeds reject_dist are rejected.
    """
    ids = associate_batch(np.asarray(point, dtype=float).reshape(1, 3), index, reject_dist)
    return index.planes[ids[0]] if ids[0] >= 0 else None


def associate_batch(points: np.ndarray, index: VoxelMapIndex,
                    reject_dist: float = 0.3) -> np.ndarray:
    """Vectorized containment association.

    Returns per-point indices into index.planes, -1 where the containing
    cell chain ends in a discarded/empty cell or the distance gate fails.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    out = np.full(n, -1, dtype=int)
    if n == 0 or not index.planes:
        return out
    active = np.arange(n)
    for depth in range(index.params.max_depth + 1):
        if len(active) == 0:
            break
        edge = index.edge_length(depth)
        keys = np.floor(points[active] / edge).astype(np.int64)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        keep_mask = np.zeros(len(active), dtype=bool)
        for u, coords in enumerate(uniq):
            node = index.nodes.get((depth, int(coords[0]), int(coords[1]), int(coords[2])))
            if node is None:
                continue
            status, leaf_idx = node
            members = inv == u
            if status == PLANAR:
                out[active[members]] = index.leaf_to_plane[leaf_idx]
            elif status == SUBDIVIDED:
                keep_mask |= members
        active = active[keep_mask]
    matched = out >= 0
    if matched.any():
        ids = out[matched]
        dist = np.abs(np.einsum(
            "ij,ij->i", index._normals[ids], points[matched] - index._centroids[ids]))
        bad = dist > reject_dist
        sel = np.nonzero(matched)[0][bad]
        out[sel] = -1
    return out


def export_planes(index: VoxelMapIndex, path) -> None:
    """One plane per line: nx ny nz cx cy cz lambda1 lambda2 lambda3 count weight."""
    with open(path, "w") as fh:
        for p in index.planes:
            vals = [*p.normal, *p.centroid, *p.eigenvalues]
            fh.write(" ".join(f"{v:.9g}" for v in vals)
                     + f" {p.point_count} {p.weight:.9g}\n")
