"""Point cloud containers, motion compensation, and scan/trajectory file I/O.

Frames are immutable after construction. The cloud format is a small ASCII
PCD subset (FIELDS x y z [t] [intensity], TYPE F, DATA ascii); trajectories
are plain text lines `stamp tx ty tz qx qy qz qw` with scalar-last unit
quaternions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import NonMonotonicStamps, ParseError, StampMismatch, UnsupportedField
from .geometry import Pose

STAMP_TOL = 1e-6


@dataclass(frozen=True)
class Point:
    """Single-point view used at API seams; bulk storage lives in Frame."""

    position: np.ndarray
    time_offset: float = 0.0
    intensity: float | None = None


@dataclass(frozen=True)
class Frame:
    """One timestamped LiDAR sweep.

    positions: (N, 3) meters in the sensor frame at each point's capture
    time; time_offsets: (N,) seconds from scan start, within
    [0, scan_duration].
    """

    positions: np.ndarray
    stamp: float = 0.0
    sensor_id: str = "A"
    scan_duration: float = 0.0
    time_offsets: np.ndarray | None = None
    intensities: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("non-finite point positions")
        offs = self.time_offsets
        offs = np.zeros(len(pos)) if offs is None else np.asarray(offs, dtype=float).reshape(-1)
        if len(offs) != len(pos):
            raise ValueError("time_offsets length mismatch")
        if len(offs) and (offs.min() < 0.0 or offs.max() > self.scan_duration + 1e-12):
            raise ValueError("time_offsets outside [0, scan_duration]")
        inten = self.intensities
        if inten is not None:
            inten = np.asarray(inten, dtype=float).reshape(-1)
            if len(inten) != len(pos):
                raise ValueError("intensities length mismatch")
            inten.flags.writeable = False
        pos.flags.writeable = False
        offs.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "time_offsets", offs)
        object.__setattr__(self, "intensities", inten)

    def __len__(self) -> int:
        return len(self.positions)

    def point(self, i: int) -> Point:
        inten = None if self.intensities is None else float(self.intensities[i])
        return Point(self.positions[i].copy(), float(self.time_offsets[i]), inten)

    def with_positions(self, positions: np.ndarray) -> "Frame":
        return Frame(positions, self.stamp, self.sensor_id, self.scan_duration,
                     self.time_offsets, self.intensities)


@dataclass(frozen=True)
class Trajectory:
    """Timestamped pose sequence; stamps must strictly increase."""

    stamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        if len(stamps) != len(self.poses):
            raise ValueError("stamps/poses length mismatch")
        if len(stamps) > 1 and np.any(np.diff(stamps) <= 0.0):
            raise NonMonotonicStamps("stamps must be strictly increasing")
        stamps.flags.writeable = False
        object.__setattr__(self, "stamps", stamps)
        object.__setattr__(self, "poses", list(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    def index_for_stamp(self, stamp: float, tol: float = STAMP_TOL) -> int:
        i = int(np.argmin(np.abs(self.stamps - stamp)))
        if abs(self.stamps[i] - stamp) > tol:
            raise StampMismatch(
                f"no trajectory sample within {tol} s of stamp {stamp:.6f}")
        return i


def transform_frame(pose: Pose, f: Frame) -> Frame:
    """Rigidly transform every point; all metadata is preserved."""
    return f.with_positions(geo.apply(pose, f.positions))


def deskew(f: Frame, pose_start: Pose, pose_end: Pose) -> Frame:
    """Express all points at the scan-start pose under constant-twist motion.

    A point captured at fraction s = time_offset / scan_duration is mapped by
    exp(s * log(pose_start^-1 * pose_end)). Raises AngleNearPi if the scan
    spans a rotation too close to 180 degrees.
    """
    rel = geo.compose(geo.inverse(pose_start), pose_end)
    xi = geo.log_se3(rel).as_vector()
    if np.allclose(xi, 0.0, atol=1e-15) or len(f) == 0 or f.scan_duration <= 0.0:
        return f
    s = f.time_offsets / f.scan_duration
    rots, trans = geo.exp_se3_scaled(xi, s)
    moved = np.einsum("kij,kj->ki", rots, f.positions) + trans
    return f.with_positions(moved)


def voxel_downsample(f: Frame, leaf: float) -> Frame:
    """Replace each occupied leaf cell by the centroid of its points.

    Output cells are ordered lexicographically by integer cell index, so the
    result is independent of input ordering and worker partitioning.
    """
    if leaf <= 0.0:
        raise ValueError("leaf must be positive")
    if len(f) == 0:
        return f
    cells = np.floor(f.positions / leaf).astype(np.int64)
    uniq, inv = np.unique(cells, axis=0, return_inverse=True)
    counts = np.bincount(inv, minlength=len(uniq)).astype(float)

    def cell_mean(values):
        sums = np.zeros((len(uniq),) + values.shape[1:])
        np.add.at(sums, inv, values)
        return sums / counts.reshape(-1, *([1] * (values.ndim - 1)))

    positions = cell_mean(f.positions)
    offsets = cell_mean(f.time_offsets.reshape(-1, 1)).reshape(-1)
    inten = None if f.intensities is None else cell_mean(f.intensities.reshape(-1, 1)).reshape(-1)
    return Frame(positions, f.stamp, f.sensor_id, f.scan_duration, offsets, inten)


def scan_end_poses(traj: Trajectory, scan_period: float | None = None) -> list[Pose]:
    """End-of-scan pose for each trajectory sample, assuming each scan spans
    from its stamp toward the next sample (contiguous scanning).

    With scan_period given, the end pose is interpolated at
    scan_period / (next stamp - stamp); otherwise the next sample is used
    directly. The final sample extrapolates the previous relative motion.
    """
    n = len(traj)
    if n == 1:
        return [traj.poses[0]]
    ends: list[Pose] = []
    for j in range(n - 1):
        if scan_period is None:
            ends.append(traj.poses[j + 1])
        else:
            frac = scan_period / (traj.stamps[j + 1] - traj.stamps[j])
            ends.append(geo.interpolate_pose(traj.poses[j], traj.poses[j + 1], frac))
    last_rel = geo.compose(geo.inverse(traj.poses[-2]), traj.poses[-1])
    if scan_period is not None:
        frac = scan_period / (traj.stamps[-1] - traj.stamps[-2])
        xi = geo.log_se3(last_rel)
        last_rel = geo.exp_se3(geo.Twist(xi.rot * frac, xi.trans * frac))
    ends.append(geo.compose(traj.poses[-1], last_rel))
    return ends


# ---------------------------------------------------------------------------
# ASCII PCD subset


_HEADER_ORDER = ["VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH",
                 "HEIGHT", "VIEWPOINT", "POINTS", "DATA"]
_ALLOWED_FIELDS = [["x", "y", "z"],
                   ["x", "y", "z", "t"],
                   ["x", "y", "z", "intensity"],
                   ["x", "y", "z", "t", "intensity"]]


def save_cloud(f: Frame, path) -> None:
    fields = ["x", "y", "z", "t"]
    cols = [f.positions[:, 0], f.positions[:, 1], f.positions[:, 2], f.time_offsets]
    if f.intensities is not None:
        fields.append("intensity")
        cols.append(f.intensities)
    n = len(f)
    k = len(fields)
    lines = [
        "VERSION .7",
        "FIELDS " + " ".join(fields),
        "SIZE " + " ".join(["4"] * k),
        "TYPE " + " ".join(["F"] * k),
        "COUNT " + " ".join(["1"] * k),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    data = np.column_stack(cols)
    buf = io.StringIO()
    buf.write("\n".join(lines) + "\n")
    np.savetxt(buf, data, fmt="%.9g")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_cloud(path, *, stamp: float = 0.0, sensor_id: str = "A",
               scan_duration: float | None = None) -> Frame:
    """Parse the ASCII PCD subset; metadata not stored in PCD is supplied by
    the caller. scan_duration defaults to the largest time offset present."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    header: dict[str, list[str]] = {}
    idx = 0
    for want in _HEADER_ORDER:
        if idx >= len(lines):
            raise ParseError(f"missing header line {want}", line=idx + 1)
        parts = lines[idx].split()
        if not parts or parts[0] != want:
            raise ParseError(f"expected {want} header, got {lines[idx]!r}", line=idx + 1)
        header[want] = parts[1:]
        idx += 1
    fields = header["FIELDS"]
    if fields not in _ALLOWED_FIELDS:
        raise UnsupportedField(f"unsupported FIELDS {' '.join(fields)}")
    k = len(fields)
    if header["TYPE"] != ["F"] * k:
        raise UnsupportedField("only TYPE F supported")
    if header["COUNT"] != ["1"] * k:
        raise UnsupportedField("only COUNT 1 supported")
    if header["HEIGHT"] != ["1"]:
        raise UnsupportedField("only HEIGHT 1 supported")
    try:
        n = int(header["POINTS"][0])
        width = int(header["WIDTH"][0])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"bad WIDTH/POINTS header: {exc}", line=idx) from exc
    if width != n:
        raise ParseError(f"WIDTH {width} != POINTS {n}", line=idx)
    data_lines = [ln for ln in lines[idx:] if ln.strip()]
    if len(data_lines) != n:
        raise ParseError(f"expected {n} data rows, found {len(data_lines)}",
                         line=idx + min(n, len(data_lines)) + 1)
    if n == 0:
        data = np.zeros((0, k))
    else:
        try:
            data = np.loadtxt(io.StringIO("\n".join(data_lines)), ndmin=2)
        except ValueError:
            data = _parse_rows_slow(data_lines, idx, k)
    if data.shape[1] != k:
        raise ParseError(f"rows have {data.shape[1]} columns, expected {k}", line=idx + 1)
    pos = data[:, :3]
    offs = data[:, fields.index("t")] if "t" in fields else None
    inten = data[:, fields.index("intensity")] if "intensity" in fields else None
    if scan_duration is None:
        scan_duration = float(offs.max()) if offs is not None and len(offs) else 0.0
    return Frame(pos, stamp, sensor_id, scan_duration, offs, inten)


def _parse_rows_slow(data_lines: list[str], header_len: int, k: int) -> np.ndarray:
    rows = []
    for i, ln in enumerate(data_lines):
        parts = ln.split()
        if len(parts) != k:
            raise ParseError(f"expected {k} values, got {len(parts)}",
                             line=header_len + i + 1)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(str(exc), line=header_len + i + 1) from exc
    return np.asarray(rows).reshape(-1, k)


# ---------------------------------------------------------------------------
# Trajectory files


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w") as fh:
        fh.write("# stamp tx ty tz qx qy qz qw\n")
        for stamp, pose in zip(traj.stamps, traj.poses):
            fh.write(format_pose_line(pose, stamp) + "\n")


def format_pose_line(pose: Pose, stamp: float = 0.0) -> str:
    q = geo.rot_to_quat(pose.rotation)
    vals = [stamp, *pose.translation, *q]
    return " ".join(f"{v:.12g}" for v in vals)


def parse_pose_line(line: str) -> tuple[float, Pose]:
    parts = line.split()
    if len(parts) != 8:
        raise ParseError(f"expected 8 values, got {len(parts)}")
    vals = [float(p) for p in parts]
    return vals[0], Pose(geo.quat_to_rot(np.array(vals[4:8])), np.array(vals[1:4]))


def load_trajectory(path) -> Trajectory:
    stamps: list[float] = []
    poses: list[Pose] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                stamp, pose = parse_pose_line(line)
            except (ValueError, ParseError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
            stamps.append(stamp)
            poses.append(pose)
    if len(stamps) > 1 and np.any(np.diff(np.asarray(stamps)) <= 0.0):
        raise NonMonotonicStamps(f"{path}: stamps must be strictly increasing")
    return Trajectory(np.asarray(stamps), poses)


def load_pose(path) -> Pose:
    """Read the first pose line of a file (e.g. a ground-truth extrinsic)."""
    traj = load_trajectory(path)
    if len(traj) == 0:
        raise ParseError(f"{path}: no pose lines found")
    return traj.poses[0]
