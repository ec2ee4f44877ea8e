"""File formats: KITTI/TUM poses, KFD1 descriptors, channel CSV, graph dumps, id lists.

Floats are written with ``repr`` so that every writer/reader pair round-trips
byte-identically.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, CountMismatch, ParseError
from .geometry import Pose
from .posegraph import LOOP, ODOM, PoseGraph

KFD1_MAGIC = b"KFD1"
_KFD1_HEADER = struct.Struct("<4sII")
CHANNELS_HEADER = ["id", "spaciousness", "entropy_proxy"]
_TRIU = np.triu_indices(6)


def _f(x) -> str:
    return repr(float(x))


def _floats(tokens, path, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError("non-numeric field", path, lineno) from None


def _lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s.split()


# -- poses ---------------------------------------------------------------------------------


def write_kitti(path, poses) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(" ".join(_f(v) for v in p.matrix()[:3].reshape(-1)) + "\n")


def read_kitti(path) -> list:
    out = []
    for lineno, tok in _lines(path):
        if len(tok) != 12:
            raise ParseError(f"expected 12 values, got {len(tok)}", path, lineno)
        m = np.eye(4)
        m[:3] = np.array(_floats(tok, path, lineno)).reshape(3, 4)
        try:
            out.append(Pose.from_matrix(m))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return out


def write_tum(path, timestamps, poses) -> None:
    with open(path, "w") as fh:
        for ts, p in zip(timestamps, poses, strict=True):
            w, x, y, z = p.q
            vals = [ts, *p.t, x, y, z, w]
            fh.write(" ".join(_f(v) for v in vals) + "\n")


def read_tum(path) -> tuple:
    """Returns (timestamps, poses)."""
    ts, poses = [], []
    for lineno, tok in _lines(path):
        if len(tok) != 8:
            raise ParseError(f"expected 8 values, got {len(tok)}", path, lineno)
        v = _floats(tok, path, lineno)
        q = np.array([v[7], v[4], v[5], v[6]])
        if not abs(np.linalg.norm(q) - 1.0) < 1e-6:
            raise ParseError("quaternion is not unit length", path, lineno)
        ts.append(v[0])
        poses.append(Pose(q, np.array(v[1:4])))
    return ts, poses


def read_poses(path, fmt: str):
    """Poses and timestamps from a KITTI or TUM file (KITTI timestamps are 0.1 s apart)."""
    if fmt == "kitti":
        poses = read_kitti(path)
        return [0.1 * i for i in range(len(poses))], poses
    if fmt == "tum":
        return read_tum(path)
    raise ValueError(f"unknown pose format {fmt!r}")


def write_poses(path, fmt: str, timestamps, poses) -> None:
    if fmt == "kitti":
        write_kitti(path, poses)
    elif fmt == "tum":
        write_tum(path, timestamps, poses)
    else:
        raise ValueError(f"unknown pose format {fmt!r}")


# -- descriptors ---------------------------------------------------------------------------


def write_kfd1(path, descriptors) -> None:
    D = np.ascontiguousarray(np.asarray(descriptors, dtype="<f4"))
    if D.ndim != 2:
        raise ValueError("descriptors must be a 2-D array")
    with open(path, "wb") as fh:
        fh.write(_KFD1_HEADER.pack(KFD1_MAGIC, D.shape[1], D.shape[0]))
        fh.write(D.tobytes())


def read_kfd1(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _KFD1_HEADER.size:
        raise BadMagic(f"{path}: file too short for a KFD1 header")
    magic, m, count = _KFD1_HEADER.unpack_from(data)
    if magic != KFD1_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    body = len(data) - _KFD1_HEADER.size
    if body != 4 * m * count:
        raise CountMismatch(f"{path}: header says {count}x{m} floats, body holds {body // 4}")
    return np.frombuffer(data, dtype="<f4", offset=_KFD1_HEADER.size).reshape(count, m).copy()


# -- channels ------------------------------------------------------------------------------


def write_channels(path, keyframes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHANNELS_HEADER)
        for k in keyframes:
            w.writerow([k.id, _f(k.spaciousness), _f(k.entropy_proxy)])


def read_channels(path) -> dict:
    """{id: (spaciousness, entropy_proxy)}"""
    out = {}
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != CHANNELS_HEADER:
            raise ParseError(f"expected header {','.join(CHANNELS_HEADER)}", path, 1)
        for lineno, row in enumerate(rows, 2):
            if len(row) != 3:
                raise ParseError("expected 3 fields", path, lineno)
            try:
                out[int(row[0])] = (float(row[1]), float(row[2]))
            except ValueError:
                raise ParseError("non-numeric field", path, lineno) from None
    return out


# -- graph dump ----------------------------------------------------------------------------


def _pose_fields(p: Pose) -> list:
    w, x, y, z = p.q
    return [*p.t, x, y, z, w]


def _parse_pose(v) -> Pose:
    return Pose(np.array([v[6], v[3], v[4], v[5]]), np.array(v[:3]))


def write_graph(path, g: PoseGraph) -> None:
    with open(path, "w") as fh:
        for nid in g.order:
            fh.write(f"VERTEX {nid} " + " ".join(_f(v) for v in _pose_fields(g.nodes[nid])) + "\n")
        for e in g.edges:
            vals = _pose_fields(e.z) + list(e.info[_TRIU])
            fh.write(f"EDGE {e.kind} {e.i} {e.j} " + " ".join(_f(v) for v in vals) + "\n")


def read_graph(path) -> PoseGraph:
    """Parse a graph dump. The first vertex is fixed (gauge)."""
    g = PoseGraph()
    for lineno, tok in _lines(path):
        try:
            if tok[0] == "VERTEX":
                if len(tok) != 9:
                    raise ParseError("VERTEX needs id and 7 pose values", path, lineno)
                g.add_node(int(tok[1]), _parse_pose(_floats(tok[2:], path, lineno)), fixed=not g.order)
            elif tok[0] == "EDGE":
                if len(tok) != 32 or tok[1] not in (ODOM, LOOP):
                    raise ParseError("EDGE needs kind, i, j, 7 pose values and 21 information values",
                                     path, lineno)
                v = _floats(tok[4:], path, lineno)
                info = np.zeros((6, 6))
                info[_TRIU] = v[7:]
                info = info + np.triu(info, 1).T
                i, j = int(tok[2]), int(tok[3])
                if tok[1] == ODOM:
                    g.add_odometry_edge(i, j, _parse_pose(v[:7]), info)
                elif not g.add_loop_edge(i, j, _parse_pose(v[:7]), info):
                    raise ParseError(f"duplicate edge ({i}, {j})", path, lineno)
            else:
                raise ParseError(f"unknown record {tok[0]!r}", path, lineno)
        except (ValueError, KeyError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), path, lineno) from None
    return g


# -- id lists and trajectories keyed by id ---------------------------------------------------


def write_ids(path, ids) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids))


def read_ids(path) -> list:
    out = []
    for lineno, tok in _lines(path):
        if len(tok) != 1 or not tok[0].lstrip("-").isdigit():
            raise ParseError("expected one integer id per line", path, lineno)
        out.append(int(tok[0]))
    return out


def write_trajectory(path, poses: dict) -> None:
    """``id tx ty tz qx qy qz qw`` per line, in the dict's order."""
    with open(path, "w") as fh:
        for nid, p in poses.items():
            fh.write(f"{nid} " + " ".join(_f(v) for v in _pose_fields(p)) + "\n")


def read_trajectory(path) -> dict:
    out = {}
    for lineno, tok in _lines(path):
        if len(tok) != 8:
            raise ParseError("expected id and 7 pose values", path, lineno)
        out[int(tok[0])] = _parse_pose(_floats(tok[1:], path, lineno))
    return out
