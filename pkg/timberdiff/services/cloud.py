"""Point cloud type, file I/O, exact spatial index and preprocessing."""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from scipy import sparse
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from timberdiff.config import settings
from timberdiff.utils.error_handling import (
    DegenerateNeighborhood,
    InvalidParameter,
    IoError,
    LengthMismatch,
    ParseError,
)

if TYPE_CHECKING:
    from timberdiff.services.registration import RigidTransform

PathLike = Union[str, Path]

# Extra neighbours fetched so that distance ties at the k-th slot can be resolved by index
_TIE_MARGIN = 4
# |sum of (p - c) . n| below this share of sum |p - c| leaves the outside undecided
_OUTSIDE_MARGIN = 1e-3


class CloudFormat(str, Enum):
    PLY = "ply"
    XYZ = "xyz"


def _readonly(array: Optional[np.ndarray], dtype=np.float64) -> Optional[np.ndarray]:
    if array is None:
        return None
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions in meters with optional per-point normals and RGB colors in [0, 1].

    A normal is either unit length or exactly zero; zero marks a point whose
    neighbourhood could not define a normal.
    """
    points: NDArray[np.float64]
    normals: Optional[NDArray[np.float64]] = None
    colors: Optional[NDArray[np.float64]] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise InvalidParameter(f"points must have shape (N, 3), got {points.shape}")
        object.__setattr__(self, "points", _readonly(points))

        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(points):
                raise LengthMismatch(
                    f"{len(normals)} normals for {len(points)} points")
            norms = np.linalg.norm(normals, axis=1)
            bad = (np.abs(norms - 1.0) > 1e-6) & (norms != 0.0)
            if np.any(bad):
                raise InvalidParameter(
                    f"{int(bad.sum())} normals are neither unit length nor zero")
            object.__setattr__(self, "normals", _readonly(normals))

        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(colors) != len(points):
                raise LengthMismatch(
                    f"{len(colors)} colors for {len(points)} points")
            if colors.size and (colors.min() < 0.0 or colors.max() > 1.0):
                raise InvalidParameter("color channels must lie in [0, 1]")
            object.__setattr__(self, "colors", _readonly(colors))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    @property
    def degenerate_mask(self) -> NDArray[np.bool_]:
        """Points flagged with a zero normal (all False when normals are absent)"""
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.any(self.normals != 0.0, axis=1)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.is_empty:
            raise InvalidParameter("empty cloud has no bounds")
        return self.points.min(axis=0), self.points.max(axis=0)

    def select(self, indices: Union[Sequence[int], np.ndarray]) -> "PointCloud":
        idx = np.asarray(indices)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.int64, copy=False)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.colors is None else self.colors[idx],
        )

    def with_normals(self, normals: Optional[np.ndarray]) -> "PointCloud":
        return PointCloud(self.points, normals, self.colors)

    def with_colors(self, colors: Optional[np.ndarray]) -> "PointCloud":
        return PointCloud(self.points, self.normals, colors)

    def transformed(self, transform: "RigidTransform") -> "PointCloud":
        normals = None if self.normals is None else transform.rotate(self.normals)
        if normals is not None:
            # keep flagged zero normals exactly zero
            normals[self.degenerate_mask] = 0.0
        return PointCloud(transform.apply(self.points), normals, self.colors)

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if not c.is_empty]
        if not clouds:
            return PointCloud.empty()
        points = np.vstack([c.points for c in clouds])
        normals = np.vstack([c.normals for c in clouds]) if all(
            c.has_normals for c in clouds) else None
        colors = np.vstack([c.colors for c in clouds]) if all(
            c.has_colors for c in clouds) else None
        return PointCloud(points, normals, colors)


class SpatialIndex:
    """Exact nearest-neighbour index over one cloud's points.

    Results equal a brute-force scan: neighbours are ordered by Euclidean
    distance, ties broken by the lower point index.
    """

    def __init__(self, points: Union[PointCloud, np.ndarray]):
        pts = points.points if isinstance(points, PointCloud) else points
        self.points = _readonly(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def _distances(self, queries: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.points[idx] - queries[:, None, :], axis=2)

    def knn(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours of every query row: (distances, indices), both (Q, k)"""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if k < 1 or k > n:
            raise InvalidParameter(f"k={k} outside [1, {n}]")
        if len(q) == 0:
            return np.zeros((0, k)), np.zeros((0, k), dtype=np.int64)

        m = min(n, k + _TIE_MARGIN)
        _, idx = self._tree.query(q, k=list(range(1, m + 1)), workers=settings.workers)
        idx = np.asarray(idx, dtype=np.int64)
        dist = self._distances(q, idx)
        order = np.lexsort((idx, dist), axis=-1)
        idx = np.take_along_axis(idx, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)

        if m < n:
            # rows whose k-th distance ties with the farthest fetched one may hide equal candidates
            kth = dist[:, k - 1]
            ambiguous = np.flatnonzero(dist[:, m - 1] <= kth * (1.0 + 1e-9) + 1e-15)
            for row in ambiguous:
                radius = kth[row] * (1.0 + 1e-9) + 1e-15
                cand = np.asarray(self._tree.query_ball_point(q[row], radius), dtype=np.int64)
                cd = np.linalg.norm(self.points[cand] - q[row], axis=1)
                o = np.lexsort((cand, cd))[:m]
                idx[row, :len(o)] = cand[o]
                dist[row, :len(o)] = cd[o]

        return dist[:, :k], idx[:, :k]

    def nearest(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest neighbour per query: (distances (Q,), indices (Q,))"""
        dist, idx = self.knn(queries, 1)
        return dist[:, 0], idx[:, 0]

    def radius(self, query: np.ndarray, r: float) -> np.ndarray:
        """Indices within distance r of one query point, ascending"""
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        found = self._tree.query_ball_point(np.asarray(query, dtype=np.float64), r)
        return np.sort(np.asarray(found, dtype=np.int64))

    def pairs(self, r: float) -> np.ndarray:
        """All index pairs (i < j) closer than r, sorted lexicographically"""
        if self._tree is None:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = self._tree.query_pairs(r, output_type="ndarray").astype(np.int64)
        if len(pairs) == 0:
            return pairs.reshape(0, 2)
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    properties: List[Tuple[str, str]]
    has_list: bool = False


def _infer_format(path: Path, fmt: Optional[Union[str, CloudFormat]]) -> CloudFormat:
    if fmt is not None:
        try:
            return CloudFormat(str(getattr(fmt, "value", fmt)).lower())
        except ValueError:
            raise InvalidParameter(f"unsupported cloud format '{fmt}'")
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return CloudFormat.PLY
    if suffix in (".xyz", ".txt"):
        return CloudFormat.XYZ
    raise InvalidParameter(f"cannot infer cloud format from '{path.name}'")


def load_cloud(path: PathLike, format: Optional[Union[str, CloudFormat]] = None) -> PointCloud:
    """Read a PLY (ascii / binary little endian) or XYZ file"""
    path = Path(path)
    fmt = _infer_format(path, format)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e

    cloud = _parse_ply(raw) if fmt is CloudFormat.PLY else _parse_xyz(raw)
    logger.debug(f"Loaded {len(cloud)} points from {path}")
    return cloud


def save_cloud(
    cloud: PointCloud,
    path: PathLike,
    format: Optional[Union[str, CloudFormat]] = None,
    binary: bool = True,
) -> None:
    """Write a cloud; XYZ keeps positions and normals, PLY keeps everything"""
    path = Path(path)
    fmt = _infer_format(path, format)
    if not path.parent.exists():
        raise IoError(f"directory {path.parent} does not exist")

    payload = _format_ply(cloud, binary) if fmt is CloudFormat.PLY else _format_xyz(cloud)
    try:
        path.write_bytes(payload)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    logger.debug(f"Saved {len(cloud)} points to {path}")


def _parse_ply_header(raw: bytes) -> Tuple[str, List[_PlyElement], int, int]:
    marker = raw.find(b"end_header")
    if not raw.startswith(b"ply") or marker < 0:
        raise ParseError("not a PLY file (missing 'ply' magic or 'end_header')", line=1)
    body_start = raw.find(b"\n", marker)
    body_start = len(raw) if body_start < 0 else body_start + 1
    header_lines = raw[:marker].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements: List[_PlyElement] = []
    for number, line in enumerate(header_lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2:
                raise ParseError("malformed format line", line=number)
            fmt = tokens[1]
            if fmt == "binary_big_endian":
                raise ParseError("binary_big_endian PLY is not supported", line=number)
            if fmt not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unknown PLY format '{fmt}'", line=number)
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise ParseError("malformed element line", line=number)
            elements.append(_PlyElement(tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=number)
            if len(tokens) >= 2 and tokens[1] == "list":
                elements[-1].has_list = True
                elements[-1].properties.append((tokens[-1], "list"))
                continue
            if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property '{line.strip()}'", line=number)
            elements[-1].properties.append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise ParseError(f"unexpected header keyword '{tokens[0]}'", line=number)

    if fmt is None:
        raise ParseError("PLY header has no format line")
    return fmt, elements, body_start, len(header_lines) + 2


def _parse_ply(raw: bytes) -> PointCloud:
    fmt, elements, body_start, header_line_count = _parse_ply_header(raw)
    vertex_pos = next((i for i, e in enumerate(elements) if e.name == "vertex"), None)
    if vertex_pos is None:
        raise ParseError("PLY file has no vertex element")
    vertex = elements[vertex_pos]
    if vertex.has_list:
        raise ParseError("list properties on vertices are not supported")
    names = [name for name, _ in vertex.properties]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"vertex element lacks property '{axis}'")

    if fmt == "ascii":
        table = _read_ascii_vertices(raw[body_start:], elements, vertex_pos, header_line_count)
        columns = {name: table[:, i] for i, name in enumerate(names)}
        dtypes = dict(vertex.properties)
    else:
        offset = body_start
        for element in elements[:vertex_pos]:
            if element.has_list:
                raise ParseError(
                    f"binary element '{element.name}' with list properties precedes vertices",
                    offset=offset)
            offset += element.count * np.dtype([(n, "<" + t) for n, t in element.properties]).itemsize
        dtype = np.dtype([(n, "<" + t) for n, t in vertex.properties])
        needed = offset + vertex.count * dtype.itemsize
        if needed > len(raw):
            raise ParseError(
                f"truncated vertex data: need {needed} bytes, file has {len(raw)}", offset=len(raw))
        record = np.frombuffer(raw, dtype=dtype, count=vertex.count, offset=offset)
        columns = {name: record[name] for name in names}
        dtypes = dict(vertex.properties)

    points = np.column_stack([columns[a].astype(np.float64) for a in ("x", "y", "z")])
    normals = None
    if all(a in columns for a in ("nx", "ny", "nz")):
        normals = np.column_stack([columns[a].astype(np.float64) for a in ("nx", "ny", "nz")])
        norms = np.linalg.norm(normals, axis=1)
        nonzero = norms > 0
        # float32 files rarely store exact unit vectors
        normals[nonzero] /= norms[nonzero, None]
    colors = None
    if all(a in columns for a in ("red", "green", "blue")):
        colors = np.column_stack([columns[a].astype(np.float64) for a in ("red", "green", "blue")])
        if dtypes["red"] == "u1":
            colors /= 255.0
        colors = np.clip(colors, 0.0, 1.0)
    return PointCloud(points, normals, colors)


def _read_ascii_vertices(body: bytes, elements: List[_PlyElement], vertex_pos: int,
                         first_line: int) -> np.ndarray:
    lines = body.decode("ascii", errors="replace").splitlines()
    start = sum(e.count for e in elements[:vertex_pos])
    vertex = elements[vertex_pos]
    width = len(vertex.properties)
    if len(lines) < start + vertex.count:
        raise ParseError(
            f"expected {vertex.count} vertex lines, found {max(0, len(lines) - start)}",
            line=first_line + len(lines))
    table = np.empty((vertex.count, width), dtype=np.float64)
    for i in range(vertex.count):
        tokens = lines[start + i].split()
        if len(tokens) != width:
            raise ParseError(
                f"vertex record has {len(tokens)} values, expected {width}",
                line=first_line + start + i)
        try:
            table[i] = [float(t) for t in tokens]
        except ValueError:
            raise ParseError("non-numeric vertex value", line=first_line + start + i)
    return table


def _format_ply(cloud: PointCloud, binary: bool) -> bytes:
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              "comment written by timberdiff", f"element vertex {len(cloud)}",
              "property double x", "property double y", "property double z"]
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cloud.has_normals:
        header += ["property double nx", "property double ny", "property double nz"]
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if cloud.has_colors:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    record = np.empty(len(cloud), dtype=np.dtype(fields))
    for i, axis in enumerate("xyz"):
        record[axis] = cloud.points[:, i]
    if cloud.has_normals:
        for i, axis in enumerate(("nx", "ny", "nz")):
            record[axis] = cloud.normals[:, i]
    if cloud.has_colors:
        rgb = np.rint(cloud.colors * 255.0).astype(np.uint8)
        for i, axis in enumerate(("red", "green", "blue")):
            record[axis] = rgb[:, i]

    if binary:
        return head + record.tobytes()
    rows = []
    for row in record:
        rows.append(" ".join(
            str(int(v)) if isinstance(v, np.integer) else repr(float(v)) for v in row))
    return head + ("\n".join(rows) + ("\n" if rows else "")).encode("ascii")


_COMMENT = re.compile(r"^\s*(#|$)")


def _parse_xyz(raw: bytes) -> PointCloud:
    text = raw.decode("utf-8", errors="replace")
    rows: List[List[float]] = []
    width = None
    for number, line in enumerate(text.splitlines(), start=1):
        if _COMMENT.match(line):
            continue
        tokens = line.split()
        if len(tokens) not in (3, 6):
            raise ParseError(f"expected 3 or 6 values, found {len(tokens)}", line=number)
        if width is not None and len(tokens) != width:
            raise ParseError("records mix positions-only and positions+normals", line=number)
        width = len(tokens)
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise ParseError("non-numeric value", line=number)

    if not rows:
        return PointCloud.empty()
    table = np.asarray(rows, dtype=np.float64)
    normals = None
    if width == 6:
        normals = table[:, 3:6].copy()
        norms = np.linalg.norm(normals, axis=1)
        nonzero = norms > 0
        normals[nonzero] /= norms[nonzero, None]
    return PointCloud(table[:, :3], normals)


def _format_xyz(cloud: PointCloud) -> bytes:
    if cloud.has_colors:
        logger.warning("XYZ cannot store colors; dropping them")
    table = cloud.points if not cloud.has_normals else np.hstack([cloud.points, cloud.normals])
    lines = [" ".join(repr(float(v)) for v in row) for row in table]
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def voxel_downsample(cloud: PointCloud, voxel_size: float,
                     anchor: Optional[np.ndarray] = None) -> PointCloud:
    """One centroid per occupied voxel of a grid anchored at the bounding-box minimum.

    Output points are ordered by voxel key; normals and colors are averaged,
    normals renormalised.
    """
    if not voxel_size > 0:
        raise InvalidParameter(f"voxel_size must be > 0, got {voxel_size}")
    if cloud.is_empty:
        return cloud

    origin = cloud.points.min(axis=0) if anchor is None else np.asarray(anchor, dtype=np.float64)
    keys = np.floor((cloud.points - origin) / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    def _mean(values: np.ndarray) -> np.ndarray:
        return np.column_stack([
            np.bincount(inverse, weights=values[:, c], minlength=m) for c in range(3)
        ]) / counts[:, None]

    points = _mean(cloud.points)
    normals = None
    if cloud.has_normals:
        normals = _mean(cloud.normals)
        norms = np.linalg.norm(normals, axis=1)
        nonzero = norms > 1e-12
        normals[nonzero] /= norms[nonzero, None]
        normals[~nonzero] = 0.0
    colors = np.clip(_mean(cloud.colors), 0.0, 1.0) if cloud.has_colors else None

    logger.debug(f"Voxel down-sampling {len(cloud)} -> {m} points (voxel {voxel_size:.4g} m)")
    return PointCloud(points, normals, colors)


def remove_statistical_outliers(cloud: PointCloud, k_neighbors: int,
                                std_ratio: float) -> Tuple[PointCloud, np.ndarray]:
    """Drop points whose mean k-NN distance exceeds mean + std_ratio * std of that statistic.

    Returns the kept cloud and the removed indices (input ordering).
    """
    if k_neighbors < 1:
        raise InvalidParameter(f"k_neighbors must be >= 1, got {k_neighbors}")
    if not std_ratio > 0:
        raise InvalidParameter(f"std_ratio must be > 0, got {std_ratio}")
    n = len(cloud)
    if k_neighbors >= n:
        raise InvalidParameter(f"k_neighbors={k_neighbors} needs more than {n} points")

    index = SpatialIndex(cloud)
    dist, idx = index.knn(cloud.points, k_neighbors + 1)
    # drop each point's own entry; with duplicates it may not sit in column 0
    own = idx == np.arange(n)[:, None]
    has_own = own.any(axis=1)
    drop = np.where(has_own, np.argmax(own, axis=1), k_neighbors)
    keep_cols = np.ones_like(own)
    keep_cols[np.arange(n), drop] = False
    neighbour_dist = dist[keep_cols].reshape(n, k_neighbors)

    mean_dist = neighbour_dist.mean(axis=1)
    threshold = mean_dist.mean() + std_ratio * mean_dist.std()
    removed = np.flatnonzero(mean_dist > threshold)
    kept = np.setdiff1d(np.arange(n), removed, assume_unique=True)
    logger.debug(f"Statistical outlier removal dropped {len(removed)} of {n} points")
    return cloud.select(kept), removed


def estimate_normals(cloud: PointCloud, k_neighbors: int = 20,
                     orientation_hint: Optional[np.ndarray] = None,
                     strict: bool = False) -> PointCloud:
    """PCA normals from each point's k-NN covariance.

    With a hint, normals face the hint point; otherwise orientation is
    propagated along a minimum spanning tree of the k-NN graph and each
    connected part is turned to face away from its centroid. Parts without a
    clear outside (a single plane) fall back to +z at their highest point.
    Degenerate neighbourhoods (coincident or collinear) get a zero normal.
    """
    n = len(cloud)
    if k_neighbors < 3:
        raise InvalidParameter(f"k_neighbors must be >= 3, got {k_neighbors}")
    if n < k_neighbors:
        raise InvalidParameter(f"cloud has {n} points, fewer than k_neighbors={k_neighbors}")

    index = SpatialIndex(cloud)
    _, idx = index.knn(cloud.points, k_neighbors)
    neighbourhoods = cloud.points[idx]
    centred = neighbourhoods - neighbourhoods.mean(axis=1, keepdims=True)
    covariance = np.einsum("nki,nkj->nij", centred, centred) / k_neighbors
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    normals = eigenvectors[:, :, 0].copy()

    largest = eigenvalues[:, 2]
    degenerate = (largest <= 1e-24) | (eigenvalues[:, 1] <= 1e-10 * largest)
    normals[degenerate] = 0.0
    if degenerate.any():
        message = f"{int(degenerate.sum())} points have degenerate neighbourhoods"
        if strict:
            raise DegenerateNeighborhood(message)
        logger.warning(f"{message}; their normals are set to zero")

    if orientation_hint is not None:
        towards = np.asarray(orientation_hint, dtype=np.float64) - cloud.points
        flip = np.einsum("ij,ij->i", normals, towards) < 0
        normals[flip] *= -1.0
    else:
        normals = _orient_by_spanning_tree(cloud.points, normals, idx, degenerate)

    return cloud.with_normals(normals)


def _orient_by_spanning_tree(points: np.ndarray, normals: np.ndarray, idx: np.ndarray,
                             degenerate: np.ndarray) -> np.ndarray:
    n, k = idx.shape
    rows = np.repeat(np.arange(n), k)
    cols = idx.reshape(-1)
    valid = (rows != cols) & ~degenerate[rows] & ~degenerate[cols]
    rows, cols = rows[valid], cols[valid]
    # small offset keeps parallel-normal edges in the sparse graph
    weights = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1e-6
    graph = sparse.csr_matrix((weights, (rows, cols)), shape=(n, n))
    graph = graph.maximum(graph.T)
    tree = minimum_spanning_tree(graph)

    oriented = normals.copy()
    n_components, labels = connected_components(tree, directed=False)
    for component in range(n_components):
        members = np.flatnonzero(labels == component)
        if degenerate[members[0]]:
            continue
        root = members[np.argmax(points[members, 2])]
        if oriented[root, 2] < 0:
            oriented[root] *= -1.0
        if len(members) == 1:
            continue
        order, predecessors = breadth_first_order(tree, root, directed=False)
        for node in order[1:]:
            parent = predecessors[node]
            if np.dot(oriented[node], oriented[parent]) < 0:
                oriented[node] *= -1.0

        spread = points[members] - points[members].mean(axis=0)
        outward = float(np.einsum("ij,ij->", spread, oriented[members]))
        margin = _OUTSIDE_MARGIN * float(np.linalg.norm(spread, axis=1).sum())
        if outward < -margin:
            oriented[members] *= -1.0
    return oriented
