"""Constructed timber geometry for the test suite.

Beams are unions of cells of a rectilinear grid, so every mesh is closed,
consistently wound and free of T-junctions.
"""
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from timberdiff.services.cad_model import Assembly, Beam, build_beam, sample_mesh
from timberdiff.services.cloud import PointCloud
from timberdiff.utils.seeding import Stream, derive_rng

Notch = Tuple[float, float, float]
Cut = Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]


def grid_solid(xs: Sequence[float], ys: Sequence[float], zs: Sequence[float],
               filled: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Outward-wound boundary triangles of the filled cells"""
    axes = [np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64),
            np.asarray(zs, dtype=np.float64)]
    shape = filled.shape
    nodes = tuple(n + 1 for n in shape)

    def node(i, j, k):
        return (i * nodes[1] + j) * nodes[2] + k

    triangles = []
    for cell in zip(*np.nonzero(filled)):
        for axis in range(3):
            for sign in (-1, 1):
                neighbour = list(cell)
                neighbour[axis] += sign
                if 0 <= neighbour[axis] < shape[axis] and filled[tuple(neighbour)]:
                    continue
                b, c = (axis + 1) % 3, (axis + 2) % 3
                corners = []
                for db, dc in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    index = list(cell)
                    index[axis] += 1 if sign > 0 else 0
                    index[b] += db
                    index[c] += dc
                    corners.append(node(*index))
                if sign < 0:
                    corners = [corners[0], corners[3], corners[2], corners[1]]
                triangles.append((corners[0], corners[1], corners[2]))
                triangles.append((corners[0], corners[2], corners[3]))

    triangles = np.asarray(triangles, dtype=np.int64)
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    used, local = np.unique(triangles, return_inverse=True)
    return grid[used], local.reshape(-1, 3)


def notched_beam(beam_id: int, length: float, width: float, height: float,
                 notches: Iterable[Notch] = (), origin: Sequence[float] = (0.0, 0.0, 0.0),
                 tag_joints: bool = False) -> Beam:
    """Box beam along x with top notches (x0, x1, depth) through its full width.

    With `tag_joints` the notch faces become explicit joints (one per notch,
    faces numbered floor first, then walls by x).
    """
    notches = list(notches)
    xs = sorted({0.0, length, *[x for n in notches for x in n[:2]]})
    zs = sorted({0.0, height, *[height - n[2] for n in notches]})
    ys = [0.0, width]
    filled = np.ones((len(xs) - 1, 1, len(zs) - 1), dtype=bool)
    for x0, x1, depth in notches:
        for i in range(len(xs) - 1):
            if x0 <= xs[i] and xs[i + 1] <= x1:
                for k in range(len(zs) - 1):
                    if zs[k] >= height - depth - 1e-12:
                        filled[i, 0, k] = False

    vertices, triangles = grid_solid(xs, ys, zs, filled)
    vertices = vertices + np.asarray(origin, dtype=np.float64)

    tags = {}
    if tag_joints:
        corners = vertices[triangles] - np.asarray(origin, dtype=np.float64)
        normal = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        centre = corners.mean(axis=1)
        for joint_id, (x0, x1, depth) in enumerate(notches):
            floor = (np.abs(normal[:, 2]) > 0) & np.isclose(centre[:, 2], height - depth) & \
                (centre[:, 0] > x0) & (centre[:, 0] < x1)
            walls = (np.abs(normal[:, 0]) > 0) & (centre[:, 2] > height - depth)
            faces = [np.flatnonzero(floor)]
            for x in (x0, x1):
                if 0.0 < x < length:
                    faces.append(np.flatnonzero(walls & np.isclose(centre[:, 0], x)))
            for face_id, positions in enumerate(faces):
                tags[(joint_id, face_id)] = positions
    return build_beam(beam_id, vertices, triangles, tags)


def box_beam(beam_id: int, size: Sequence[float], origin: Sequence[float] = (0.0, 0.0, 0.0)) -> Beam:
    return notched_beam(beam_id, size[0], size[1], size[2], origin=origin)


def end_half_lap(beam_id: int, length: float, section: float, lap: float, depth: float,
                 origin: Sequence[float] = (0.0, 0.0, 0.0)) -> Beam:
    """Square-section beam with a half-lap cut into the top of its far end"""
    return notched_beam(beam_id, length, section, section,
                        [(length - lap, length, depth)], origin=origin)


def cut_beam(beam_id: int, length: float, width: float, height: float, cuts: Iterable[Cut],
             origin: Sequence[float] = (0.0, 0.0, 0.0)) -> Beam:
    """Box beam along x with axis-aligned boxes ((x0, x1), (y0, y1), (z0, z1)) removed"""
    cuts = list(cuts)
    edges = []
    for axis, extent in enumerate((length, width, height)):
        edges.append(sorted({0.0, extent, *[v for cut in cuts for v in cut[axis]]}))
    centres = [(np.asarray(e[:-1]) + np.asarray(e[1:])) / 2.0 for e in edges]
    cx, cy, cz = np.meshgrid(*centres, indexing="ij")
    filled = np.ones(cx.shape, dtype=bool)
    for (x0, x1), (y0, y1), (z0, z1) in cuts:
        filled &= ~((cx > x0) & (cx < x1) & (cy > y0) & (cy < y1) & (cz > z0) & (cz < z1))
    vertices, triangles = grid_solid(*edges, filled)
    return build_beam(beam_id, vertices + np.asarray(origin, dtype=np.float64), triangles, {})


def skewed_butt_beam(beam_id: int, length: float, width: float, height: float, skew: float,
                     tag_joints: bool = False) -> Beam:
    """Box beam whose far end is sawn off at an angle: x runs to length + skew * y.

    With `tag_joints` the sawn end is joint 0, face 0.
    """
    end = length + skew * width
    bottom = [(0.0, 0.0), (length, 0.0), (end, width), (0.0, width)]
    vertices = np.array([(x, y, z) for z in (0.0, height) for x, y in bottom])
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (3, 7, 6, 2), (0, 4, 7, 3), (1, 2, 6, 5)]
    triangles = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    tags = {(0, 0): np.array([10, 11])} if tag_joints else {}
    return build_beam(beam_id, vertices, np.asarray(triangles), tags)


def log_frame(n_beams: int = 4, spacing: float = 0.4) -> Assembly:
    """Parallel square beams of different lengths, laid out side by side"""
    beams = tuple(
        box_beam(i, (0.6 + 0.1 * i, 0.08, 0.08), origin=(0.0, i * spacing, 0.0))
        for i in range(n_beams)
    )
    return Assembly("frame", beams)


def sampled_scan(beams: Sequence[Beam], density: float, seed: int = 7,
                 noise: float = 0.0, offsets: Optional[dict] = None) -> PointCloud:
    """Noise-along-normal samples of each beam surface; `offsets` shifts whole beams"""
    parts = []
    for beam in beams:
        rng = derive_rng(seed, Stream.SYNTHETIC, beam.id)
        cloud = sample_mesh(beam.faces, density, rng)
        points = cloud.points
        if noise > 0:
            points = points + cloud.normals * rng.normal(0.0, noise, size=(len(cloud), 1))
        if offsets and beam.id in offsets:
            points = points + np.asarray(offsets[beam.id], dtype=np.float64)
        parts.append(PointCloud(points))
    return PointCloud.concatenate(parts)


def scan_from_above(beams: Sequence[Beam], density: float, seed: int = 7,
                    offsets: Optional[dict] = None) -> PointCloud:
    """Samples of each beam's top face only, as seen by a scanner over beams lying flat"""
    parts = []
    for beam in beams:
        top = max(beam.faces, key=lambda f: f.vertices[f.vertex_ids][:, 2].mean())
        points = sample_mesh([top], density, derive_rng(seed, Stream.SYNTHETIC, beam.id)).points
        if offsets and beam.id in offsets:
            points = points + np.asarray(offsets[beam.id], dtype=np.float64)
        parts.append(PointCloud(points))
    return PointCloud.concatenate(parts)
