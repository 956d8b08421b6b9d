"""Semantic CAD model: Assembly -> Beam -> Joint -> JointFace over triangle meshes."""
from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from pydantic import ValidationError
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from timberdiff.schemas import (
    AssemblyDocument,
    BeamDocument,
    JointDocument,
    JointFaceDocument,
)
from timberdiff.services.cloud import PointCloud
from timberdiff.utils.error_handling import (
    InvalidParameter,
    IoError,
    NotApplicable,
    ParseError,
    SemanticError,
)
from timberdiff.utils.seeding import Stream, derive_rng

PathLike = Union[str, Path]

BEAM_GROUP = re.compile(r"^beam(\d+)(_open)?$")
JOINT_FACE_GROUP = re.compile(r"^beam(\d+)_joint(\d+)_face(\d+)$")

# coplanarity used to merge base triangles into faces
_COPLANAR_COS = np.cos(np.radians(0.01))
_COPLANAR_DISTANCE = 1e-7
_WELD_RESOLUTION = 1e-9


@dataclass(frozen=True, eq=False)
class Plane:
    """n . x = offset, with the largest vertex deviation seen by the fit"""
    normal: NDArray[np.float64]
    offset: float
    max_deviation: float

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset

    def project(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points - np.outer(self.signed_distance(points), self.normal)

    @classmethod
    def fit(cls, points: np.ndarray, reference_normal: Optional[np.ndarray] = None) -> "Plane":
        points = np.asarray(points, dtype=np.float64)
        centroid = points.mean(axis=0)
        _, _, vt = np.linalg.svd(points - centroid)
        normal = vt[-1]
        if reference_normal is not None and np.dot(normal, reference_normal) < 0:
            normal = -normal
        offset = float(np.dot(normal, centroid))
        deviation = float(np.max(np.abs(points @ normal - offset)))
        return cls(normal, offset, deviation)


@dataclass(frozen=True, eq=False)
class MeshFace:
    """Planar patch of a beam's surface; triangles index the beam's vertex pool"""
    id: int
    vertices: NDArray[np.float64]
    triangles: NDArray[np.int64]
    plane: Plane
    joint_id: Optional[int] = None

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @property
    def area(self) -> float:
        return float(triangle_areas(self.corners).sum())

    @property
    def vertex_ids(self) -> np.ndarray:
        return np.unique(self.triangles)


@dataclass(frozen=True, eq=False)
class JointFace(MeshFace):
    """A MeshFace tagged as part of a joint; id is unique within the joint"""
    face_id: int = -1


@dataclass(frozen=True, eq=False)
class Joint:
    id: int
    faces: Tuple[JointFace, ...]

    def face(self, face_id: int) -> JointFace:
        for face in self.faces:
            if face.id == face_id:
                return face
        raise KeyError(f"joint {self.id} has no face {face_id}")


@dataclass(frozen=True, eq=False)
class Beam:
    id: int
    vertices: NDArray[np.float64]
    triangles: NDArray[np.int64]
    faces: Tuple[MeshFace, ...]
    joints: Tuple[Joint, ...] = ()
    is_open: bool = False

    def joint(self, joint_id: int) -> Joint:
        for joint in self.joints:
            if joint.id == joint_id:
                return joint
        raise KeyError(f"beam {self.id} has no joint {joint_id}")

    @property
    def joint_faces(self) -> List[JointFace]:
        return [face for joint in self.joints for face in joint.faces]

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def cross_section_diagonal(self) -> float:
        """Widest extent of the vertices projected across the principal (length) axis"""
        centred = self.vertices - self.vertices.mean(axis=0)
        _, _, vt = np.linalg.svd(centred, full_matrices=False)
        section = centred @ vt[1:].T
        hull = ConvexHull(section)
        return float(pdist(section[hull.vertices]).max())


@dataclass(frozen=True, eq=False)
class Assembly:
    name: str
    beams: Tuple[Beam, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ids = [beam.id for beam in self.beams]
        if len(set(ids)) != len(ids):
            raise SemanticError(f"duplicate beam ids in assembly '{self.name}'")

    def beam(self, beam_id: int) -> Beam:
        for beam in self.beams:
            if beam.id == beam_id:
                return beam
        raise KeyError(f"assembly has no beam {beam_id}")


# ---------------------------------------------------------------------------
# Mesh helpers
# ---------------------------------------------------------------------------

def triangle_areas(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 3, 3)
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def triangle_normals(corners: np.ndarray) -> np.ndarray:
    """Unit geometric normals from the winding; zero for degenerate triangles"""
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 3, 3)
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    norms = np.linalg.norm(cross, axis=1)
    out = np.zeros_like(cross)
    nonzero = norms > 0
    out[nonzero] = cross[nonzero] / norms[nonzero, None]
    return out


def _edge_adjacency(triangles: np.ndarray) -> np.ndarray:
    """Pairs of triangle positions sharing an undirected edge"""
    if len(triangles) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edges = np.sort(triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    owners = np.repeat(np.arange(len(triangles)), 3)
    _, edge_ids = np.unique(edges, axis=0, return_inverse=True)
    edge_ids = edge_ids.reshape(-1)
    order = np.argsort(edge_ids, kind="stable")
    same = edge_ids[order][1:] == edge_ids[order][:-1]
    return np.column_stack([owners[order][:-1][same], owners[order][1:][same]])


def _components(n: int, pairs: np.ndarray) -> np.ndarray:
    graph = sparse.coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else \
        sparse.coo_matrix((n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def _check_closed(beam_id: int, triangles: np.ndarray) -> None:
    directed = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    unique_directed = np.unique(directed, axis=0)
    if len(unique_directed) != len(directed):
        raise SemanticError(f"beam {beam_id}: mesh is not consistently oriented")
    reverse = directed[:, ::-1]
    lookup = {tuple(e) for e in unique_directed.tolist()}
    missing = sum(1 for e in reverse.tolist() if tuple(e) not in lookup)
    if missing:
        raise SemanticError(
            f"beam {beam_id}: mesh is not closed ({missing} boundary edges); "
            f"declare the beam open if this is intended")


def _planar_patches(vertices: np.ndarray, triangles: np.ndarray) -> List[np.ndarray]:
    """Split triangles into edge-connected coplanar patches (positions into `triangles`)"""
    if len(triangles) == 0:
        return []
    corners = vertices[triangles]
    normals = triangle_normals(corners)
    pairs = _edge_adjacency(triangles)
    a, b = pairs[:, 0], pairs[:, 1]
    parallel = np.einsum("ij,ij->i", normals[a], normals[b]) >= _COPLANAR_COS
    offsets = np.einsum("ij,ij->i", normals, corners[:, 0])
    coplanar = np.abs(np.einsum("ikj,ij->ik", corners[b], normals[a]) - offsets[a, None])
    keep = parallel & (coplanar.max(axis=1) <= _COPLANAR_DISTANCE)
    labels = _components(len(triangles), pairs[keep])
    patches = [np.flatnonzero(labels == label) for label in np.unique(labels)]
    return sorted(patches, key=lambda p: int(p[0]))


def _fit_face_plane(vertices: np.ndarray, triangles: np.ndarray) -> Plane:
    corners = vertices[triangles]
    weighted = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]).sum(axis=0)
    return Plane.fit(vertices[np.unique(triangles)], reference_normal=weighted)


def _canonical(triangle: Sequence[int]) -> Tuple[int, int, int]:
    """Cyclic rotation starting at the smallest index (winding preserved)"""
    t = [int(v) for v in triangle]
    i = t.index(min(t))
    return tuple(t[i:] + t[:i])


def build_beam(
    beam_id: int,
    vertices: np.ndarray,
    triangles: np.ndarray,
    tags: Dict[Tuple[int, int], np.ndarray],
    is_open: bool = False,
) -> Beam:
    """Assemble a validated Beam.

    `tags` maps (joint id, joint face id) to positions into `triangles`.
    """
    vertices = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    vertices.setflags(write=False)
    triangles.setflags(write=False)

    if len(triangles) == 0:
        raise SemanticError(f"beam {beam_id} has no triangles")
    if triangles.min() < 0 or triangles.max() >= len(vertices):
        raise SemanticError(f"beam {beam_id}: triangle references a missing vertex")
    areas = triangle_areas(vertices[triangles])
    if np.any(areas <= 0):
        raise SemanticError(
            f"beam {beam_id}: {int((areas <= 0).sum())} triangles have zero area")
    if not is_open:
        _check_closed(beam_id, triangles)

    tagged = np.zeros(len(triangles), dtype=bool)
    for key, positions in tags.items():
        if np.any(tagged[positions]):
            raise SemanticError(f"beam {beam_id}: a triangle belongs to two joint faces")
        tagged[positions] = True

    groups: List[Tuple[np.ndarray, Optional[Tuple[int, int]]]] = []
    base_positions = np.flatnonzero(~tagged)
    for patch in _planar_patches(vertices, triangles[base_positions]):
        groups.append((base_positions[patch], None))
    for key, positions in tags.items():
        groups.append((np.sort(np.asarray(positions, dtype=np.int64)), key))
    groups.sort(key=lambda g: int(g[0][0]))

    faces: List[MeshFace] = []
    joint_faces: Dict[int, List[JointFace]] = defaultdict(list)
    for face_id, (positions, key) in enumerate(groups):
        tri = triangles[positions]
        plane = _fit_face_plane(vertices, tri)
        if key is None:
            faces.append(MeshFace(face_id, vertices, tri, plane))
            continue
        joint_id, joint_face_id = key
        faces.append(MeshFace(face_id, vertices, tri, plane, joint_id=joint_id))
        joint_faces[joint_id].append(
            JointFace(joint_face_id, vertices, tri, plane, joint_id=joint_id, face_id=face_id))

    joints = []
    for joint_id in sorted(joint_faces):
        members = tuple(sorted(joint_faces[joint_id], key=lambda f: f.id))
        _check_joint_connected(beam_id, joint_id, members)
        joints.append(Joint(joint_id, members))

    return Beam(beam_id, vertices, triangles, tuple(faces), tuple(joints), is_open)


def _check_joint_connected(beam_id: int, joint_id: int, faces: Sequence[JointFace]) -> None:
    triangles = np.vstack([f.triangles for f in faces])
    labels = _components(len(triangles), _edge_adjacency(triangles))
    if len(np.unique(labels)) > 1:
        raise SemanticError(
            f"beam {beam_id}, joint {joint_id}: faces are not edge-connected")


# ---------------------------------------------------------------------------
# Loading and saving
# ---------------------------------------------------------------------------

def load_assembly(path: PathLike) -> Assembly:
    """Load an OBJ with beam/joint group naming, or the JSON sidecar format"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e

    if path.suffix.lower() == ".json":
        try:
            document = AssemblyDocument.model_validate_json(text)
        except ValidationError as e:
            raise ParseError(f"invalid assembly document: {e.errors()[0]['msg']}") from e
        assembly = assembly_from_document(document)
    elif path.suffix.lower() == ".obj":
        assembly = _parse_obj(text, default_name=path.stem)
    else:
        raise InvalidParameter(f"unsupported CAD format '{path.suffix}'")

    logger.info(
        f"Loaded assembly '{assembly.name}': {len(assembly.beams)} beams, "
        f"{sum(len(b.joints) for b in assembly.beams)} joints")
    return assembly


def _parse_obj(text: str, default_name: str) -> Assembly:
    vertices: List[List[float]] = []
    group: Optional[str] = None
    group_line = 0
    name = default_name
    grouped: Dict[str, List[List[int]]] = defaultdict(list)
    group_lines: Dict[str, int] = {}

    for number, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        keyword = tokens[0]
        if keyword == "v":
            if len(tokens) not in (4, 5):
                raise ParseError("vertex needs 3 coordinates", line=number)
            try:
                vertices.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise ParseError("non-numeric vertex coordinate", line=number)
        elif keyword == "g":
            if len(tokens) != 2:
                raise ParseError("group line must carry exactly one name", line=number)
            group, group_line = tokens[1], number
            group_lines.setdefault(group, number)
        elif keyword == "o":
            if len(tokens) > 1:
                name = tokens[1]
        elif keyword == "f":
            if len(tokens) != 4:
                raise ParseError(
                    f"face with {len(tokens) - 1} vertices; only triangles are supported, "
                    f"triangulate the mesh before export", line=number)
            if group is None:
                raise ParseError("face outside of any group", line=number)
            face = []
            for token in tokens[1:]:
                try:
                    index = int(token.split("/")[0])
                except ValueError:
                    raise ParseError(f"malformed face index '{token}'", line=number)
                index = index - 1 if index > 0 else len(vertices) + index
                if index < 0 or index >= len(vertices) or token.startswith("0"):
                    raise ParseError(f"face index '{token}' out of range", line=number)
                face.append(index)
            grouped[group].append(face)
        elif keyword in ("vn", "vt", "vp", "s", "usemtl", "mtllib", "l"):
            continue
        else:
            raise ParseError(f"unsupported OBJ keyword '{keyword}'", line=number)

    pool = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    bases: Dict[int, Tuple[List[List[int]], bool]] = {}
    tagged: Dict[int, Dict[Tuple[int, int], List[List[int]]]] = defaultdict(dict)
    for group_name, faces in grouped.items():
        base = BEAM_GROUP.match(group_name)
        joint = JOINT_FACE_GROUP.match(group_name)
        if base:
            beam_id = int(base.group(1))
            if beam_id in bases:
                raise SemanticError(
                    f"beam {beam_id} declared twice (group '{group_name}', "
                    f"line {group_lines[group_name]})")
            bases[beam_id] = (faces, bool(base.group(2)))
        elif joint:
            beam_id, joint_id, face_id = (int(g) for g in joint.groups())
            tagged[beam_id][(joint_id, face_id)] = faces
        else:
            raise SemanticError(
                f"group '{group_name}' (line {group_lines[group_name]}) does not follow "
                f"the beam<i> / beam<i>_joint<j>_face<k> convention")

    orphans = sorted(set(tagged) - set(bases))
    if orphans:
        raise SemanticError(f"joint faces reference missing beam(s) {orphans}")

    beams = []
    for beam_id in sorted(bases):
        base_faces, is_open = bases[beam_id]
        blocks = [np.asarray(base_faces, dtype=np.int64).reshape(-1, 3)]
        keys = sorted(tagged[beam_id])
        for key in keys:
            blocks.append(np.asarray(tagged[beam_id][key], dtype=np.int64).reshape(-1, 3))
        global_triangles = np.vstack(blocks)
        local_vertices, local_triangles = _weld(pool, global_triangles)

        tags = {}
        start = len(blocks[0])
        for key, block in zip(keys, blocks[1:]):
            tags[key] = np.arange(start, start + len(block))
            start += len(block)
        beams.append(build_beam(beam_id, local_vertices, local_triangles, tags, is_open))
    return Assembly(name, tuple(beams))


def _weld(pool: np.ndarray, triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Beam-local vertex pool with coincident vertices merged (first occurrence order)"""
    used, inverse = np.unique(triangles, return_inverse=True)
    coords = pool[used]
    keys = np.round(coords / _WELD_RESOLUTION).astype(np.int64)
    _, first, weld_inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    weld_inverse = weld_inverse.reshape(-1)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    local = rank[weld_inverse][inverse.reshape(-1)].reshape(-1, 3)
    return coords[np.sort(first)], local


def assembly_from_document(document: AssemblyDocument) -> Assembly:
    beams = []
    seen = set()
    for beam_doc in document.beams:
        if beam_doc.id in seen:
            raise SemanticError(f"duplicate beam id {beam_doc.id}")
        seen.add(beam_doc.id)
        triangles = np.asarray(beam_doc.triangles, dtype=np.int64).reshape(-1, 3)
        lookup: Dict[Tuple[int, int, int], int] = {}
        for position, triangle in enumerate(triangles.tolist()):
            lookup.setdefault(_canonical(triangle), position)

        tags: Dict[Tuple[int, int], np.ndarray] = {}
        joint_ids = set()
        for joint_doc in beam_doc.joints:
            if joint_doc.id in joint_ids:
                raise SemanticError(f"beam {beam_doc.id}: duplicate joint id {joint_doc.id}")
            joint_ids.add(joint_doc.id)
            if not joint_doc.faces:
                raise SemanticError(f"beam {beam_doc.id}, joint {joint_doc.id} has no faces")
            face_ids = set()
            for face_doc in joint_doc.faces:
                if face_doc.id in face_ids:
                    raise SemanticError(
                        f"beam {beam_doc.id}, joint {joint_doc.id}: duplicate face id {face_doc.id}")
                face_ids.add(face_doc.id)
                positions = []
                for triangle in face_doc.triangles:
                    position = lookup.get(_canonical(triangle))
                    if position is None:
                        raise SemanticError(
                            f"beam {beam_doc.id}, joint {joint_doc.id}, face {face_doc.id}: "
                            f"triangle {list(triangle)} is not part of the beam")
                    positions.append(position)
                tags[(joint_doc.id, face_doc.id)] = np.asarray(positions, dtype=np.int64)

        beams.append(build_beam(beam_doc.id, beam_doc.vertices, triangles, tags, beam_doc.open))
    return Assembly(document.name, tuple(beams))


def assembly_to_document(assembly: Assembly) -> AssemblyDocument:
    beams = []
    for beam in assembly.beams:
        joints = [
            JointDocument(
                id=joint.id,
                faces=[JointFaceDocument(id=face.id, triangles=face.triangles.tolist())
                       for face in joint.faces])
            for joint in beam.joints
        ]
        beams.append(BeamDocument(
            id=beam.id,
            vertices=beam.vertices.tolist(),
            triangles=beam.triangles.tolist(),
            joints=joints,
            open=beam.is_open,
        ))
    return AssemblyDocument(name=assembly.name, beams=beams)


def save_assembly(assembly: Assembly, path: PathLike) -> None:
    """Write the canonical JSON sidecar"""
    path = Path(path)
    try:
        path.write_text(assembly_to_document(assembly).model_dump_json(indent=1), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def save_assembly_obj(assembly: Assembly, path: PathLike) -> None:
    """Write an OBJ following the beam<i> / beam<i>_joint<j>_face<k> group convention"""
    lines = [f"o {assembly.name}"]
    offset = 1
    for beam in assembly.beams:
        lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in beam.vertices.tolist())
        tagged = np.zeros(len(beam.triangles), dtype=bool)
        joint_blocks = []
        for joint in beam.joints:
            for face in joint.faces:
                joint_blocks.append((f"beam{beam.id}_joint{joint.id}_face{face.id}", face.triangles))
        joint_set = {_canonical(t) for _, block in joint_blocks for t in block.tolist()}
        for i, triangle in enumerate(beam.triangles.tolist()):
            tagged[i] = _canonical(triangle) in joint_set
        lines.append(f"g beam{beam.id}{'_open' if beam.is_open else ''}")
        lines.extend("f " + " ".join(str(v + offset) for v in t)
                     for t in beam.triangles[~tagged].tolist())
        for group_name, block in joint_blocks:
            lines.append(f"g {group_name}")
            lines.extend("f " + " ".join(str(v + offset) for v in t) for t in block.tolist())
        offset += len(beam.vertices)
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# Joint detection
# ---------------------------------------------------------------------------

def _dominant_axes(faces: Sequence[MeshFace], cos_threshold: float) -> Optional[np.ndarray]:
    normals = np.array([f.plane.normal for f in faces])
    areas = np.array([f.area for f in faces])
    alignment = np.abs(normals @ normals.T)
    support = (alignment >= cos_threshold) @ areas
    first = int(np.argmax(support))
    a1 = normals[first]

    sin_threshold = np.sqrt(max(0.0, 1.0 - cos_threshold ** 2))
    perpendicular = np.abs(normals @ a1) <= sin_threshold
    if not perpendicular.any():
        return None
    candidates = np.flatnonzero(perpendicular)
    second = int(candidates[np.argmax(support[candidates])])
    a2 = normals[second] - np.dot(normals[second], a1) * a1
    a2 /= np.linalg.norm(a2)
    return np.vstack([a1, a2, np.cross(a1, a2)])


def detect_joints(beam: Beam, dihedral_threshold: float = 5.0,
                  distance_tolerance: float = 1e-3) -> Beam:
    """Classify faces off the six dominant bounding-box side planes as joint faces.

    Edge-connected joint faces form one joint; joints and their faces are
    numbered by smallest vertex index.
    """
    if beam.joints:
        raise NotApplicable(f"beam {beam.id} already carries explicit joints")
    if not 0 < dihedral_threshold < 90:
        raise InvalidParameter("dihedral_threshold must lie in (0, 90) degrees")

    cos_threshold = np.cos(np.radians(dihedral_threshold))
    axes = _dominant_axes(beam.faces, cos_threshold)
    if axes is None:
        logger.warning(f"Beam {beam.id}: no box-like frame found, no joints detected")
        return beam

    projected = beam.vertices @ axes.T
    low, high = projected.min(axis=0), projected.max(axis=0)

    def on_side(face: MeshFace) -> bool:
        along = face.vertices[face.vertex_ids] @ axes.T
        for axis in range(3):
            if abs(np.dot(face.plane.normal, axes[axis])) < cos_threshold:
                continue
            if np.max(np.abs(along[:, axis] - low[axis])) <= distance_tolerance:
                return True
            if np.max(np.abs(along[:, axis] - high[axis])) <= distance_tolerance:
                return True
        return False

    candidates = [face for face in beam.faces if not on_side(face)]
    if not candidates:
        return beam

    triangles = np.vstack([f.triangles for f in candidates])
    owner = np.repeat(np.arange(len(candidates)), [len(f.triangles) for f in candidates])
    pairs = _edge_adjacency(triangles)
    face_pairs = owner[pairs] if len(pairs) else pairs
    labels = _components(len(candidates), face_pairs)

    def first_vertex(group: Iterable[MeshFace]) -> int:
        return int(min(f.triangles.min() for f in group))

    components = [[candidates[i] for i in np.flatnonzero(labels == label)]
                  for label in np.unique(labels)]
    components.sort(key=first_vertex)

    faces = list(beam.faces)
    joints = []
    for joint_id, members in enumerate(components):
        members.sort(key=lambda f: first_vertex([f]))
        joint_faces = []
        for face_index, face in enumerate(members):
            faces[face.id] = replace(face, joint_id=joint_id)
            joint_faces.append(JointFace(
                face_index, face.vertices, face.triangles, face.plane,
                joint_id=joint_id, face_id=face.id))
        joints.append(Joint(joint_id, tuple(joint_faces)))

    logger.info(f"Beam {beam.id}: detected {len(joints)} joints from geometry")
    return replace(beam, faces=tuple(faces), joints=tuple(joints))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_mesh(faces: Sequence[MeshFace], density: float,
                seed: Union[int, Sequence[int], np.random.Generator] = 0,
                return_triangle_ids: bool = False):
    """Area-weighted uniform samples carrying their triangle's geometric normal.

    The expected count is density x total area; results depend only on
    (faces, density, seed).
    """
    if not density > 0:
        raise InvalidParameter(f"density must be > 0, got {density}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    corners = np.vstack([f.corners for f in faces]) if faces else np.zeros((0, 3, 3))
    areas = triangle_areas(corners)
    total = float(areas.sum())
    if total <= 0:
        cloud = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
        return (cloud, np.zeros(0, dtype=np.int64)) if return_triangle_ids else cloud

    expected = density * total
    count = int(np.floor(expected))
    count += int(rng.random() < expected - count)
    per_triangle = rng.multinomial(count, areas / total)
    triangle_ids = np.repeat(np.arange(len(corners)), per_triangle)

    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a, b, c = (corners[triangle_ids, i] for i in range(3))
    points = ((1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b
              + (r1 * r2)[:, None] * c)
    normals = triangle_normals(corners)[triangle_ids]

    cloud = PointCloud(points, normals)
    return (cloud, triangle_ids) if return_triangle_ids else cloud


def sample_faces(beam: Beam, faces: Sequence[MeshFace], density: float,
                 seed: int) -> Dict[int, PointCloud]:
    """One target cloud per face, each from its own (seed, beam, face) stream"""
    return {
        face.id: sample_mesh(
            [face], density, derive_rng(seed, Stream.MESH_SAMPLING, beam.id, face.id))
        for face in faces
    }
