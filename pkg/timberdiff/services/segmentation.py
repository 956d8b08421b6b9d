"""Normal-coherent segmentation of the registered scan and mapping back to CAD entities."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from numpy.typing import NDArray

from timberdiff.schemas import SegmentRecord
from timberdiff.services.cad_model import Assembly, MeshFace
from timberdiff.services.cloud import PointCloud, SpatialIndex
from timberdiff.utils.error_handling import InvalidParameter, MissingNormals

# barycentric slack when testing projected points against face triangles
_CONTAINMENT_TOLERANCE = 1e-9
_CHUNK = 200_000
# floor on the edge-point variation cut, for noise-free surfaces
_MIN_VARIATION = 1e-3
# absorbed points lie within this many plane-fit RMS residuals (plus slack) of their plane
_ABSORB_RMS = 4.0
_ABSORB_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class Segment:
    point_indices: NDArray[np.int64]
    mean_normal: NDArray[np.float64]
    centroid: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.point_indices)


@dataclass(frozen=True, order=True)
class FaceRef:
    """A CAD face: beam-level face id, plus joint and joint-face ids for joint faces"""
    beam_id: int
    face_id: int
    joint_id: Optional[int] = None
    joint_face_id: Optional[int] = None

    @property
    def label(self) -> str:
        if self.joint_id is None:
            return f"beam{self.beam_id}/face{self.face_id}"
        return f"beam{self.beam_id}/joint{self.joint_id}/face{self.joint_face_id}"


@dataclass(frozen=True, eq=False)
class FaceAssociation:
    target_face: FaceRef
    segment_index: int
    segment: Segment
    score: float


@dataclass(frozen=True, eq=False)
class BeamClusters:
    clouds: Dict[int, PointCloud]
    indices: Dict[int, NDArray[np.int64]]
    unassociated_beams: List[int] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class JointClouds:
    joint_cloud: PointCloud
    per_face_clouds: Dict[int, PointCloud]
    indices: NDArray[np.int64]
    per_face_indices: Dict[int, NDArray[np.int64]]


def segment_by_normals(cloud: PointCloud, angle_threshold: float = 15.0,
                       k_neighbors: int = 20, min_segment_size: int = 50,
                       curvature_factor: float = 4.0) -> List[Segment]:
    """Region growing over the k-NN graph.

    Points whose surface variation exceeds `curvature_factor` times the median
    sit on edges and cannot seed or join the first growing pass. Seeds are taken
    in input order; a neighbour joins when its normal is within `angle_threshold`
    of the seed normal (sign-insensitive). Unlabelled points next to a segment
    then join the segment with the closest fitted plane, if within four RMS
    residuals of it. A second pass grows what is left, for faces too narrow to
    hold a flat seed, and absorbs again. Points with a zero normal and regions
    below `min_segment_size` end up in the residue.
    """
    if not cloud.has_normals:
        raise MissingNormals("segmentation needs normals; estimate them first")
    if not 0 < angle_threshold < 90:
        raise InvalidParameter("angle_threshold must lie in (0, 90) degrees")
    if min_segment_size < 1:
        raise InvalidParameter("min_segment_size must be >= 1")
    if not curvature_factor > 0:
        raise InvalidParameter("curvature_factor must be > 0")
    n = len(cloud)
    if n == 0:
        return []

    k = min(k_neighbors, n)
    _, neighbours = SpatialIndex(cloud).knn(cloud.points, k)
    cos_threshold = np.cos(np.radians(angle_threshold))
    degenerate = cloud.degenerate_mask

    variation = _surface_variation(cloud.points, neighbours)
    flat = variation[~degenerate]
    limit = max(curvature_factor * float(np.median(flat)), _MIN_VARIATION) if len(flat) else 0.0
    edge = ~degenerate & (variation > limit)

    labels = np.full(n, -1, dtype=np.int64)
    seeds: List[int] = []
    planes: List[Tuple[np.ndarray, np.ndarray, float]] = []
    for blocked in (degenerate | edge, degenerate):
        for seed, region in _grow(cloud.normals, neighbours, blocked | (labels >= 0),
                                  cos_threshold, min_segment_size):
            labels[region] = len(seeds)
            seeds.append(seed)
            planes.append(_fit_plane(cloud.points[region]))
        _absorb(cloud.points, neighbours, labels, planes, degenerate)

    segments = [_make_segment(cloud, np.flatnonzero(labels == label), cloud.normals[seed])
                for label, seed in enumerate(seeds)]
    segments.sort(key=lambda s: (-len(s), int(s.point_indices[0])))
    residue = int((labels < 0).sum())
    logger.info(f"Segmentation: {len(segments)} segments, {residue} residue points, "
                f"{int(edge.sum())} edge points")
    return segments


def _surface_variation(points: np.ndarray, neighbours: np.ndarray) -> np.ndarray:
    """Smallest over summed eigenvalues of each k-NN covariance (0 flat, 1/3 isotropic)"""
    variation = np.empty(len(points))
    for start in range(0, len(points), _CHUNK):
        block = points[neighbours[start:start + _CHUNK]]
        centred = block - block.mean(axis=1, keepdims=True)
        eigenvalues = np.linalg.eigvalsh(np.einsum("nki,nkj->nij", centred, centred))
        total = eigenvalues.sum(axis=1)
        variation[start:start + len(block)] = np.divide(
            eigenvalues[:, 0], total, out=np.zeros_like(total), where=total > 0)
    return np.clip(variation, 0.0, None)


def _grow(normals: np.ndarray, neighbours: np.ndarray, blocked: np.ndarray,
          cos_threshold: float, min_size: int) -> Iterator[Tuple[int, np.ndarray]]:
    visited = blocked.copy()
    for seed in range(len(normals)):
        if visited[seed]:
            continue
        seed_normal = normals[seed]
        visited[seed] = True
        members = [np.array([seed])]
        frontier = members[0]
        while len(frontier):
            candidates = np.unique(neighbours[frontier].ravel())
            candidates = candidates[~visited[candidates]]
            accepted = candidates[np.abs(normals[candidates] @ seed_normal) > cos_threshold]
            visited[accepted] = True
            members.append(accepted)
            frontier = accepted

        region = np.sort(np.concatenate(members))
        if len(region) >= min_size:
            yield seed, region


def _fit_plane(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """(centroid, unit normal, absorption tolerance) of the least-squares plane"""
    centroid = points.mean(axis=0)
    centred = points - centroid
    _, eigenvectors = np.linalg.eigh(centred.T @ centred)
    normal = eigenvectors[:, 0]
    rms = float(np.sqrt(np.mean((centred @ normal) ** 2)))
    return centroid, normal, _ABSORB_RMS * rms + _ABSORB_SLACK


def _absorb(points: np.ndarray, neighbours: np.ndarray, labels: np.ndarray,
            planes: Sequence[Tuple[np.ndarray, np.ndarray, float]], degenerate: np.ndarray) -> None:
    """Grow labels into unlabelled neighbours by plane distance, in place, until nothing moves"""
    if not planes:
        return
    centroids = np.array([p[0] for p in planes])
    plane_normals = np.array([p[1] for p in planes])
    tolerances = np.array([p[2] for p in planes])
    while True:
        pending = np.flatnonzero((labels < 0) & ~degenerate)
        if len(pending) == 0:
            return
        candidate = labels[neighbours[pending]]
        safe = np.maximum(candidate, 0)
        offset = points[pending][:, None, :] - centroids[safe]
        distance = np.abs(np.einsum("pki,pki->pk", offset, plane_normals[safe]))
        distance[(candidate < 0) | (distance > tolerances[safe])] = np.inf
        best = np.argmin(distance, axis=1)
        rows = np.arange(len(pending))
        hit = np.isfinite(distance[rows, best])
        if not hit.any():
            return
        labels[pending[hit]] = candidate[rows[hit], best[hit]]


def _make_segment(cloud: PointCloud, region: np.ndarray, reference: np.ndarray) -> Segment:
    normals = cloud.normals[region]
    aligned = normals * np.where(normals @ reference < 0, -1.0, 1.0)[:, None]
    mean_normal = aligned.sum(axis=0)
    mean_normal /= np.linalg.norm(mean_normal)
    return Segment(region, mean_normal, cloud.points[region].mean(axis=0))


def residue_indices(segments: Sequence[Segment], n: int) -> np.ndarray:
    if not segments:
        return np.arange(n)
    used = np.concatenate([s.point_indices for s in segments])
    return np.setdiff1d(np.arange(n), used)


def segments_to_records(segments: Sequence[Segment]) -> List[SegmentRecord]:
    return [
        SegmentRecord(index=i, size=len(s), centroid=s.centroid.tolist(),
                      mean_normal=s.mean_normal.tolist(), point_indices=s.point_indices.tolist())
        for i, s in enumerate(segments)
    ]


def face_frame(face_cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    """Centroid and unit normal of a sampled face cloud"""
    normals = face_cloud.normals
    reference = normals[0]
    aligned = normals * np.where(normals @ reference < 0, -1.0, 1.0)[:, None]
    normal = aligned.sum(axis=0)
    return face_cloud.points.mean(axis=0), normal / np.linalg.norm(normal)


def associate_segments(segments: Sequence[Segment],
                       target_faces: Sequence[Tuple[FaceRef, PointCloud]],
                       max_centroid_distance: float, max_normal_angle: float = 15.0,
                       lam: float = 1.0) -> List[FaceAssociation]:
    """Pick, for every target face, the closest and most similarly oriented segment.

    score = centroid distance + lam * (1 - |cos angle|) * max_centroid_distance;
    faces without a candidate inside both gates get no association.
    """
    if not max_centroid_distance > 0:
        raise InvalidParameter("max_centroid_distance must be > 0")
    if not segments or not target_faces:
        return []

    centroids = np.array([s.centroid for s in segments])
    normals = np.array([s.mean_normal for s in segments])
    cos_gate = np.cos(np.radians(max_normal_angle))

    associations = []
    missing = []
    for ref, face_cloud in target_faces:
        if face_cloud.is_empty or not face_cloud.has_normals:
            missing.append(ref)
            continue
        centre, normal = face_frame(face_cloud)
        distance = np.linalg.norm(centroids - centre, axis=1)
        alignment = np.abs(normals @ normal)
        score = distance + lam * (1.0 - alignment) * max_centroid_distance
        eligible = (alignment >= cos_gate) & (distance <= max_centroid_distance)
        if not eligible.any():
            missing.append(ref)
            continue
        # argmin returns the first minimum, i.e. the lower segment index on ties
        score = np.where(eligible, score, np.inf)
        best = int(np.argmin(score))
        associations.append(FaceAssociation(ref, best, segments[best], float(score[best])))

    if missing:
        logger.warning(f"{len(missing)} target faces have no associated segment: "
                       f"{', '.join(r.label for r in missing[:10])}")
    return associations


def multiply_used_segments(associations: Sequence[FaceAssociation]) -> Dict[int, List[FaceRef]]:
    usage: Dict[int, List[FaceRef]] = defaultdict(list)
    for association in associations:
        usage[association.segment_index].append(association.target_face)
    return {index: refs for index, refs in sorted(usage.items()) if len(refs) > 1}


def cluster_beams(associations: Sequence[FaceAssociation], assembly: Assembly,
                  scan: PointCloud) -> BeamClusters:
    """Union of associated segment points per beam.

    A segment claimed by several beams goes to the beam holding its lowest
    association score, so beam clouds stay disjoint.
    """
    beam_ids = {beam.id for beam in assembly.beams}
    owner: Dict[int, Tuple[float, int]] = {}
    segments: Dict[int, Segment] = {}
    for association in associations:
        beam_id = association.target_face.beam_id
        if beam_id not in beam_ids:
            raise InvalidParameter(f"association references unknown beam {beam_id}")
        key = (association.score, beam_id)
        index = association.segment_index
        segments[index] = association.segment
        if index not in owner or key < owner[index]:
            owner[index] = key

    members: Dict[int, List[np.ndarray]] = defaultdict(list)
    for index, (_, beam_id) in sorted(owner.items()):
        members[beam_id].append(segments[index].point_indices)

    clouds, indices, missing = {}, {}, []
    for beam in assembly.beams:
        if members.get(beam.id):
            idx = np.unique(np.concatenate(members[beam.id]))
        else:
            idx = np.zeros(0, dtype=np.int64)
            missing.append(beam.id)
        indices[beam.id] = idx
        clouds[beam.id] = scan.select(idx)

    if not associations:
        logger.warning("No associations: every beam cloud is empty")
    elif missing:
        logger.warning(f"Beams without any associated face: {missing}")
    return BeamClusters(clouds, indices, missing)


def _plane_basis(normal: np.ndarray) -> np.ndarray:
    helper = np.eye(3)[int(np.argmin(np.abs(normal)))]
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    return np.vstack([u, np.cross(normal, u)])


def face_containment(points: np.ndarray, face: MeshFace, projection_tolerance: float) -> np.ndarray:
    """Mask of points within the tolerance of the face plane whose projection falls inside a face triangle"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    near = np.abs(face.plane.signed_distance(points)) <= projection_tolerance
    inside = np.zeros(len(points), dtype=bool)
    candidates = np.flatnonzero(near)
    if len(candidates) == 0:
        return inside

    basis = _plane_basis(face.plane.normal)
    corners = face.corners @ basis.T
    a = corners[:, 0]
    e0 = corners[:, 1] - a
    e1 = corners[:, 2] - a
    d00 = np.einsum("ij,ij->i", e0, e0)
    d01 = np.einsum("ij,ij->i", e0, e1)
    d11 = np.einsum("ij,ij->i", e1, e1)
    denominator = d00 * d11 - d01 * d01
    usable = np.abs(denominator) > 0

    chunk = max(1, _CHUNK // max(len(a), 1))
    for start in range(0, len(candidates), chunk):
        rows = candidates[start:start + chunk]
        q = points[rows] @ basis.T
        rel = q[:, None, :] - a[None, :, :]
        d20 = np.einsum("pti,ti->pt", rel, e0)
        d21 = np.einsum("pti,ti->pt", rel, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (d11 * d20 - d01 * d21) / denominator
            w = (d00 * d21 - d01 * d20) / denominator
        u = 1.0 - v - w
        tol = -_CONTAINMENT_TOLERANCE
        hit = (u >= tol) & (v >= tol) & (w >= tol) & usable
        inside[rows] = hit.any(axis=1)
    return inside


def extract_joint_cloud(associations: Sequence[FaceAssociation], scan: PointCloud,
                        assembly: Assembly,
                        projection_tolerance: float) -> Dict[Tuple[int, int], JointClouds]:
    """Per joint, the associated segment points that project onto their joint face.

    Every joint named by at least one association gets an entry, possibly empty.
    """
    if not projection_tolerance > 0:
        raise InvalidParameter("projection_tolerance must be > 0")

    per_face: Dict[Tuple[int, int], Dict[int, List[np.ndarray]]] = defaultdict(lambda: defaultdict(list))
    for association in associations:
        ref = association.target_face
        if ref.joint_id is None:
            continue
        face = assembly.beam(ref.beam_id).joint(ref.joint_id).face(ref.joint_face_id)
        idx = association.segment.point_indices
        keep = face_containment(scan.points[idx], face, projection_tolerance)
        per_face[(ref.beam_id, ref.joint_id)][ref.joint_face_id].append(idx[keep])

    result = {}
    for key in sorted(per_face):
        face_indices = {face_id: np.unique(np.concatenate(parts))
                        for face_id, parts in sorted(per_face[key].items())}
        joint_indices = np.unique(np.concatenate(list(face_indices.values())))
        result[key] = JointClouds(
            joint_cloud=scan.select(joint_indices),
            per_face_clouds={f: scan.select(i) for f, i in face_indices.items()},
            indices=joint_indices,
            per_face_indices=face_indices,
        )
        if len(joint_indices) == 0:
            logger.warning(f"Beam {key[0]} joint {key[1]}: no scan point projects onto its faces")
    return result
