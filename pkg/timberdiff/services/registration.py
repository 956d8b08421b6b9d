"""Rigid registration: transforms, closed-form fit, FPFH features, RANSAC and ICP."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from pydantic import ValidationError
from scipy import sparse
from scipy.spatial.transform import Rotation

from timberdiff.schemas import ICPMethod, IcpParams, RansacParams, TransformDocument
from timberdiff.services.cloud import PointCloud, SpatialIndex
from timberdiff.utils.error_handling import (
    DegenerateConfiguration,
    EmptyInput,
    InsufficientPoints,
    InvalidParameter,
    IoError,
    LengthMismatch,
    MissingNormals,
    NoConsensus,
    NoCorrespondences,
    ParseError,
)

PathLike = Union[str, Path]
SeedLike = Union[int, Sequence[int], np.random.Generator]

FPFH_BINS = 11
# correspondences scored per RANSAC hypothesis before full-cloud verification
_SCORE_SUBSET = 2000
_BATCH = 512
_VERIFIED_CANDIDATES = 16
# hypotheses closer than this in rotation and in translation (x threshold) count as one pose
_DISTINCT_ANGLE_DEG = 5.0
_DISTINCT_OFFSET = 10.0
_MIN_MUTUAL_PAIRS = 30
# distance-matrix elements per brute-force feature block
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> rotation @ x + translation"""
    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise InvalidParameter("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9, rtol=0.0) or \
                abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise InvalidParameter("rotation is not a proper orthonormal matrix")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise InvalidParameter(f"expected a 4x4 matrix, got {matrix.shape}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other"""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def rotation_error_deg(self, other: "RigidTransform") -> float:
        relative = self.rotation @ other.rotation.T
        return float(np.degrees(Rotation.from_matrix(relative).magnitude()))

    def translation_error(self, other: "RigidTransform") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def to_document(self) -> TransformDocument:
        return TransformDocument(rotation=self.rotation.tolist(),
                                 translation=self.translation.tolist())


def load_transform(path: PathLike) -> RigidTransform:
    """Read {rotation, translation}; near-orthonormal rotations are projected back"""
    path = Path(path)
    try:
        document = TransformDocument.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except ValidationError as e:
        raise ParseError(f"invalid transform file {path}: {e.errors()[0]['msg']}") from e

    raw = np.asarray(document.rotation, dtype=np.float64)
    u, _, vt = np.linalg.svd(raw)
    d = np.sign(np.linalg.det(u @ vt))
    rotation = u @ np.diag([1.0, 1.0, d]) @ vt
    if np.max(np.abs(rotation - raw)) > 1e-3:
        raise ParseError(f"rotation in {path} is not orthonormal")
    return RigidTransform(rotation, document.translation)


def save_transform(transform: RigidTransform, path: PathLike) -> None:
    path = Path(path)
    try:
        path.write_text(transform.to_document().model_dump_json(indent=2), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iterations: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0 or self.inlier_rmse < 0:
            raise InvalidParameter("fitness must lie in [0, 1] and rmse be >= 0")


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """33-bin FPFH histograms parallel to a cloud; `valid` is False where a point had no neighbours"""
    histograms: NDArray[np.float64]
    valid: NDArray[np.bool_]

    def __len__(self) -> int:
        return len(self.histograms)


# ---------------------------------------------------------------------------
# Closed-form rigid fit
# ---------------------------------------------------------------------------

def fit_rigid_correspondences(source_points: np.ndarray,
                              target_points: np.ndarray) -> RigidTransform:
    """Least-squares R, t minimising sum ||R s_i + t - t_i||^2 (SVD with reflection correction)"""
    source = np.asarray(source_points, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if len(source) != len(target):
        raise LengthMismatch(f"{len(source)} source vs {len(target)} target points")
    if len(source) < 3:
        raise DegenerateConfiguration(f"need at least 3 pairs, got {len(source)}")

    source_centroid = source.mean(axis=0)
    target_centroid = target.mean(axis=0)
    covariance = (source - source_centroid).T @ (target - target_centroid)
    u, s, vt = np.linalg.svd(covariance)
    if s[0] <= 1e-300 or s[1] <= 1e-12 * s[0]:
        raise DegenerateConfiguration("points are coincident or collinear")

    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = target_centroid - rotation @ source_centroid
    return RigidTransform(rotation, translation)


def _fit_batch(source: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Kabsch over a stack of (B, m, 3) samples; returns rotations, translations, valid mask"""
    sc = source.mean(axis=1, keepdims=True)
    tc = target.mean(axis=1, keepdims=True)
    covariance = np.einsum("bmi,bmj->bij", source - sc, target - tc)
    u, s, vt = np.linalg.svd(covariance)
    valid = (s[:, 0] > 1e-300) & (s[:, 1] > 1e-12 * s[:, 0])
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    correction = np.zeros_like(covariance)
    correction[:, 0, 0] = 1.0
    correction[:, 1, 1] = 1.0
    correction[:, 2, 2] = d
    rotations = v @ correction @ ut
    translations = tc[:, 0] - np.einsum("bij,bj->bi", rotations, sc[:, 0])
    return rotations, translations, valid


# ---------------------------------------------------------------------------
# FPFH
# ---------------------------------------------------------------------------

def _pair_features(p1: np.ndarray, n1: np.ndarray, p2: np.ndarray, n2: np.ndarray):
    """Darboux-frame angle triple for directed pairs, source chosen by the smaller normal angle"""
    delta = p2 - p1
    length = np.linalg.norm(delta, axis=1)
    length[length == 0] = 1.0
    angle1 = np.einsum("ij,ij->i", n1, delta) / length
    angle2 = np.einsum("ij,ij->i", n2, delta) / length

    swap = np.abs(angle1) < np.abs(angle2)
    source_normal = np.where(swap[:, None], n2, n1)
    target_normal = np.where(swap[:, None], n1, n2)
    delta = np.where(swap[:, None], -delta, delta)
    theta = np.where(swap, -angle2, angle1)

    v = np.cross(delta, source_normal)
    v_norm = np.linalg.norm(v, axis=1)
    ok = v_norm > 0
    v[ok] /= v_norm[ok, None]
    w = np.cross(source_normal, v)
    phi = np.einsum("ij,ij->i", v, target_normal)
    alpha = np.arctan2(np.einsum("ij,ij->i", w, target_normal),
                       np.einsum("ij,ij->i", source_normal, target_normal))
    alpha[~ok] = phi[~ok] = theta[~ok] = 0.0
    return alpha, phi, theta


def _bin(values: np.ndarray, low: float, high: float) -> np.ndarray:
    idx = np.floor(FPFH_BINS * (values - low) / (high - low)).astype(np.int64)
    return np.clip(idx, 0, FPFH_BINS - 1)


def compute_fpfh(cloud: PointCloud, radius: float) -> FeatureSet:
    """Fast point feature histograms over radius neighbourhoods.

    Each point's simplified histogram (11 bins for each angle, every pair adding
    100 / neighbour count) is combined with its neighbours' histograms weighted
    by inverse distance; each 11-bin block of that sum is rescaled to 100.
    """
    if not cloud.has_normals:
        raise MissingNormals("FPFH needs normals; estimate them first")
    if not radius > 0:
        raise InvalidParameter(f"radius must be > 0, got {radius}")

    n = len(cloud)
    usable = ~cloud.degenerate_mask
    pairs = SpatialIndex(cloud).pairs(radius)
    if len(pairs):
        distance = np.linalg.norm(cloud.points[pairs[:, 0]] - cloud.points[pairs[:, 1]], axis=1)
        keep = usable[pairs[:, 0]] & usable[pairs[:, 1]] & (distance > 0)
        pairs, distance = pairs[keep], distance[keep]
    else:
        distance = np.zeros(0)

    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    weight = np.concatenate([distance, distance])
    counts = np.bincount(src, minlength=n)

    points, normals = cloud.points, cloud.normals
    alpha, phi, theta = _pair_features(points[src], normals[src], points[dst], normals[dst])
    increment = 100.0 / np.maximum(counts[src], 1)
    spfh = np.zeros(n * 3 * FPFH_BINS)
    for block, index in enumerate((_bin(alpha, -np.pi, np.pi), _bin(phi, -1.0, 1.0),
                                   _bin(theta, -1.0, 1.0))):
        flat = src * 3 * FPFH_BINS + block * FPFH_BINS + index
        spfh += np.bincount(flat, weights=increment, minlength=spfh.size)
    spfh = spfh.reshape(n, 3 * FPFH_BINS)

    inverse_distance = sparse.csr_matrix((1.0 / weight, (src, dst)), shape=(n, n)) if len(src) \
        else sparse.csr_matrix((n, n))
    aggregated = np.asarray(inverse_distance @ spfh)
    block_sums = aggregated.reshape(n, 3, FPFH_BINS).sum(axis=2)
    scale = np.divide(100.0, block_sums, out=np.zeros_like(block_sums), where=block_sums > 0)
    aggregated = (aggregated.reshape(n, 3, FPFH_BINS) * scale[:, :, None]).reshape(n, -1)

    histograms = aggregated + spfh
    valid = counts > 0
    if not valid.all():
        logger.debug(f"FPFH: {int((~valid).sum())} of {n} points have no neighbour within {radius:.4g} m")
    return FeatureSet(histograms, valid)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def evaluate_registration(source: PointCloud, target: Union[PointCloud, SpatialIndex],
                          transform: RigidTransform, threshold: float) -> RegistrationResult:
    """Fitness and inlier RMSE of `transform` under a correspondence distance cap"""
    index = target if isinstance(target, SpatialIndex) else SpatialIndex(target)
    if len(source) == 0 or len(index) == 0:
        raise EmptyInput("registration scoring needs non-empty clouds")
    distance, _ = index.nearest(transform.apply(source.points))
    inliers = distance <= threshold
    rmse = float(np.sqrt(np.mean(distance[inliers] ** 2))) if inliers.any() else 0.0
    return RegistrationResult(transform, float(inliers.mean()), rmse)


def _nearest_features(query: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Brute-force nearest rows in histogram space, both ways; ties go to the lower index.

    Returns the nearest reference row for every query row and the nearest query
    row for every reference row.
    """
    forward = np.empty(len(query), dtype=np.int64)
    backward = np.zeros(len(reference), dtype=np.int64)
    closest = np.full(len(reference), np.inf)
    reference_sq = np.einsum("ij,ij->i", reference, reference)
    columns = np.arange(len(reference))
    step = max(1, _CHUNK_ELEMENTS // max(len(reference), 1))
    for start in range(0, len(query), step):
        block = query[start:start + step]
        distance = reference_sq[None, :] - 2.0 * (block @ reference.T)
        distance += np.einsum("ij,ij->i", block, block)[:, None]
        forward[start:start + len(block)] = np.argmin(distance, axis=1)
        rows = np.argmin(distance, axis=0)
        values = distance[rows, columns]
        better = values < closest
        closest[better] = values[better]
        backward[better] = rows[better] + start
    return forward, backward


def _feature_matches(source_feat: FeatureSet, target_feat: FeatureSet,
                     mutual: bool = True, min_pairs: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest target feature per valid source point.

    With `mutual` only pairs that are each other's nearest neighbour survive;
    when fewer than `min_pairs` do, the one-way matches are returned instead.
    """
    target_rows = np.flatnonzero(target_feat.valid)
    source_rows = np.flatnonzero(source_feat.valid)
    if len(target_rows) == 0 or len(source_rows) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    forward, backward = _nearest_features(source_feat.histograms[source_rows],
                                          target_feat.histograms[target_rows])
    if mutual:
        keep = backward[forward] == np.arange(len(source_rows))
        if keep.sum() >= min_pairs:
            logger.debug(f"mutual filter kept {int(keep.sum())} of {len(source_rows)} feature pairs")
            return source_rows[keep], target_rows[forward[keep]]
        logger.warning(f"only {int(keep.sum())} mutual feature pairs; using one-way matches")
    return source_rows, target_rows[forward]


def _score_batch(rotations: np.ndarray, translations: np.ndarray, source: np.ndarray,
                 target: np.ndarray, threshold: float) -> np.ndarray:
    """Correspondences within `threshold` under each (rotation, translation) hypothesis"""
    moved = np.einsum("bij,sj->bsi", rotations, source) + translations[:, None, :]
    squared = np.sum((moved - target[None]) ** 2, axis=2)
    return np.count_nonzero(squared <= threshold ** 2, axis=1)


class _CandidatePool:
    """Best-scoring hypotheses, at most one per pose neighbourhood"""

    def __init__(self, size: int, angle_deg: float, offset: float):
        self.size = size
        self.cos_limit = np.cos(np.radians(angle_deg))
        self.offset = offset
        self.scores = np.zeros(0, dtype=np.int64)
        self.orders = np.zeros(0, dtype=np.int64)
        self.rotations = np.zeros((0, 3, 3))
        self.translations = np.zeros((0, 3))

    def __len__(self) -> int:
        return len(self.scores)

    def offer(self, scores: np.ndarray, orders: np.ndarray, rotations: np.ndarray,
              translations: np.ndarray) -> None:
        if len(self) == self.size:
            keep = scores >= self.scores.min()
            scores, orders = scores[keep], orders[keep]
            rotations, translations = rotations[keep], translations[keep]
            if len(scores) == 0:
                return
        scores = np.concatenate([self.scores, scores])
        orders = np.concatenate([self.orders, orders])
        rotations = np.concatenate([self.rotations, rotations])
        translations = np.concatenate([self.translations, translations])

        chosen: list = []
        for i in np.lexsort((orders, -scores)):
            if chosen:
                # trace(R_i R_j^T) = 1 + 2 cos(angle)
                cosine = (np.einsum("ij,bij->b", rotations[i], rotations[chosen]) - 1.0) / 2.0
                gap = np.linalg.norm(translations[chosen] - translations[i], axis=1)
                if np.any((cosine >= self.cos_limit) & (gap <= self.offset)):
                    continue
            chosen.append(i)
            if len(chosen) == self.size:
                break
        self.scores, self.orders = scores[chosen], orders[chosen]
        self.rotations, self.translations = rotations[chosen], translations[chosen]


def ransac_register(source: PointCloud, target: PointCloud, source_feat: FeatureSet,
                    target_feat: FeatureSet, params: Optional[RansacParams] = None,
                    seed: SeedLike = 0) -> RegistrationResult:
    """Coarse alignment from feature correspondences.

    Correspondences are mutual nearest neighbours in feature space (unless
    `mutual_filter` is off). Hypotheses come from `sample_size` correspondences
    that pass the edge-length check and are scored in batches by correspondence
    inliers. The best pose-distinct few are verified on the full clouds and the
    winner is refit on its inliers.
    """
    params = params or RansacParams()
    m = params.sample_size
    if len(source) < m or len(target) < m:
        raise InsufficientPoints(
            f"RANSAC needs at least {m} points per cloud, got {len(source)} and {len(target)}")
    if len(source_feat) != len(source) or len(target_feat) != len(target):
        raise LengthMismatch("features are not parallel to their clouds")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    source_rows, target_rows = _feature_matches(source_feat, target_feat, params.mutual_filter,
                                                min_pairs=max(10 * m, _MIN_MUTUAL_PAIRS))
    if len(source_rows) < m:
        raise InsufficientPoints(f"only {len(source_rows)} usable feature correspondences")
    corr_source = source.points[source_rows]
    corr_target = target.points[target_rows]
    k = len(corr_source)

    subset = np.arange(k) if k <= _SCORE_SUBSET else np.sort(
        rng.choice(k, _SCORE_SUBSET, replace=False))
    score_source, score_target = corr_source[subset], corr_target[subset]
    threshold = params.distance_threshold
    pool = _CandidatePool(_VERIFIED_CANDIDATES, _DISTINCT_ANGLE_DEG, _DISTINCT_OFFSET * threshold)
    a, b = np.triu_indices(m, 1)

    best_ratio = 0.0
    needed = params.max_iterations
    iterations = 0
    order = 0
    while iterations < min(params.max_iterations, needed):
        batch = min(_BATCH, params.max_iterations - iterations)
        iterations += batch
        samples = np.sort(rng.integers(0, k, size=(batch, m)), axis=1)
        samples = samples[np.all(samples[:, 1:] != samples[:, :-1], axis=1)]

        s, t = corr_source[samples], corr_target[samples]
        ls = np.linalg.norm(s[:, a] - s[:, b], axis=2)
        lt = np.linalg.norm(t[:, a] - t[:, b], axis=2)
        ratio_ok = np.all((ls >= params.edge_length_ratio * lt) &
                          (lt >= params.edge_length_ratio * ls), axis=1)
        s, t = s[ratio_ok], t[ratio_ok]
        if len(s) == 0:
            continue

        rotations, translations, valid = _fit_batch(s, t)
        rotations, translations = rotations[valid], translations[valid]
        if len(rotations) == 0:
            continue
        scores = _score_batch(rotations, translations, score_source, score_target, threshold)
        orders = np.arange(order, order + len(scores))
        order += len(scores)
        pool.offer(scores, orders, rotations, translations)

        ratio = scores.max() / len(subset)
        if ratio > best_ratio:
            best_ratio = ratio
            miss = 1.0 - best_ratio ** m
            if miss <= 0.0:
                needed = iterations
            else:
                needed = int(np.ceil(np.log(1.0 - params.confidence) / np.log(miss)))

    if not len(pool):
        raise NoConsensus("no RANSAC hypothesis passed the correspondence checks")

    target_index = SpatialIndex(target)
    best: Optional[RegistrationResult] = None
    for rotation, translation in zip(pool.rotations, pool.translations):
        transform = _project_rotation(rotation, translation)
        result = evaluate_registration(source, target_index, transform, threshold)
        if best is None or result.fitness > best.fitness:
            best = result

    refined = _refit_on_inliers(source, target, target_index, best.transform, threshold)
    if refined is not None and refined.fitness >= best.fitness:
        best = refined

    logger.info(f"RANSAC: {iterations} hypotheses on {k} correspondences, "
                f"fitness {best.fitness:.3f}, rmse {best.inlier_rmse * 1e3:.3f} mm")
    if best.fitness < params.min_fitness:
        raise NoConsensus(
            f"best RANSAC fitness {best.fitness:.3f} below floor {params.min_fitness}")
    return RegistrationResult(best.transform, best.fitness, best.inlier_rmse, iterations)


def _project_rotation(rotation: np.ndarray, translation: np.ndarray) -> RigidTransform:
    u, _, vt = np.linalg.svd(rotation)
    return RigidTransform(u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt, translation)


def _refit_on_inliers(source: PointCloud, target: PointCloud, index: SpatialIndex,
                      transform: RigidTransform, threshold: float) -> Optional[RegistrationResult]:
    distance, nearest = index.nearest(transform.apply(source.points))
    inliers = distance <= threshold
    try:
        refit = fit_rigid_correspondences(source.points[inliers], target.points[nearest[inliers]])
    except DegenerateConfiguration:
        return None
    return evaluate_registration(source, index, refit, threshold)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------

def _point_to_plane_step(source: np.ndarray, target: np.ndarray,
                         normals: np.ndarray) -> RigidTransform:
    """One linearised point-to-plane Gauss-Newton step"""
    usable = np.any(normals != 0.0, axis=1)
    source, target, normals = source[usable], target[usable], normals[usable]
    if len(source) < 6:
        raise DegenerateConfiguration("too few correspondences with target normals")
    a = np.hstack([np.cross(source, normals), normals])
    b = -np.einsum("ij,ij->i", source - target, normals)
    x, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < 6:
        raise DegenerateConfiguration("point-to-plane system is rank deficient")
    return RigidTransform(Rotation.from_rotvec(x[:3]).as_matrix(), x[3:])


def icp_refine(source: PointCloud, target: PointCloud,
               initial: Optional[RigidTransform] = None,
               params: Optional[IcpParams] = None) -> RegistrationResult:
    """Iterative closest point refinement of `initial`.

    Iterates nearest-neighbour matching under the correspondence cap and a
    closed-form fit. The iterate with the lowest capped mean distance is
    returned, composed with `initial`.
    """
    params = params or IcpParams()
    initial = initial or RigidTransform.identity()
    if source.is_empty or target.is_empty:
        raise EmptyInput("ICP needs non-empty source and target clouds")
    if params.method == ICPMethod.POINT_TO_PLANE and not target.has_normals:
        raise MissingNormals("point-to-plane ICP needs target normals")

    cap = params.max_correspondence_distance
    moved = initial.apply(source.points)
    index = SpatialIndex(target)

    def score(transform: RigidTransform):
        distance, nearest = index.nearest(transform.apply(moved))
        inliers = distance <= cap
        fitness = float(inliers.mean())
        rmse = float(np.sqrt(np.mean(distance[inliers] ** 2))) if inliers.any() else 0.0
        objective = float(np.minimum(distance, cap).mean())
        return fitness, rmse, objective, inliers, nearest

    current = RigidTransform.identity()
    fitness, rmse, objective, inliers, nearest = score(current)
    if not inliers.any():
        raise NoCorrespondences(f"no source point within {cap * 1e3:.3g} mm of the target")

    best = (objective, current, fitness, rmse)
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        pts = current.apply(moved)[inliers]
        matched = target.points[nearest[inliers]]
        try:
            if params.method == ICPMethod.POINT_TO_PLANE:
                step = _point_to_plane_step(pts, matched, target.normals[nearest[inliers]])
            else:
                step = fit_rigid_correspondences(pts, matched)
        except DegenerateConfiguration as e:
            logger.warning(f"ICP stopped at iteration {iterations}: {e}")
            break
        current = step.compose(current)

        previous_fitness, previous_rmse = fitness, rmse
        fitness, rmse, objective, inliers, nearest = score(current)
        if objective <= best[0]:
            best = (objective, current, fitness, rmse)
        if not inliers.any():
            break
        rmse_change = abs(rmse - previous_rmse) / max(previous_rmse, 1e-15)
        fitness_change = abs(fitness - previous_fitness) / max(previous_fitness, 1e-15)
        if rmse_change < params.relative_rmse and fitness_change < params.relative_fitness:
            break

    _, transform, fitness, rmse = best
    logger.debug(f"ICP: {iterations} iterations, fitness {fitness:.3f}, rmse {rmse * 1e3:.3f} mm")
    return RegistrationResult(transform.compose(initial), fitness, rmse, iterations)
