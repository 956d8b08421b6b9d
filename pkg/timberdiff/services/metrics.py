"""Distance metrics between scan subsets and CAD geometry, report statistics and heatmaps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from timberdiff.schemas import (
    ColorMapMode,
    ErrorCategories,
    ErrorReport,
    EvaluationResult,
    MemberStatistics,
)
from timberdiff.services.cad_model import MeshFace
from timberdiff.services.cloud import PointCloud, SpatialIndex
from timberdiff.utils.error_handling import (
    EmptyInput,
    EmptyTarget,
    InvalidParameter,
    IoError,
    LengthMismatch,
)

PathLike = Union[str, Path]

# point x triangle pairs evaluated per chunk
_PAIR_CHUNK = 250_000

CSV_COLUMNS = ["entity", "level", "mean_mm", "mse_mm2", "std_mm", "min_mm", "max_mm",
               "n_points", "pass_fraction"]


def cloud_to_cloud_distances(source: PointCloud, target: PointCloud) -> np.ndarray:
    """Exact nearest-neighbour distance from every source point to the target"""
    if target.is_empty:
        raise EmptyTarget("target cloud is empty")
    if source.is_empty:
        return np.zeros(0)
    distance, _ = SpatialIndex(target).nearest(source.points)
    return distance


def point_triangle_distances(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Unsigned distance of each point to the closest of the (T, 3, 3) triangles"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 3, 3)
    a = corners[:, 0]
    ab = corners[:, 1] - a
    ac = corners[:, 2] - a

    out = np.empty(len(points))
    chunk = max(1, _PAIR_CHUNK // max(len(corners), 1))
    for start in range(0, len(points), chunk):
        ap = points[start:start + chunk, None, :] - a[None, :, :]
        d1 = np.einsum("pti,ti->pt", ap, ab)
        d2 = np.einsum("pti,ti->pt", ap, ac)
        bp = ap - ab
        d3 = np.einsum("pti,ti->pt", bp, ab)
        d4 = np.einsum("pti,ti->pt", bp, ac)
        cp = ap - ac
        d5 = np.einsum("pti,ti->pt", cp, ab)
        d6 = np.einsum("pti,ti->pt", cp, ac)
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4

        with np.errstate(divide="ignore", invalid="ignore"):
            v_ab = d1 / (d1 - d3)
            w_ac = d2 / (d2 - d6)
            w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            inv = 1.0 / (va + vb + vc)

        # vertex, edge and interior regions in the order they are tested
        regions = [
            (d1 <= 0) & (d2 <= 0),
            (d3 >= 0) & (d4 <= d3),
            (vc <= 0) & (d1 >= 0) & (d3 <= 0),
            (d6 >= 0) & (d5 <= d6),
            (vb <= 0) & (d2 >= 0) & (d6 <= 0),
            (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
        ]
        s = np.select(regions, [0.0, 1.0, v_ab, 0.0, 0.0, 1.0 - w_bc], default=vb * inv)
        t = np.select(regions, [0.0, 0.0, 0.0, 1.0, w_ac, w_bc], default=vc * inv)

        offset = ap - s[..., None] * ab - t[..., None] * ac
        out[start:start + chunk] = np.sqrt(np.einsum("pti,pti->pt", offset, offset)).min(axis=1)
    return out


def cloud_to_mesh_distances(source: PointCloud, faces: Sequence[MeshFace]) -> np.ndarray:
    """Exact unsigned distance from every source point to the nearest face triangle"""
    if not faces or sum(len(f.triangles) for f in faces) == 0:
        raise EmptyTarget("no target triangles")
    if source.is_empty:
        return np.zeros(0)
    corners = np.vstack([f.corners for f in faces])
    return point_triangle_distances(source.points, corners)


def categorize(distances: np.ndarray, threshold: float) -> ErrorCategories:
    """pass <= t < warn <= 2t < fail"""
    if not threshold > 0:
        raise InvalidParameter("threshold must be > 0")
    d = np.asarray(distances, dtype=np.float64)
    passed = int(np.count_nonzero(d <= threshold))
    warned = int(np.count_nonzero((d > threshold) & (d <= 2 * threshold)))
    return ErrorCategories(passed=passed, warned=warned, failed=len(d) - passed - warned)


def summarize(distances: np.ndarray, threshold: Optional[float] = None, entity: str = "",
              level: str = "beam") -> ErrorReport:
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if len(d) == 0:
        raise EmptyInput(f"no distances to summarise for '{entity}'")
    low, high = float(d.min()), float(d.max())
    mean = min(max(float(d.sum() / len(d)), low), high)
    mse = float(np.sum(d * d) / len(d))
    report = ErrorReport(
        entity=entity,
        level=level,
        n_points=len(d),
        mean=mean,
        mse=mse,
        std=float(d.std()),
        min=low,
        max=high,
        threshold=threshold,
        pass_fraction=None if threshold is None else float(np.count_nonzero(d <= threshold) / len(d)),
        categories=None if threshold is None else categorize(d, threshold),
        per_point_distances=d.tolist(),
    )
    return report


def member_statistics(reports: Sequence[ErrorReport]) -> MemberStatistics:
    """Both readings of "mean +- spread" over members: across member means, and pooled over points"""
    reports = [r for r in reports if r.n_points > 0]
    if not reports:
        raise EmptyInput("no member reports")
    means = np.array([r.mean for r in reports])
    counts = np.array([r.n_points for r in reports], dtype=np.float64)
    pooled_mean = float(np.sum(counts * means) / counts.sum())
    pooled_mse = float(np.sum(counts * np.array([r.mse for r in reports])) / counts.sum())
    return MemberStatistics(
        n_members=len(reports),
        mean_of_means=float(means.mean()),
        std_of_means=float(means.std()),
        pooled_mean=pooled_mean,
        pooled_std=float(np.sqrt(max(pooled_mse - pooled_mean ** 2, 0.0))),
    )


@dataclass(frozen=True)
class ColorMap:
    """Piecewise-linear gradient over distances; positions are fractions of [low, high]"""
    positions: Tuple[float, ...] = (0.0, 0.5, 1.0)
    colors: Tuple[Tuple[float, float, float], ...] = ((0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0))
    mode: ColorMapMode = ColorMapMode.ADAPTIVE
    bounds: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if len(self.positions) != len(self.colors) or len(self.positions) < 2:
            raise InvalidParameter("a color map needs matching positions and colors (at least 2)")
        if self.positions[0] != 0.0 or self.positions[-1] != 1.0 or \
                any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise InvalidParameter("positions must increase strictly from 0 to 1")
        if self.mode == ColorMapMode.FIXED:
            if self.bounds is None or not self.bounds[1] > self.bounds[0]:
                raise InvalidParameter("fixed mode needs bounds (low, high) with high > low")

    @classmethod
    def default(cls, bounds: Optional[Tuple[float, float]] = None) -> "ColorMap":
        if bounds is None:
            return cls()
        return cls(mode=ColorMapMode.FIXED, bounds=bounds)

    def apply(self, distances: np.ndarray) -> Tuple[np.ndarray, int]:
        """RGB in [0, 1] per distance, and how many distances fell outside fixed bounds"""
        d = np.asarray(distances, dtype=np.float64).reshape(-1)
        if len(d) == 0:
            return np.zeros((0, 3)), 0
        if self.mode == ColorMapMode.FIXED:
            low, high = self.bounds
        else:
            low, high = float(d.min()), float(d.max())
        if high <= low:
            return np.tile(np.asarray(self.colors[0], dtype=np.float64), (len(d), 1)), 0

        t = (d - low) / (high - low)
        clamped = int(np.count_nonzero((t < 0.0) | (t > 1.0)))
        t = np.clip(t, 0.0, 1.0)
        palette = np.asarray(self.colors, dtype=np.float64)
        colors = np.column_stack([np.interp(t, self.positions, palette[:, c]) for c in range(3)])
        return colors, clamped


def colorize(cloud: PointCloud, distances: np.ndarray,
             color_map: Optional[ColorMap] = None) -> PointCloud:
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if len(d) != len(cloud):
        raise LengthMismatch(f"{len(d)} distances for {len(cloud)} points")
    colors, clamped = (color_map or ColorMap()).apply(d)
    if clamped:
        logger.warning(f"{clamped} distances fall outside the color map bounds and were clamped")
    return cloud.with_colors(colors)


def reports_to_frame(reports: Sequence[ErrorReport]) -> pd.DataFrame:
    rows = [{
        "entity": r.entity,
        "level": r.level,
        "mean_mm": r.mean * 1e3,
        "mse_mm2": r.mse * 1e6,
        "std_mm": r.std * 1e3,
        "min_mm": r.min * 1e3,
        "max_mm": r.max * 1e3,
        "n_points": r.n_points,
        "pass_fraction": r.pass_fraction,
    } for r in reports]
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def write_report_csv(reports: Sequence[ErrorReport], path: PathLike) -> None:
    try:
        reports_to_frame(reports).to_csv(path, index=False, float_format="%.6f")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def write_report_json(result: EvaluationResult, path: PathLike, per_point: bool = False) -> None:
    """Serialise an EvaluationResult; per-point distances only when requested"""
    text = result.to_json(per_point=per_point)
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    logger.info(f"Report written to {path}")
