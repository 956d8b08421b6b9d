from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# File documents
# ---------------------------------------------------------------------------

class TransformDocument(BaseModel):
    rotation: List[List[float]] = Field(..., min_length=3, max_length=3)
    translation: List[float] = Field(..., min_length=3, max_length=3)

    @model_validator(mode="after")
    def check_rows(self):
        if any(len(row) != 3 for row in self.rotation):
            raise ValueError("rotation must be 3x3")
        return self


class JointFaceDocument(BaseModel):
    id: int = Field(..., ge=0)
    triangles: List[Tuple[int, int, int]]


class JointDocument(BaseModel):
    id: int = Field(..., ge=0)
    faces: List[JointFaceDocument]


class BeamDocument(BaseModel):
    id: int = Field(..., ge=0)
    vertices: List[Tuple[float, float, float]]
    triangles: List[Tuple[int, int, int]]
    joints: List[JointDocument] = []
    open: bool = False


class AssemblyDocument(BaseModel):
    name: str
    beams: List[BeamDocument]


class SegmentRecord(BaseModel):
    index: int
    size: int
    centroid: List[float]
    mean_normal: List[float]
    point_indices: List[int]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ICPMethod(str, Enum):
    POINT_TO_POINT = "point_to_point"
    POINT_TO_PLANE = "point_to_plane"


class RegistrationMode(str, Enum):
    RANSAC = "ransac"
    EXTERNAL = "external"
    NONE = "none"


class MetricBackend(str, Enum):
    CLOUD_TO_CLOUD = "cloud_to_cloud"
    CLOUD_TO_MESH = "cloud_to_mesh"


class ColorMapMode(str, Enum):
    ADAPTIVE = "adaptive"
    FIXED = "fixed"


class EvaluationLevel(str, Enum):
    PER_JOINT = "per_joint"
    PER_JOINT_FACE = "per_joint_face"


class RansacParams(BaseModel):
    max_iterations: int = Field(100_000, ge=1)
    distance_threshold: float = Field(0.003, gt=0, description="meters")
    sample_size: int = Field(3, ge=3)
    edge_length_ratio: float = Field(0.9, gt=0, lt=1)
    confidence: float = Field(0.999, gt=0, lt=1)
    min_fitness: float = Field(0.1, ge=0, le=1)
    mutual_filter: bool = Field(True, description="keep only mutually nearest feature pairs")


class IcpParams(BaseModel):
    max_iterations: int = Field(30, ge=1)
    max_correspondence_distance: float = Field(0.004, gt=0, description="meters")
    relative_rmse: float = Field(1e-6, ge=0)
    relative_fitness: float = Field(1e-6, ge=0)
    method: ICPMethod = ICPMethod.POINT_TO_POINT


class OutlierParams(BaseModel):
    enabled: bool = True
    k_neighbors: int = Field(20, ge=1)
    std_ratio: float = Field(2.0, gt=0)


class NormalParams(BaseModel):
    k_neighbors: int = Field(20, ge=3)


class RegistrationParams(BaseModel):
    mode: RegistrationMode = RegistrationMode.RANSAC
    transform_path: Optional[Path] = Field(None, exclude=True)
    refine: bool = True
    feature_radius: Optional[float] = Field(None, gt=0, description="meters; 5 x voxel when unset")
    ransac: RansacParams = RansacParams()
    icp: IcpParams = IcpParams()

    @model_validator(mode="after")
    def check_external(self):
        if self.mode == RegistrationMode.EXTERNAL and self.transform_path is None:
            raise ValueError("external registration needs a transform file")
        return self


class SegmentationParams(BaseModel):
    angle_threshold: float = Field(15.0, gt=0, lt=90, description="degrees")
    k_neighbors: int = Field(20, ge=1)
    min_segment_size: int = Field(50, ge=1)
    max_normal_angle: float = Field(15.0, gt=0, lt=90, description="degrees")
    max_centroid_distance: Optional[float] = Field(
        None, gt=0, description="meters; 2 x cross-section diagonal when unset")
    lam: float = Field(1.0, ge=0)
    curvature_factor: float = Field(
        4.0, gt=0, description="points above this multiple of the median surface variation do not seed")


class MetricParams(BaseModel):
    beam_backend: MetricBackend = MetricBackend.CLOUD_TO_CLOUD
    face_backend: MetricBackend = MetricBackend.CLOUD_TO_MESH
    threshold: Optional[float] = Field(None, gt=0, description="meters")
    sample_density: float = Field(1e6, gt=0, description="target points per square meter")
    colormap: ColorMapMode = ColorMapMode.ADAPTIVE
    colormap_bounds: Optional[Tuple[float, float]] = None

    @model_validator(mode="after")
    def check_bounds(self):
        if self.colormap == ColorMapMode.FIXED:
            if self.colormap_bounds is None or not self.colormap_bounds[1] > self.colormap_bounds[0]:
                raise ValueError("fixed color map needs bounds (low, high) with high > low")
        return self


class PipelineConfig(BaseModel):
    """Per-run configuration; lengths in meters"""
    voxel_size: float = Field(0.002, gt=0)
    outliers: OutlierParams = OutlierParams()
    normals: NormalParams = NormalParams()
    registration: RegistrationParams = RegistrationParams()
    segmentation: SegmentationParams = SegmentationParams()
    projection_tolerance: float = Field(0.005, gt=0)
    detect_joints: bool = True
    metrics: MetricParams = MetricParams()
    seed: int = Field(0, ge=0)
    output_dir: Optional[Path] = Field(None, exclude=True)

    @classmethod
    def from_settings(cls, settings, **overrides) -> "PipelineConfig":
        base = {
            "voxel_size": settings.voxel_size_mm / 1e3,
            "projection_tolerance": settings.projection_tolerance_mm / 1e3,
            "seed": settings.seed,
            "metrics": MetricParams(sample_density=settings.sample_density),
        }
        base.update(overrides)
        return cls(**base)

    def feature_radius(self) -> float:
        return self.registration.feature_radius or 5.0 * self.voxel_size

    def ransac_params(self) -> RansacParams:
        """RANSAC parameters with the threshold tied to the voxel size unless set explicitly"""
        ransac = self.registration.ransac
        if "distance_threshold" in ransac.model_fields_set:
            return ransac
        return ransac.model_copy(update={"distance_threshold": 1.5 * self.voxel_size})

    def icp_params(self) -> IcpParams:
        icp = self.registration.icp
        if "max_correspondence_distance" in icp.model_fields_set:
            return icp
        return icp.model_copy(update={"max_correspondence_distance": 2.0 * self.voxel_size})


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class ErrorCategories(BaseModel):
    passed: int = Field(..., ge=0)
    warned: int = Field(..., ge=0)
    failed: int = Field(..., ge=0)


class ErrorReport(BaseModel):
    """Distance statistics of one entity; lengths in meters"""
    entity: str
    level: str
    n_points: int = Field(..., ge=1)
    mean: float
    mse: float
    std: float = Field(..., ge=0)
    min: float
    max: float
    threshold: Optional[float] = None
    pass_fraction: Optional[float] = Field(None, ge=0, le=1)
    categories: Optional[ErrorCategories] = None
    clamped: int = Field(0, ge=0)
    per_point_distances: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_statistics(self):
        if not self.min <= self.mean <= self.max:
            raise ValueError("mean must lie between min and max")
        if self.mse < self.mean ** 2 * (1.0 - 1e-9):
            raise ValueError("mse is below mean^2")
        if self.per_point_distances is not None and len(self.per_point_distances) != self.n_points:
            raise ValueError("per-point distances do not match n_points")
        return self


class MemberStatistics(BaseModel):
    """Spread over members: std of member means, and std of all member points pooled"""
    n_members: int
    mean_of_means: float
    std_of_means: float
    pooled_mean: float
    pooled_std: float


class RegistrationQuality(BaseModel):
    fitness: float = Field(..., ge=0, le=1)
    inlier_rmse: float = Field(..., ge=0)
    iterations: int = 0


class Provenance(BaseModel):
    tool: str
    version: str
    config: Dict[str, Any]
    inputs: Dict[str, str] = {}
    stages: List[str] = []
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class EvaluationResult(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    pipeline: str
    levels: List[str]
    t1: TransformDocument
    t2: Dict[str, TransformDocument] = {}
    registration: Dict[str, RegistrationQuality] = {}
    reports: List[ErrorReport] = []
    member_statistics: Optional[MemberStatistics] = None
    unassociated: List[str] = []
    multiply_used_segments: Dict[str, List[str]] = {}
    registered_points: int = 0
    residue_size: int = 0
    unused_segment_points: int = 0
    provenance: Provenance

    # non-serialised artifacts for the CLI writers
    _registered: Any = PrivateAttr(default=None)
    _colored: Any = PrivateAttr(default=None)

    @property
    def registered_cloud(self):
        return self._registered

    @property
    def colored_cloud(self):
        return self._colored

    @property
    def complete(self) -> bool:
        return not self.unassociated

    @property
    def exit_code(self) -> int:
        return 0 if self.complete else 1

    def reports_at(self, level: str) -> List[ErrorReport]:
        return [r for r in self.reports if r.level == level]

    def to_json(self, per_point: bool = False) -> str:
        exclude = None if per_point else {"reports": {"__all__": {"per_point_distances"}}}
        return self.model_dump_json(indent=2, by_alias=True, exclude=exclude)
