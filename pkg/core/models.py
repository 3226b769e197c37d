from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional

import numpy as np


class PoolMode(str, Enum):
    MAX = "max"
    AVERAGE = "average"


class ShapeKind(str, Enum):
    SPHERE = "sphere"
    BOX = "box"
    CAPSULE = "capsule"
    VEHICLE = "vehicle"  # body box + cabin box, mirror-symmetric about y = 0


class RotationMode(str, Enum):
    AXIS_ALIGNED = "axis_aligned"  # indoor-style scenes
    YAW = "yaw"                    # driving-style scenes
    FULL = "full"


class LabelMode(str, Enum):
    DYNAMIC = "dynamic"        # positive iff predicted box IoU > threshold
    INSIDE_BOX = "inside_box"  # regular classification baseline


class SymmetryPlane(str, Enum):
    LONGITUDINAL = "longitudinal"  # mirror the local y axis
    LATERAL = "lateral"            # mirror the local x axis


@dataclass(frozen=True)
class Box3D:
    center: np.ndarray   # (3,)
    size: np.ndarray     # (3,) length, width, height; all > 0
    rotation: np.ndarray  # (3, 3) orthonormal, det +1

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        if np.any(self.size <= 0):
            raise ValueError(f"Box size components must be positive, got {self.size!r}")

    @classmethod
    def from_yaw(cls, center, size, yaw: float = 0.0) -> "Box3D":
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(center=center, size=size, rotation=rot)

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def is_axis_aligned(self, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.rotation, np.eye(3), atol=atol))

    def is_yaw_only(self, atol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r[2, :], [0.0, 0.0, 1.0], atol=atol)
            and np.allclose(r[:, 2], [0.0, 0.0, 1.0], atol=atol)
        )


@dataclass
class LabeledBox:
    box: Box3D
    class_id: int


@dataclass
class Detection:
    box: Box3D
    class_id: int
    score: float


@dataclass
class PointCloud:
    positions: np.ndarray                 # (N, 3)
    features: Optional[np.ndarray] = None  # (N, I), I may be 0

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.features is None:
            self.features = np.zeros((len(self.positions), 0))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        if len(self.features) != len(self.positions):
            raise ValueError(
                f"PointCloud has {len(self.positions)} positions but "
                f"{len(self.features)} feature rows"
            )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, mask_or_index) -> "PointCloud":
        return PointCloud(self.positions[mask_or_index], self.features[mask_or_index])


@dataclass
class CanonicalFrame:
    """
    Object box frame scaled into the unit cube:

        q = R^T (p - center) / scale + 0.5
    """
    center: np.ndarray
    rotation: np.ndarray
    scale: float

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return (p - self.center) @ self.rotation / self.scale + 0.5

    def to_scene(self, points: np.ndarray) -> np.ndarray:
        q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return ((q - 0.5) * self.scale) @ self.rotation.T + self.center


@dataclass
class SparseTensor:
    coords: np.ndarray     # (M, 3) int64 voxel keys, unique
    features: np.ndarray   # (M, C)
    stride: int = 1
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    voxel_size: float = 1.0

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.features = np.asarray(self.features)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        if len(self.features) != len(self.coords):
            raise ValueError(
                f"SparseTensor has {len(self.coords)} coords but "
                f"{len(self.features)} feature rows"
            )
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride!r}")

    @property
    def num_voxels(self) -> int:
        return int(len(self.coords))

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        return replace(self, features=features)


@dataclass
class NeighborTable:
    # (M, 27) feature-row index per kernel offset, -1 where the neighbor is inactive
    indices: np.ndarray
    stride: int = 1


@dataclass
class PoolAssignment:
    parent: np.ndarray        # (M_fine,) pooled row of each fine voxel
    counts: np.ndarray        # (M_coarse,) members per pooled voxel
    fine_coords: np.ndarray   # (M_fine, 3)
    coarse_coords: np.ndarray  # (M_coarse, 3)
    fine_stride: int
    mode: PoolMode
    argmax: Optional[np.ndarray] = None  # (M_coarse, C) winning fine row, max mode only


@dataclass
class PerPointPrediction:
    center: np.ndarray             # (N, 3)
    size: np.ndarray               # (N, 3), positive
    rot6: np.ndarray               # (N, 6)
    semantic_logits: np.ndarray    # (N, num_classes + 1), column 0 = background
    vote_weight_logit: np.ndarray  # (N,)
    shape_embedding: np.ndarray    # (N, D)

    def __len__(self) -> int:
        return int(len(self.center))

    def replace(self, **changes) -> "PerPointPrediction":
        return replace(self, **changes)


@dataclass
class VoteGraph:
    neighbors: np.ndarray  # (N, K), column 0 is the point itself

    @property
    def k(self) -> int:
        return int(self.neighbors.shape[1])


@dataclass
class Proposal:
    box: Box3D
    class_id: int
    score: float
    index: int  # source point


@dataclass
class ProposalSet:
    proposals: List[Proposal] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.proposals)

    def __iter__(self) -> Iterator[Proposal]:
        return iter(self.proposals)

    @property
    def indices(self) -> List[int]:
        return [p.index for p in self.proposals]


@dataclass
class SdfQueries:
    positions: np.ndarray  # (N, 3) in the canonical unit cube
    targets: np.ndarray    # (N,) signed distances or +-1 labels (0 = surface constraint)

    def __len__(self) -> int:
        return int(len(self.positions))

    @classmethod
    def empty(cls) -> "SdfQueries":
        return cls(np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def concat(cls, parts: List["SdfQueries"]) -> "SdfQueries":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.targets for p in parts]),
        )


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) canonical frame
    faces: np.ndarray     # (F, 3) int
    frame: Optional[CanonicalFrame] = None

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def scene_vertices(self) -> np.ndarray:
        if self.frame is None:
            return self.vertices
        return self.frame.to_scene(self.vertices)


@dataclass
class PrimitiveShape:
    """
    Analytic primitive around the center of its tight bounding box.

    params by kind:
        sphere:  radius
        box:     half_x, half_y, half_z
        capsule: half_length (segment along x), radius
        vehicle: body_x, body_y, body_z, cabin_x, cabin_y, cabin_z, cabin_offset_x
                 (half extents; cabin sits on top of the body)
    """
    kind: ShapeKind
    params: Dict[str, float]
    name: str = ""


@dataclass
class SceneObject:
    box: Box3D
    class_id: int
    shape: PrimitiveShape
    scale: float  # scene metres per shape unit


@dataclass
class SyntheticScene:
    cloud: PointCloud
    objects: List[SceneObject]
    sensor_origin: np.ndarray
    seed: int
    ground_z: float = 0.0
    point_object: Optional[np.ndarray] = None  # (N,) source object, -1 for ground
    point_ray: Optional[np.ndarray] = None     # (N,) ray id of each return

    @property
    def gt_boxes(self) -> List[LabeledBox]:
        return [LabeledBox(o.box, o.class_id) for o in self.objects]
