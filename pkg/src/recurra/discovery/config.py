import math
from pathlib import Path
from typing import Annotated, Any, Self

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from recurra.utils.text import FileFormatError, iter_data_lines


class DiscoveryConfig(BaseModel):
    """Thresholds and iteration limits of the discovery pipeline.

    Defaults reproduce the published configuration; angles are given in
    degrees here and exposed in radians through properties.

    ```yaml
    ppf_distance_tolerance: 5.0
    ppf_angle_tolerance_deg: 35.0
    min_edge: 10.0
    max_edge: 125.0
    min_triangle_angle_deg: 10.0
    cluster_eps: 35.0
    min_cluster_size: 14
    inlier_threshold: 5.0
    min_inliers: 5
    min_inlier_ratio: 0.125
    ```
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Triplet matching
    descriptor_threshold: Annotated[
        float,
        Field(gt=0, description="Maximum descriptor distance of a keypoint match"),
    ] = 0.25
    ppf_distance_tolerance: Annotated[
        float, Field(gt=0, description="Point pair feature distance tolerance (mm)")
    ] = 5.0
    ppf_angle_tolerance_deg: Annotated[
        float, Field(gt=0, description="Point pair feature angle tolerance (degrees)")
    ] = 35.0
    min_edge: Annotated[float, Field(gt=0, description="Minimum triangle edge (mm)")] = 10.0
    max_edge: Annotated[float, Field(gt=0, description="Maximum triangle edge (mm)")] = 125.0
    min_triangle_angle_deg: Annotated[
        float, Field(gt=0, description="Minimum interior triangle angle (degrees)")
    ] = 10.0
    sidedness_eps: Annotated[
        float, Field(gt=0, description="Sidedness threshold on the normalized-sum norm")
    ] = 0.1
    keypoint_cap: Annotated[
        int, Field(gt=0, description="Maximum number of triplets a keypoint may appear in")
    ] = 60
    ppf_filter: Annotated[bool, Field(description="Prune pairs by point pair features")] = True
    triangle_filter: Annotated[
        bool, Field(description="Reject triangles by edge length and acuteness")
    ] = True
    sidedness_filter: Annotated[bool, Field(description="Reject reflected triangles")] = True
    overlap_filter: Annotated[
        bool,
        Field(description="Reject triplet matches whose two triangles intersect"),
    ] = True

    # Clustering
    cluster_eps: Annotated[
        float, Field(gt=0, description="DBSCAN radius on the triplet pair distance (mm)")
    ] = 35.0
    dbscan_min_points: Annotated[int, Field(gt=0, description="DBSCAN core threshold")] = 3
    min_cluster_size: Annotated[
        int, Field(gt=0, description="Clusters with fewer triplets are discarded")
    ] = 14

    # Model creation
    delta: Annotated[
        float, Field(gt=0, description="Weight of edges between sets sharing keypoints (mm)")
    ] = 1.0
    merge_radius: Annotated[
        float, Field(gt=0, description="Radius for merging points into one landmark (mm)")
    ] = 5.0
    ba_max_iterations: Annotated[
        int, Field(gt=0, description="Bundle adjustment iteration limit")
    ] = 50
    ba_tolerance: Annotated[
        float, Field(gt=0, description="Bundle adjustment relative cost decrease to stop")
    ] = 1e-8

    # Detection
    correspondence_threshold: Annotated[
        float,
        Field(gt=0, description="Maximum descriptor distance of a model correspondence"),
    ] = 0.4
    inlier_threshold: Annotated[
        float, Field(gt=0, description="RANSAC inlier distance (mm)")
    ] = 5.0
    min_inliers: Annotated[int, Field(gt=0, description="Minimum RANSAC inliers")] = 5
    min_inlier_ratio: Annotated[
        float,
        Field(gt=0, le=1, description="RANSAC succeeds above this inlier ratio"),
    ] = 0.125
    ransac_iterations: Annotated[
        int, Field(gt=0, description="RANSAC iterations per detection attempt")
    ] = 2000

    # Frames
    normal_window: Annotated[
        int, Field(ge=3, description="Normal estimation window (pixels, odd)")
    ] = 11

    seed: Annotated[int, Field(ge=0, description="Random seed")] = 0

    @field_validator("normal_window")
    @classmethod
    def validate_odd_window(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"Normal window must be odd, got {value}")
        return value

    @property
    def ppf_angle_tolerance(self) -> float:
        return math.radians(self.ppf_angle_tolerance_deg)

    @property
    def min_triangle_angle(self) -> float:
        return math.radians(self.min_triangle_angle_deg)

    @classmethod
    def from_yaml(cls, path: Path) -> Self:
        with path.open() as f:
            return cls.model_validate(yaml.safe_load(f) or {})

    @classmethod
    def from_key_value_file(cls, path: Path) -> Self:
        """Load `key=value` lines; '#' comments and blank lines are ignored."""
        values: dict[str, Any] = {}
        for line_number, line in iter_data_lines(path):
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise FileFormatError(path, line_number, "expected 'key=value'")
            values[key.strip()] = yaml.safe_load(value.strip())
        return cls.model_validate(values)

    @classmethod
    def from_file(cls, path: Path) -> Self:
        if path.suffix.lower() in (".yaml", ".yml"):
            return cls.from_yaml(path)
        return cls.from_key_value_file(path)

    def with_overrides(self, **overrides: Any) -> Self:
        """Return a validated copy with the non-None overrides applied."""
        values = self.model_dump()
        values.update({key: value for key, value in overrides.items() if value is not None})
        return type(self).model_validate(values)

    def disable_filters(self) -> Self:
        """All geometric triplet filters off, as used to count raw candidates."""
        return self.with_overrides(
            ppf_filter=False,
            triangle_filter=False,
            sidedness_filter=False,
            overlap_filter=False,
        )
