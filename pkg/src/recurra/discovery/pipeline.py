"""End-to-end discovery: from keypoints of one frame to object models and instances."""

import time
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated

import numpy as np
import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from recurra.discovery.bundle_adjustment import run_bundle_adjustment, support_observations
from recurra.discovery.clustering import (
    build_clusters,
    dbscan_triplets,
    filter_small_clusters,
    merge_inverse_clusters,
)
from recurra.discovery.config import DiscoveryConfig
from recurra.discovery.detection import (
    DetectionResult,
    cross_model_merge,
    detect_remaining,
    support_detections,
)
from recurra.discovery.matching import (
    PairRelation,
    match_descriptors,
    prune_pairs_ppf,
    run_triplet_generation,
)
from recurra.discovery.model_graph import assemble_model, build_graph, select_reference
from recurra.discovery.object_model import ObjectModel
from recurra.frames.keypoints import Keypoint3D
from recurra.geometry.transforms import DegenerateGeometryError

NO_PATTERN_MESSAGE = "no recurrent pattern found"


class RunReport(BaseModel):
    """Stage-by-stage counts and wall times of one discovery run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    keypoints: Annotated[int, Field(ge=0, description="Input keypoints")] = 0
    matches: Annotated[int, Field(ge=0, description="Unique keypoint matches")] = 0
    candidate_triplets: Annotated[
        int, Field(ge=0, description="Triplets with PPF-compatible pairs")
    ] = 0
    geometric_triplets: Annotated[
        int, Field(ge=0, description="Triplets passing the triangle filters")
    ] = 0
    accepted_triplets: Annotated[
        int, Field(ge=0, description="Triplets kept under the keypoint cap")
    ] = 0
    clusters: Annotated[int, Field(ge=0, description="Pose clusters after merging")] = 0
    models: Annotated[int, Field(ge=0, description="Discovered object models")] = 0
    instances: Annotated[int, Field(ge=0, description="Instances over all models")] = 0
    additional_instances: Annotated[
        int, Field(ge=0, description="Instances found by model-based detection")
    ] = 0
    timings_ms: Annotated[
        dict[str, float], Field(description="Wall time per stage in milliseconds")
    ] = {}
    seed: Annotated[int, Field(ge=0, description="Random seed of the run")] = 0
    message: Annotated[str, Field(description="Outcome summary")] = ""
    config: Annotated[DiscoveryConfig, Field(description="Configuration of the run")] = (
        DiscoveryConfig()
    )

    def to_yaml(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            yaml.safe_dump(self.model_dump(mode="json"), f, sort_keys=False)

    @classmethod
    def from_yaml(cls, path: Path) -> "RunReport":
        with path.open() as f:
            return cls.model_validate(yaml.safe_load(f))


@dataclass(frozen=True, eq=False)
class DiscoveryResult:
    models: list[ObjectModel]
    detections: list[DetectionResult]
    report: RunReport


@contextmanager
def _timed(timings: dict[str, float], stage: str) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = (time.perf_counter() - start) * 1000.0


def _refine(
    model: ObjectModel,
    kps: Sequence[Keypoint3D],
    config: DiscoveryConfig,
    workers: int,
) -> ObjectModel:
    try:
        result = run_bundle_adjustment(
            model,
            support_observations(model, kps),
            config.ba_max_iterations,
            config.ba_tolerance,
            workers,
        )
    except DegenerateGeometryError as e:
        logger.warning(f"Skipping bundle adjustment: {e}")
        return model
    return result.model


def discover(
    kps: Sequence[Keypoint3D],
    config: DiscoveryConfig,
    rng: np.random.Generator | None = None,
    workers: int = 1,
) -> DiscoveryResult:
    """Discover repeated objects among the keypoints of one frame.

    Models need at least two instances. An empty result still carries a
    populated report.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    timings: dict[str, float] = {}

    with _timed(timings, "matching"):
        matches = match_descriptors(kps, config.descriptor_threshold)
        relation = (
            prune_pairs_ppf(
                matches, kps, config.ppf_distance_tolerance, config.ppf_angle_tolerance
            )
            if config.ppf_filter
            else PairRelation.unrestricted(len(matches))
        )
        generation = run_triplet_generation(matches, relation, kps, config, workers)
    logger.info(f"Matched {len(matches)} keypoint pairs among {len(kps)} keypoints")

    with _timed(timings, "clustering"):
        member_lists = dbscan_triplets(
            generation.triplets, kps, config.cluster_eps, config.dbscan_min_points, workers
        )
        clusters = build_clusters(member_lists, generation.triplets, kps)
        clusters = merge_inverse_clusters(clusters, generation.triplets, kps, config.cluster_eps)
        clusters = filter_small_clusters(clusters, config.min_cluster_size)

    with _timed(timings, "model_creation"):
        graph = build_graph(clusters, kps, config.delta)
        models: list[ObjectModel] = []
        for component in graph.components():
            reference = select_reference(graph, component)
            model = assemble_model(graph, component, reference, kps, config.merge_radius)
            if len(model.instances) < 2:
                logger.debug(f"Discarding component {component}: a single instance")
                continue
            models.append(_refine(model, kps, config, workers))

    with _timed(timings, "detection"):
        adjusted = list(models)
        models = cross_model_merge(models, kps, config, rng, workers)
        used = {k for node in graph.nodes for k in node.keypoints}
        models, additional = detect_remaining(models, kps, used, config, rng, workers)
        models = cross_model_merge(models, kps, config, rng, workers)
        models = [
            model
            if any(model is done for done in adjusted)
            else _refine(model, kps, config, workers)
            for model in models
        ]
        detections = support_detections(models, kps, config.inlier_threshold)

    instance_count = sum(len(model.instances) for model in models)
    report = RunReport(
        keypoints=len(kps),
        matches=len(matches),
        candidate_triplets=generation.candidates,
        geometric_triplets=generation.geometric,
        accepted_triplets=len(generation.triplets),
        clusters=len(clusters),
        models=len(models),
        instances=instance_count,
        additional_instances=len(additional),
        timings_ms=timings,
        seed=config.seed,
        message=(
            f"{len(models)} models with {instance_count} instances"
            if models
            else NO_PATTERN_MESSAGE
        ),
        config=config,
    )
    logger.info(f"Discovery finished: {report.message}")
    return DiscoveryResult(models=models, detections=detections, report=report)
