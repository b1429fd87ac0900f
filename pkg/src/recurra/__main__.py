import sys
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any

import numpy as np
import typer
from loguru import logger
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from recurra.discovery.config import DiscoveryConfig
from recurra.discovery.detection import (
    DetectionResult,
    DimensionMismatchError,
    detect_model_instances,
    load_instances,
    save_instances,
)
from recurra.discovery.object_model import load_model, save_model
from recurra.discovery.pipeline import RunReport, discover
from recurra.evaluation.metrics import DEFAULT_CONTAINMENT, EvaluationResult, evaluate
from recurra.export.ply import result_cloud, write_ply
from recurra.frames.keypoints import Keypoint3D, load_keypoints
from recurra.frames.rgbd import load_frame, lift_keypoints
from recurra.synthetic.scenes import (
    ANNOTATIONS_FILE,
    SCENE_KEYPOINTS_FILE,
    InfeasibleSceneError,
    ObjectSpec,
    SceneSpec,
    generate_scene,
    load_annotations,
    save_scene,
)
from recurra.utils.text import FileFormatError

EXIT_INVALID_INPUT = 2
EXIT_DIMENSION_MISMATCH = 3

app = typer.Typer(no_args_is_help=True)
console = Console()
err_console = Console(stderr=True)


@dataclass(frozen=True)
class GlobalOptions:
    seed: int | None
    threads: int
    config: Path | None

    def load_config(self, **overrides: Any) -> DiscoveryConfig:
        base = DiscoveryConfig.from_file(self.config) if self.config else DiscoveryConfig()
        return base.with_overrides(seed=self.seed, **overrides)


def _describe(name: str) -> str:
    info = DiscoveryConfig.model_fields[name]
    return f"{info.description} [default: {info.default}]"


@contextmanager
def _input_errors() -> Iterator[None]:
    """Map bad input to exit codes with a one-line diagnostic."""
    try:
        yield
    except DimensionMismatchError as e:
        err_console.print(f"[red]Descriptor dimension mismatch:[/red] {e}")
        raise typer.Exit(code=EXIT_DIMENSION_MISMATCH) from e
    except (FileFormatError, InfeasibleSceneError, ValidationError, OSError) as e:
        err_console.print(f"[red]Invalid input:[/red] {e}")
        raise typer.Exit(code=EXIT_INVALID_INPUT) from e


@app.callback()
def main(
    ctx: typer.Context,
    seed: Annotated[
        int | None,
        typer.Option("--seed", min=0, help="Random seed, overrides the config file"),
    ] = None,
    threads: Annotated[
        int,
        typer.Option("--threads", min=1, help="Worker threads; never changes the outputs"),
    ] = 1,
    config: Annotated[
        Path | None,
        typer.Option(
            "--config",
            help="Configuration file: YAML, or 'key=value' lines overriding the defaults",
        ),
    ] = None,
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Log every pipeline step")
    ] = False,
):
    """Discover, model and localize repeated objects in a single RGB-D frame."""
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO")
    ctx.obj = GlobalOptions(seed=seed, threads=threads, config=config)


# Options shared by `discover` and `detect`
CorrespondenceThreshold = Annotated[
    float | None,
    typer.Option("--correspondence-threshold", help=_describe("correspondence_threshold")),
]
InlierThreshold = Annotated[
    float | None, typer.Option("--inlier-threshold", help=_describe("inlier_threshold"))
]
MinInliers = Annotated[
    int | None, typer.Option("--min-inliers", help=_describe("min_inliers"))
]
MinInlierRatio = Annotated[
    float | None, typer.Option("--min-inlier-ratio", help=_describe("min_inlier_ratio"))
]
RansacIterations = Annotated[
    int | None, typer.Option("--ransac-iterations", help=_describe("ransac_iterations"))
]


def _report_table(report: RunReport) -> Table:
    table = Table(title="Discovery", show_header=True, header_style="bold magenta")
    table.add_column("Stage", style="cyan")
    table.add_column("Count", justify="right", style="green")
    for label, value in (
        ("Keypoints", report.keypoints),
        ("Matches", report.matches),
        ("Candidate triplets", report.candidate_triplets),
        ("Geometric triplets", report.geometric_triplets),
        ("Accepted triplets", report.accepted_triplets),
        ("Clusters", report.clusters),
        ("Models", report.models),
        ("Instances", report.instances),
        ("Additional instances", report.additional_instances),
    ):
        table.add_row(label, f"{value:,}")
    for stage, elapsed in report.timings_ms.items():
        table.add_row(f"{stage} (ms)", f"{elapsed:.1f}")
    return table


def _detections_table(detections: list[DetectionResult]) -> Table:
    table = Table(title="Instances", show_header=True, header_style="bold magenta")
    table.add_column("Model", style="cyan")
    table.add_column("Inliers", justify="right", style="green")
    table.add_column("Ratio", justify="right", style="yellow")
    table.add_column("Translation (mm)", justify="right")
    for detection in detections:
        table.add_row(
            str(detection.model_id),
            str(detection.inlier_count),
            f"{detection.inlier_ratio:.3f}",
            " ".join(f"{c:.1f}" for c in detection.pose.t),
        )
    return table


def _relift(frame_dir: Path, kps: list[Keypoint3D], window: int, workers: int) -> list[Keypoint3D]:
    frame = load_frame(frame_dir)
    lifted = lift_keypoints(
        frame,
        [(kp.pixel[0], kp.pixel[1], kp.descriptor) for kp in kps],
        window=window,
        workers=workers,
    )
    return lifted.keypoints


@app.command("discover")
def discover_command(
    ctx: typer.Context,
    keypoints: Annotated[Path, typer.Argument(help="Keypoint file (.kp3)")],
    output: Annotated[
        Path, typer.Option("--output", "-o", help="Output directory")
    ] = Path("output"),
    frame: Annotated[
        Path | None,
        typer.Option(
            "--frame",
            help="Frame directory; keypoints are lifted again from its depth image",
        ),
    ] = None,
    descriptor_threshold: Annotated[
        float | None,
        typer.Option(
            "--descriptor-threshold", "--desc-thresh", help=_describe("descriptor_threshold")
        ),
    ] = None,
    ppf_distance_tolerance: Annotated[
        float | None,
        typer.Option("--ppf-distance-tolerance", help=_describe("ppf_distance_tolerance")),
    ] = None,
    ppf_angle_tolerance: Annotated[
        float | None,
        typer.Option("--ppf-angle-tolerance", help=_describe("ppf_angle_tolerance_deg")),
    ] = None,
    min_edge: Annotated[
        float | None, typer.Option("--min-edge", help=_describe("min_edge"))
    ] = None,
    max_edge: Annotated[
        float | None, typer.Option("--max-edge", help=_describe("max_edge"))
    ] = None,
    min_triangle_angle: Annotated[
        float | None,
        typer.Option("--min-triangle-angle", help=_describe("min_triangle_angle_deg")),
    ] = None,
    sidedness_eps: Annotated[
        float | None, typer.Option("--sidedness-eps", help=_describe("sidedness_eps"))
    ] = None,
    keypoint_cap: Annotated[
        int | None, typer.Option("--keypoint-cap", help=_describe("keypoint_cap"))
    ] = None,
    ppf_filter: Annotated[
        bool | None, typer.Option("--ppf-filter/--no-ppf-filter", help=_describe("ppf_filter"))
    ] = None,
    triangle_filter: Annotated[
        bool | None,
        typer.Option("--triangle-filter/--no-triangle-filter", help=_describe("triangle_filter")),
    ] = None,
    sidedness_filter: Annotated[
        bool | None,
        typer.Option(
            "--sidedness-filter/--no-sidedness-filter", help=_describe("sidedness_filter")
        ),
    ] = None,
    overlap_filter: Annotated[
        bool | None,
        typer.Option("--overlap-filter/--no-overlap-filter", help=_describe("overlap_filter")),
    ] = None,
    cluster_eps: Annotated[
        float | None, typer.Option("--cluster-eps", help=_describe("cluster_eps"))
    ] = None,
    dbscan_min_points: Annotated[
        int | None, typer.Option("--dbscan-min-points", help=_describe("dbscan_min_points"))
    ] = None,
    min_cluster_size: Annotated[
        int | None, typer.Option("--min-cluster-size", help=_describe("min_cluster_size"))
    ] = None,
    delta: Annotated[float | None, typer.Option("--delta", help=_describe("delta"))] = None,
    merge_radius: Annotated[
        float | None, typer.Option("--merge-radius", help=_describe("merge_radius"))
    ] = None,
    ba_max_iterations: Annotated[
        int | None, typer.Option("--ba-max-iterations", help=_describe("ba_max_iterations"))
    ] = None,
    ba_tolerance: Annotated[
        float | None, typer.Option("--ba-tolerance", help=_describe("ba_tolerance"))
    ] = None,
    correspondence_threshold: CorrespondenceThreshold = None,
    inlier_threshold: InlierThreshold = None,
    min_inliers: MinInliers = None,
    min_inlier_ratio: MinInlierRatio = None,
    ransac_iterations: RansacIterations = None,
    normal_window: Annotated[
        int | None, typer.Option("--normal-window", help=_describe("normal_window"))
    ] = None,
):
    """Discover object models and their instances among the keypoints of one frame."""
    options: GlobalOptions = ctx.obj
    with _input_errors():
        config = options.load_config(
            descriptor_threshold=descriptor_threshold,
            ppf_distance_tolerance=ppf_distance_tolerance,
            ppf_angle_tolerance_deg=ppf_angle_tolerance,
            min_edge=min_edge,
            max_edge=max_edge,
            min_triangle_angle_deg=min_triangle_angle,
            sidedness_eps=sidedness_eps,
            keypoint_cap=keypoint_cap,
            ppf_filter=ppf_filter,
            triangle_filter=triangle_filter,
            sidedness_filter=sidedness_filter,
            overlap_filter=overlap_filter,
            cluster_eps=cluster_eps,
            dbscan_min_points=dbscan_min_points,
            min_cluster_size=min_cluster_size,
            delta=delta,
            merge_radius=merge_radius,
            ba_max_iterations=ba_max_iterations,
            ba_tolerance=ba_tolerance,
            correspondence_threshold=correspondence_threshold,
            inlier_threshold=inlier_threshold,
            min_inliers=min_inliers,
            min_inlier_ratio=min_inlier_ratio,
            ransac_iterations=ransac_iterations,
            normal_window=normal_window,
        )
        kps = load_keypoints(keypoints)
        if frame is not None:
            kps = _relift(frame, kps, config.normal_window, options.threads)

    logger.info(f"Discovering objects among {len(kps)} keypoints from {keypoints}")
    result = discover(kps, config, workers=options.threads)

    output.mkdir(parents=True, exist_ok=True)
    for k, model in enumerate(result.models):
        save_model(output / f"model_{k}.objm", model)
    save_instances(output / "instances.txt", result.detections)
    result.report.to_yaml(output / "report.txt")

    console.print(_report_table(result.report))
    console.print(f"[bold green]{result.report.message}[/bold green]")


@app.command("detect")
def detect_command(
    ctx: typer.Context,
    model: Annotated[Path, typer.Argument(help="Object model (.objm)")],
    keypoints: Annotated[Path, typer.Argument(help="Keypoint file (.kp3)")],
    output: Annotated[
        Path, typer.Option("--output", "-o", help="Instances file to write")
    ] = Path("instances.txt"),
    correspondence_threshold: CorrespondenceThreshold = None,
    inlier_threshold: InlierThreshold = None,
    min_inliers: MinInliers = None,
    min_inlier_ratio: MinInlierRatio = None,
    ransac_iterations: RansacIterations = None,
):
    """Detect every instance of a known model in a scene."""
    options: GlobalOptions = ctx.obj
    with _input_errors():
        config = options.load_config(
            correspondence_threshold=correspondence_threshold,
            inlier_threshold=inlier_threshold,
            min_inliers=min_inliers,
            min_inlier_ratio=min_inlier_ratio,
            ransac_iterations=ransac_iterations,
        )
        object_model = load_model(model)
        kps = load_keypoints(keypoints)
        detections = detect_model_instances(
            object_model,
            kps,
            config,
            np.random.default_rng(config.seed),
            workers=options.threads,
        )

    save_instances(output, detections)
    console.print(_detections_table(detections))
    console.print(f"[bold green]{len(detections)} instances written to {output}[/bold green]")


@app.command("synth")
def synth_command(
    ctx: typer.Context,
    output: Annotated[
        Path, typer.Option("--output", "-o", help="Directory for the scene files")
    ] = Path("scene"),
    spec: Annotated[
        Path | None,
        typer.Option("--spec", help="Scene specification (YAML); replaces the flags below"),
    ] = None,
    objects: Annotated[int, typer.Option("--objects", min=0, help="Object types")] = 1,
    landmarks: Annotated[
        int, typer.Option("--landmarks", min=3, help="Landmarks per object")
    ] = 60,
    extent: Annotated[float, typer.Option("--extent", help="Object extent (mm)")] = 100.0,
    instances: Annotated[
        int, typer.Option("--instances", min=0, help="Instances per object")
    ] = 2,
    position_noise: Annotated[
        float, typer.Option("--position-noise", help="Position noise sigma (mm)")
    ] = 1.0,
    descriptor_noise: Annotated[
        float, typer.Option("--descriptor-noise", help="Descriptor noise sigma")
    ] = 0.01,
    clutter: Annotated[int, typer.Option("--clutter", min=0, help="Clutter keypoints")] = 0,
    workspace: Annotated[
        float, typer.Option("--workspace", help="Workspace extent (mm)")
    ] = 600.0,
    descriptor_dim: Annotated[
        int, typer.Option("--descriptor-dim", min=1, help="Descriptor length")
    ] = 32,
    shifted_instances: Annotated[
        int,
        typer.Option(
            "--shifted-instances", min=0, help="Trailing instances with shifted descriptors"
        ),
    ] = 0,
    descriptor_shift: Annotated[
        float, typer.Option("--descriptor-shift", help="Descriptor shift of those instances")
    ] = 0.0,
):
    """Generate a synthetic scene with ground-truth annotations."""
    options: GlobalOptions = ctx.obj
    with _input_errors():
        if spec is not None:
            scene_spec = SceneSpec.from_yaml(spec)
            if options.seed is not None:
                scene_spec = scene_spec.model_copy(update={"seed": options.seed})
        else:
            scene_spec = SceneSpec(
                objects=[ObjectSpec(landmarks=landmarks, extent=extent)] * objects,
                instances_per_object=instances,
                position_noise=position_noise,
                descriptor_noise=descriptor_noise,
                clutter=clutter,
                workspace_extent=workspace,
                descriptor_dim=descriptor_dim,
                shifted_instances=shifted_instances,
                descriptor_shift=descriptor_shift,
                seed=options.seed or 0,
            )
        scene = generate_scene(scene_spec)

    save_scene(output, scene, scene_spec.descriptor_dim)
    console.print(
        f"[bold green]{len(scene.keypoints)} keypoints and {len(scene.annotations)} "
        f"annotations written to {output / SCENE_KEYPOINTS_FILE} and "
        f"{output / ANNOTATIONS_FILE}[/bold green]"
    )


def _evaluation_table(result: EvaluationResult) -> Table:
    table = Table(title="Per class", show_header=True, header_style="bold magenta")
    table.add_column("Object", style="cyan")
    table.add_column("TP", justify="right", style="green")
    table.add_column("FP", justify="right", style="red")
    table.add_column("FN", justify="right", style="yellow")
    for object_id, counts in result.per_class.items():
        table.add_row(
            str(object_id) if object_id >= 0 else "background",
            str(counts.true_positives),
            str(counts.false_positives),
            str(counts.false_negatives),
        )
    return table


@app.command("eval")
def eval_command(
    instances: Annotated[Path, typer.Argument(help="Instances file")],
    annotations: Annotated[Path, typer.Argument(help="Annotations file")],
    keypoints: Annotated[Path, typer.Argument(help="Keypoint file (.kp3) of the scene")],
    containment: Annotated[
        float,
        typer.Option(
            "--containment",
            help="Fraction in (0, 1] of inlier keypoints that must fall inside the box",
        ),
    ] = DEFAULT_CONTAINMENT,
):
    """Score detections against annotated bounding boxes."""
    if not 0 < containment <= 1:
        raise typer.BadParameter(
            f"must lie in (0, 1], got {containment}", param_hint="--containment"
        )
    with _input_errors():
        detections = load_instances(instances)
        ground_truth = load_annotations(annotations)
        kps = load_keypoints(keypoints)
        out_of_range = [
            k for detection in detections for k in detection.keypoints if k >= len(kps)
        ]
        if out_of_range:
            raise FileFormatError(
                instances, 1, f"keypoint index {out_of_range[0]} beyond {len(kps)} keypoints"
            )
    result = evaluate(detections, ground_truth, kps, containment)
    console.print(_evaluation_table(result))
    print(f"P={result.precision:.3f} R={result.recall:.3f} F1={result.f1:.3f}")


@app.command("export-ply")
def export_ply_command(
    model: Annotated[Path, typer.Argument(help="Object model (.objm)")],
    output: Annotated[Path, typer.Option("--output", "-o", help="PLY file to write")] = Path(
        "result.ply"
    ),
    instances: Annotated[
        Path | None,
        typer.Option("--instances", help="Instances file; defaults to the model's own poses"),
    ] = None,
    model_id: Annotated[
        int | None,
        typer.Option("--model-id", help="Only draw instances of this model id"),
    ] = None,
    keypoints: Annotated[
        Path | None,
        typer.Option("--keypoints", help="Scene keypoints (.kp3) drawn around the instances"),
    ] = None,
):
    """Write a model and its instances as a colored point cloud."""
    with _input_errors():
        object_model = load_model(model)
        if instances is not None:
            detections = [
                detection
                for detection in load_instances(instances)
                if model_id is None or detection.model_id == model_id
            ]
        else:
            detections = [
                DetectionResult(model_id=0, pose=pose, inliers=(), inlier_ratio=0.0)
                for pose in object_model.instances
            ]
        kps = load_keypoints(keypoints) if keypoints is not None else None
        if kps is not None and any(
            k >= len(kps) for detection in detections for k in detection.keypoints
        ):
            raise FileFormatError(
                instances or model, 1, f"keypoint index beyond {len(kps)} keypoints"
            )
    points, colors = result_cloud(object_model, detections, kps)
    write_ply(output, points, colors)
    console.print(
        f"[bold green]{len(points)} vertices, {len(detections)} instances "
        f"written to {output}[/bold green]"
    )


if __name__ == "__main__":
    app()
