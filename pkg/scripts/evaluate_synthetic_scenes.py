#!/usr/bin/env python3
"""
Precision/recall of the discovery pipeline on synthetic scenes.

Generates scenes for four scenarios (one or two object types, with or
without clutter), runs discovery on each and scores the detected instances
against the annotations. Counts are summed per scenario.
"""

import time
from pathlib import Path
from typing import Annotated

import numpy as np
import typer
from loguru import logger
from rich import print
from rich.progress import Progress
from rich.table import Table

from recurra.discovery.config import DiscoveryConfig
from recurra.discovery.pipeline import discover
from recurra.evaluation.metrics import DEFAULT_CONTAINMENT, EvaluationCounts, evaluate
from recurra.synthetic.scenes import ObjectSpec, SceneSpec, generate_scene

app = typer.Typer()

SCENARIOS: dict[str, SceneSpec] = {
    "single object": SceneSpec(objects=[ObjectSpec()], instances_per_object=3),
    "single object, clutter": SceneSpec(
        objects=[ObjectSpec()], instances_per_object=3, clutter=150
    ),
    "multiple objects": SceneSpec(objects=[ObjectSpec(), ObjectSpec()], instances_per_object=2),
    "multiple objects, clutter": SceneSpec(
        objects=[ObjectSpec(), ObjectSpec()], instances_per_object=2, clutter=150
    ),
}


@app.command()
def main(
    scenes: Annotated[
        int,
        typer.Option("--scenes", "-n", min=1, help="Scenes per scenario"),
    ] = 20,
    position_noise: Annotated[
        float,
        typer.Option("--position-noise", help="Position noise sigma (mm)"),
    ] = 1.0,
    config_path: Annotated[
        Path | None,
        typer.Option("--config", help="Discovery configuration file"),
    ] = None,
    threads: Annotated[
        int,
        typer.Option("--threads", min=1, help="Worker threads"),
    ] = 1,
):
    """Evaluate discovery on synthetic scenes, scenario by scenario."""
    config = DiscoveryConfig.from_file(config_path) if config_path else DiscoveryConfig()
    logger.remove()

    table = Table(title="Synthetic evaluation", show_header=True, header_style="bold magenta")
    table.add_column("Scenario", style="cyan")
    table.add_column("Instances", justify="right")
    table.add_column("P", justify="right", style="green")
    table.add_column("R", justify="right", style="green")
    table.add_column("F1", justify="right", style="green")
    table.add_column("Time (ms)", justify="right", style="yellow")

    total = EvaluationCounts()
    with Progress() as progress:
        for name, base_spec in SCENARIOS.items():
            counts = EvaluationCounts()
            elapsed: list[float] = []
            for seed in progress.track(range(scenes), description=f"[green]{name}[/green]"):
                spec = base_spec.model_copy(update={"seed": seed, "position_noise": position_noise})
                scene = generate_scene(spec)
                start = time.perf_counter()
                result = discover(
                    scene.keypoints,
                    config.with_overrides(seed=seed),
                    np.random.default_rng(seed),
                    workers=threads,
                )
                elapsed.append((time.perf_counter() - start) * 1000.0)
                counts += evaluate(
                    result.detections, scene.annotations, scene.keypoints, DEFAULT_CONTAINMENT
                ).counts
            total += counts
            table.add_row(
                name,
                str(counts.true_positives + counts.false_negatives),
                f"{counts.precision:.3f}",
                f"{counts.recall:.3f}",
                f"{counts.f1:.3f}",
                f"{np.mean(elapsed):.0f}",
            )

    table.add_row(
        "[bold]all[/bold]",
        str(total.true_positives + total.false_negatives),
        f"{total.precision:.3f}",
        f"{total.recall:.3f}",
        f"{total.f1:.3f}",
        "",
    )
    print(table)


if __name__ == "__main__":
    app()
