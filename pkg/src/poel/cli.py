"""Command-line entry points: train, eval, resolve, report."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from .harness import (
    config_from_dict,
    evaluate,
    goal_suite,
    models_from_checkpoint,
    run_experiment,
)
from .perception import load_scene
from .purpose import (
    LlmEndpointConfig,
    PurposeText,
    ResolutionError,
    resolve_llm,
    resolve_rule_based,
)
from .report import render_report
from .sim import World

GOAL_FILTERS = ("all", "posture", "reaching", "pushing", "pickplace")


@click.group()
def main():
    """Purpose-directed exploration experiments on a desk-scale world."""


@main.command()
@click.option("--condition", type=click.Choice(["poel", "lexa", "alan"]), default=None)
@click.option("--purpose", default=None, help="Purpose phrase (POEL only uses it for planning).")
@click.option("--seed", "seeds", type=int, multiple=True, help="Repeatable; overrides config seeds.")
@click.option("--steps", type=int, default=None, help="Total exploration steps.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", default=None, help="Output directory.")
def train(condition, purpose, seeds, steps, config_path, out_dir):
    """Run exploration with periodic evaluation for one condition."""
    data = json.loads(Path(config_path).read_text()) if config_path else {}
    if condition is not None:
        data["condition"] = condition
    if purpose is not None:
        data["purpose"] = purpose
    if seeds:
        data["seeds"] = list(seeds)
    if steps is not None:
        data["total_steps"] = steps
    if out_dir is not None:
        data["out_dir"] = out_dir
    try:
        cfg = config_from_dict(data)
        out = run_experiment(cfg)
    except (ValueError, ResolutionError) as exc:
        raise click.ClickException(str(exc))
    click.echo(f"run complete: {out / 'metrics.csv'}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--goals", "goal_filter", type=click.Choice(GOAL_FILTERS), default="all")
def eval_cmd(checkpoint, goal_filter):
    """Evaluate a saved checkpoint on the goal suite."""
    try:
        models, extras, cfg = models_from_checkpoint(checkpoint)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    world = World(cfg.world)
    goals = goal_suite(cfg.world)
    if goal_filter != "all":
        goals = [g for g in goals if g.goal_type == goal_filter]
    rng = np.random.default_rng([int(extras["seed"]), int(extras["step"])])
    result = evaluate(
        models, goals, world, cfg.planner, rng, cfg.eval_episode_length,
        step=int(extras["step"]),
    )
    for goal_id, success in result.per_goal:
        click.echo(f"{goal_id}: {'success' if success else 'failure'}")
    for gtype, mean in sorted(result.per_type.items()):
        click.echo(f"[{gtype}] {mean:.3f}")
    click.echo(f"overall: {result.overall:.4f}")


@main.command()
@click.option("--purpose", required=True)
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["rule", "llm"]), default="rule")
@click.option("--llm-url", default="", help="Endpoint for --mode llm (or POEL_LLM_ENDPOINT).")
def resolve(purpose, scene_path, mode, llm_url):
    """Resolve a purpose phrase against a scene description file."""
    try:
        scene = load_scene(scene_path)
        text = PurposeText(purpose)
        if mode == "llm":
            resolved = resolve_llm(text, scene, LlmEndpointConfig(url=llm_url))
        else:
            resolved = resolve_rule_based(text, scene)
    except (ValueError, ResolutionError) as exc:
        raise click.ClickException(str(exc))
    click.echo(
        json.dumps(
            {
                "purpose": purpose,
                "relevant_ids": sorted(resolved.relevant_ids),
                "source": resolved.source,
            }
        )
    )


@main.command()
@click.option("--runs", "run_dirs", multiple=True, required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def report(run_dirs, out_path):
    """Aggregate run directories into an SVG chart and summary table."""
    try:
        table = render_report(run_dirs, out_path)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {out_path}")
    click.echo(table)


if __name__ == "__main__":
    main()
