"""Experiment orchestration: JSON configuration, the 24-goal suite,
periodic goal-conditioned evaluation, and deterministic metrics output.

One experiment = one condition over several seeds. Each seed resolves
the purpose once, alternates exploration episodes with evaluations at a
fixed step interval, and checkpoints the models at every evaluation.
All artifacts land in the configured output directory:

    config.json           the fully resolved configuration
    metrics.csv           one row per (seed, checkpoint, goal)
    eval_summary.json     per-checkpoint aggregates
    exploration_log.json  per-episode intrinsic-reward and event stats
    checkpoints/          model weights + manifest per (seed, step)
"""

from __future__ import annotations

import csv
import functools
import json
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .agent import (
    GOAL_PICKPLACE,
    GOAL_POSTURE,
    GOAL_PUSHING,
    GOAL_REACHING,
    NEUTRAL_EE,
    AgentModels,
    Condition,
    GoalSpec,
    PlannerConfig,
    init_agent_models,
    plan_achieve,
    run_exploration_episode,
)
from .learner import (
    BATCH_SIZE,
    CLASSIFIER_LEARNING_RATE,
    ENSEMBLE_SIZE,
    KIND_LIFTING,
    KIND_PROXIMITY,
    LEARNING_RATE,
    FeatureLayout,
    PurposeModels,
    RunningNorm,
    checkpoint_load,
    checkpoint_save,
    classifier_from_tensors,
    classifier_tensors,
    ensemble_from_tensors,
    ensemble_tensors,
)
from .perception import DetectorConfig, detect_oracle
from .purpose import (
    MODE_STRUCTURED,
    LlmEndpointConfig,
    PurposeText,
    ResolutionError,
    ResolvedPurpose,
    resolve_llm,
    resolve_rule_based,
)
from .replay import ReplayBuffer
from .sim import BOX_A, BOX_B, PROXIMITY_RADIUS, SimState, Vec3, World, WorldConfig

CSV_HEADER = ("condition", "purpose", "seed", "step", "goal_id", "goal_type", "success", "wall_secs")

RESOLVER_RULE = "rule"
RESOLVER_LLM = "llm"


class ConfigError(ValueError):
    """Configuration document rejected (schema or cross-field rule)."""


@dataclass(frozen=True)
class LearnerConfig:
    model_lr: float = LEARNING_RATE
    classifier_lr: float = CLASSIFIER_LEARNING_RATE
    batch_size: int = BATCH_SIZE
    ensemble_size: int = ENSEMBLE_SIZE
    buffer_capacity: int = 200_000

    def __post_init__(self):
        if self.model_lr <= 0 or self.classifier_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ConfigError("batch_size and buffer_capacity must be >= 1")
        if self.ensemble_size < 2:
            raise ConfigError("ensemble_size must be >= 2 (disagreement needs variance)")


@dataclass(frozen=True)
class ExperimentConfig:
    condition: Condition = Condition.POEL
    purpose: str = "learn to manipulate blue objects"
    resolver: str = RESOLVER_RULE
    llm_url: str = ""
    llm_mode: str = MODE_STRUCTURED
    seeds: tuple[int, ...] = (0, 1, 2)
    total_steps: int = 30_000
    eval_interval: int = 6_000
    # Grasp-and-carry solutions to pushing goals need the full episode
    # length: contact often lands past step 50.
    eval_episode_length: int = 100
    out_dir: str = "runs/experiment"
    world: WorldConfig = field(default_factory=WorldConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.total_steps % self.eval_interval != 0:
            raise ConfigError("eval_interval must divide total_steps")
        if self.eval_interval % self.world.episode_length != 0:
            raise ConfigError("eval_interval must be a multiple of the episode length")
        if self.resolver not in (RESOLVER_RULE, RESOLVER_LLM):
            raise ConfigError(f"unknown resolver {self.resolver!r}")
        if self.resolver == RESOLVER_LLM and not self.llm_url:
            raise ConfigError("llm resolver needs llm_url")


# ---- JSON round-trip ---------------------------------------------------------


@functools.lru_cache(maxsize=1)
def _schema() -> dict:
    text = resources.files("poel").joinpath("config_schema.json").read_text()
    return json.loads(text)


def validate_config_dict(data: dict) -> None:
    try:
        jsonschema.validate(data, _schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config rejected at {path}: {exc.message}") from exc


def config_to_dict(cfg: ExperimentConfig) -> dict:
    w, p = cfg.world, cfg.planner
    return {
        "condition": cfg.condition.value,
        "purpose": cfg.purpose,
        "resolver": cfg.resolver,
        "llm_url": cfg.llm_url,
        "llm_mode": cfg.llm_mode,
        "seeds": list(cfg.seeds),
        "total_steps": cfg.total_steps,
        "eval_interval": cfg.eval_interval,
        "eval_episode_length": cfg.eval_episode_length,
        "out_dir": cfg.out_dir,
        "world": {
            "x_bounds": list(w.x_bounds),
            "y_bounds": list(w.y_bounds),
            "z_bounds": list(w.z_bounds),
            "cube_half": w.cube_half,
            "cube_colors": list(w.cube_colors),
            "box_a": [list(w.box_a[0]), list(w.box_a[1])],
            "box_b": [list(w.box_b[0]), list(w.box_b[1])],
            "box_floor": w.box_floor,
            "grasp_radius": w.grasp_radius,
            "push_height": w.push_height,
            "delta_limit": w.delta_limit,
            "episode_length": w.episode_length,
            "object_xy": None if w.object_xy is None else [list(xy) for xy in w.object_xy],
        },
        "planner": {
            "candidates": p.candidates,
            "horizon": p.horizon,
            "iterations": p.iterations,
            "elite_frac": p.elite_frac,
            "action_noise_std": p.action_noise_std,
            "init_radius": p.init_radius,
            "init_z": list(p.init_z),
            "sample_std": p.sample_std,
            "min_sample_std": p.min_sample_std,
            "held_bonus": p.held_bonus,
        },
        "detector": {
            "position_sigma": cfg.detector.position_sigma,
            "dropout": cfg.detector.dropout,
        },
        "learner": {
            "model_lr": cfg.learner.model_lr,
            "classifier_lr": cfg.learner.classifier_lr,
            "batch_size": cfg.learner.batch_size,
            "ensemble_size": cfg.learner.ensemble_size,
            "buffer_capacity": cfg.learner.buffer_capacity,
        },
    }


def _pair(v) -> tuple[float, float]:
    return (float(v[0]), float(v[1]))


def config_from_dict(data: dict) -> ExperimentConfig:
    """Schema-validate and merge a (possibly partial) config document
    over the defaults; unknown keys are rejected at any level."""
    validate_config_dict(data)
    w = dict(data.get("world", {}))
    for key in ("x_bounds", "y_bounds", "z_bounds"):
        if key in w:
            w[key] = _pair(w[key])
    for key in ("box_a", "box_b"):
        if key in w:
            w[key] = (_pair(w[key][0]), _pair(w[key][1]))
    if "cube_colors" in w:
        w["cube_colors"] = tuple(w["cube_colors"])
    if w.get("object_xy") is not None and "object_xy" in w:
        w["object_xy"] = tuple(_pair(xy) for xy in w["object_xy"])
    p = dict(data.get("planner", {}))
    if "init_z" in p:
        p["init_z"] = _pair(p["init_z"])
    kwargs = {
        key: data[key]
        for key in (
            "purpose",
            "resolver",
            "llm_url",
            "llm_mode",
            "total_steps",
            "eval_interval",
            "eval_episode_length",
            "out_dir",
        )
        if key in data
    }
    if "condition" in data:
        kwargs["condition"] = Condition(data["condition"])
    if "seeds" in data:
        kwargs["seeds"] = tuple(int(s) for s in data["seeds"])
    try:
        return ExperimentConfig(
            world=WorldConfig(**w),
            planner=PlannerConfig(**p),
            detector=DetectorConfig(**data.get("detector", {})),
            learner=LearnerConfig(**data.get("learner", {})),
            **kwargs,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---- goal suite ----------------------------------------------------------------

_POSTURE_TARGETS = (
    Vec3(0.40, 0.40, 0.10),
    Vec3(-0.40, 0.40, 0.30),
    Vec3(0.40, -0.40, 0.50),
    Vec3(-0.40, -0.40, 0.10),
    Vec3(0.00, 0.00, 0.45),
    Vec3(0.00, 0.50, 0.20),
)
# Push targets sit >= 0.3 m from every cube's start so no goal is
# satisfied at reset, yet are all reachable within one eval episode.
_PUSH_TARGETS = (
    Vec3(0.00, 0.00, 0.0),
    Vec3(0.35, 0.00, 0.0),
    Vec3(-0.20, -0.20, 0.0),
    Vec3(-0.10, 0.45, 0.0),
)
_GOAL_CUBES = ("green", "blue")
POSTURE_TOLERANCE = 0.05
PUSH_TOLERANCE = 0.15
# Pick-and-place success is the in-box predicate; GoalSpec still wants a
# positive tolerance, so this value is inert.
PICKPLACE_TOLERANCE = 0.05


def goal_suite(world_config: WorldConfig) -> list[GoalSpec]:
    """The fixed 24-goal evaluation suite: 6 posture, 2 reaching,
    8 pushing, 8 pick-and-place. The red cube is never a target."""
    goals: list[GoalSpec] = []
    for i, target in enumerate(_POSTURE_TARGETS, start=1):
        goals.append(
            GoalSpec(f"posture-{i}", GOAL_POSTURE, POSTURE_TOLERANCE, target_position=target)
        )
    for color in ("blue", "green"):
        goals.append(
            GoalSpec(
                f"reach-{color}", GOAL_REACHING, PROXIMITY_RADIUS,
                target_object=f"cube-{color}",
            )
        )
    for color in _GOAL_CUBES:
        for i, target in enumerate(_PUSH_TARGETS, start=1):
            goals.append(
                GoalSpec(
                    f"push-{color}-t{i}", GOAL_PUSHING, PUSH_TOLERANCE,
                    target_object=f"cube-{color}", target_position=target,
                )
            )
    for color in _GOAL_CUBES:
        for box in (BOX_A, BOX_B):
            for suffix in ("", "-alt"):
                goals.append(
                    GoalSpec(
                        f"place-{color}-{box}{suffix}", GOAL_PICKPLACE, PICKPLACE_TOLERANCE,
                        target_object=f"cube-{color}", target_box=box,
                    )
                )
    return goals


def start_layout_for(goal: GoalSpec, world_config: WorldConfig):
    """Pick-and-place goals come in two start layouts; the "-alt" ids
    use the reversed cube arrangement. Everything else uses the default."""
    if goal.goal_id.endswith("-alt") and world_config.object_xy is not None:
        return tuple(reversed(world_config.object_xy))
    return world_config.object_xy


def goal_success(world: World, state: SimState, goal: GoalSpec) -> bool:
    if goal.goal_type == GOAL_POSTURE:
        return state.ee.dist(goal.target_position) < goal.tolerance
    if goal.goal_type == GOAL_REACHING:
        return world.predicate_proximity(state, goal.target_object)
    if goal.goal_type == GOAL_PUSHING:
        obj = state.object(goal.target_object)
        return obj.position.dist_xy(goal.target_position) < goal.tolerance
    return world.in_box(state, goal.target_object, goal.target_box)


# ---- evaluation ------------------------------------------------------------------


@dataclass
class EvalResult:
    step: int
    per_goal: tuple[tuple[str, int], ...]
    per_type: dict[str, float]
    overall: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "per_goal": {gid: s for gid, s in self.per_goal},
            "per_type": dict(self.per_type),
            "overall": self.overall,
        }


def evaluate(
    models: AgentModels,
    goals: list[GoalSpec],
    world: World,
    planner: PlannerConfig,
    rng: np.random.Generator,
    episode_length: int,
    step: int = 0,
) -> EvalResult:
    """Attempt every goal once from a neutral start (same protocol for
    all conditions) and aggregate successes. Never touches the replay
    buffer or the models."""
    per_goal = []
    by_type: dict[str, list[int]] = {}
    for goal in goals:
        state = world.reset(
            rng, init_ee=NEUTRAL_EE, object_xy=start_layout_for(goal, world.config)
        )
        for _ in range(episode_length):
            features = models.layout.featurize_state(state)
            action = plan_achieve(models, features, goal, planner, rng, world)
            state, _ = world.step(state, action)
        success = int(goal_success(world, state, goal))
        per_goal.append((goal.goal_id, success))
        by_type.setdefault(goal.goal_type, []).append(success)
    per_type = {t: float(np.mean(v)) for t, v in by_type.items()}
    overall = float(np.mean([s for _, s in per_goal]))
    return EvalResult(step=step, per_goal=tuple(per_goal), per_type=per_type, overall=overall)


# ---- experiment loop ---------------------------------------------------------------


def resolve_purpose(config: ExperimentConfig, world: World) -> ResolvedPurpose:
    """Resolve the configured purpose against a dropout-free detection
    of the start scene (ids are what matter, not positions)."""
    state = world.reset(np.random.default_rng(0), init_ee=NEUTRAL_EE)
    scene = detect_oracle(state, world, DetectorConfig(), np.random.default_rng(0))
    purpose = PurposeText(config.purpose)
    if config.resolver == RESOLVER_LLM:
        cfg = LlmEndpointConfig(url=config.llm_url, mode=config.llm_mode)
        return resolve_llm(purpose, scene, cfg)
    return resolve_rule_based(purpose, scene)


def _tracked_ids(config: ExperimentConfig, world: World) -> tuple[str, ...]:
    """Purpose-cube ids tracked for lift/grasp logging in every
    condition (logging only; planning never sees these for baselines)."""
    if not config.purpose.strip():
        return ()
    try:
        state = world.reset(np.random.default_rng(0), init_ee=NEUTRAL_EE)
        scene = detect_oracle(state, world, DetectorConfig(), np.random.default_rng(0))
        resolved = resolve_rule_based(PurposeText(config.purpose), scene)
    except (ResolutionError, ValueError):
        return ()
    return tuple(sorted(resolved.relevant_ids))


def _checkpoint_extras(config, models, seed, step) -> dict:
    return {
        "condition": config.condition.value,
        "purpose": config.purpose,
        "seed": seed,
        "step": step,
        "trained": {
            KIND_PROXIMITY: models.purpose.proximity.trained,
            KIND_LIFTING: models.purpose.lifting.trained,
        },
        "norms": {
            "disagree": models.disagree_norm.state_dict(),
            "change": models.change_norm.state_dict(),
        },
        "config": config_to_dict(config),
    }


def models_from_checkpoint(path) -> tuple[AgentModels, dict, ExperimentConfig]:
    """Rebuild a full AgentModels bundle from a checkpoint + manifest."""
    tensors, extras, _ = checkpoint_load(path)
    config = config_from_dict(extras["config"])
    world = World(config.world)
    trained = extras.get("trained", {})
    models = AgentModels(
        layout=FeatureLayout(n_objects=len(config.world.cube_colors)),
        object_ids=world.object_ids(),
        ensemble=ensemble_from_tensors(tensors),
        purpose=PurposeModels(
            proximity=classifier_from_tensors(
                tensors, KIND_PROXIMITY, KIND_PROXIMITY, bool(trained.get(KIND_PROXIMITY))
            ),
            lifting=classifier_from_tensors(
                tensors, KIND_LIFTING, KIND_LIFTING, bool(trained.get(KIND_LIFTING))
            ),
        ),
        disagree_norm=RunningNorm.from_state_dict(extras["norms"]["disagree"]),
        change_norm=RunningNorm.from_state_dict(extras["norms"]["change"]),
    )
    return models, extras, config


def _save_checkpoint(path: Path, config, models, seed, step, chash) -> None:
    tensors = dict(ensemble_tensors(models.ensemble))
    tensors.update(classifier_tensors(models.purpose.proximity, KIND_PROXIMITY))
    tensors.update(classifier_tensors(models.purpose.lifting, KIND_LIFTING))
    checkpoint_save(
        tensors, path, config_hash=chash, extras=_checkpoint_extras(config, models, seed, step)
    )


def _run_seed(config, world, goals, seed, chash, out_dir):
    rng = np.random.default_rng(seed)
    resolved = None
    if config.condition is Condition.POEL:
        resolved = resolve_purpose(config, world)  # typed abort before any training
    tracked = _tracked_ids(config, world)
    models = init_agent_models(world, rng, k=config.learner.ensemble_size)
    buffer = ReplayBuffer(
        capacity=config.learner.buffer_capacity,
        state_dim=models.layout.state_dim,
        action_dim=models.layout.action_dim,
        n_objects=models.layout.n_objects,
    )
    episode_length = world.config.episode_length
    eval_every = config.eval_interval // episode_length
    rows, summaries, exploration = [], [], []
    steps_done = 0
    for episode in range(config.total_steps // episode_length):
        log = run_exploration_episode(
            world,
            buffer,
            models,
            config.condition,
            resolved,
            config.planner,
            rng,
            episode_index=episode,
            detector=config.detector,
            tracked_ids=tracked,
            model_lr=config.learner.model_lr,
            classifier_lr=config.learner.classifier_lr,
            batch_size=config.learner.batch_size,
        )
        steps_done += episode_length
        exploration.append(
            {
                "seed": seed,
                "episode": episode,
                "steps": steps_done,
                "start": list(log.start),
                "mean_combined": float(np.mean([b.combined for b in log.breakdowns])),
                "mean_disagree": float(np.mean([b.r_disagree for b in log.breakdowns])),
                "purpose_reward_rate": float(
                    np.mean([(b.r_prox + b.r_lift) / 2.0 for b in log.breakdowns])
                ),
                "lift_events": log.lift_events,
                "grasp_events": log.grasp_events,
                "push_events": log.push_events,
            }
        )
        if (episode + 1) % eval_every == 0:
            eval_rng = np.random.default_rng([seed, steps_done])
            result = evaluate(
                models, goals, world, config.planner, eval_rng,
                config.eval_episode_length, step=steps_done,
            )
            # wall_secs stays 0.0 so reruns of the same config produce
            # byte-identical CSVs; timing lives outside the metrics.
            for goal, (goal_id, success) in zip(goals, result.per_goal):
                rows.append(
                    (
                        config.condition.value,
                        config.purpose,
                        seed,
                        steps_done,
                        goal_id,
                        goal.goal_type,
                        success,
                        0.0,
                    )
                )
            summary = result.to_dict()
            summary["seed"] = seed
            summaries.append(summary)
            _save_checkpoint(
                out_dir / "checkpoints" / f"seed{seed}-step{steps_done:06d}.ckpt",
                config, models, seed, steps_done, chash,
            )
    return rows, summaries, exploration


def run_experiment(config: ExperimentConfig) -> Path:
    """Run every seed of one condition and write all artifacts.
    Returns the output directory."""
    out_dir = Path(config.out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"
    )
    chash = config_hash(config)
    world = World(config.world)
    goals = goal_suite(config.world)
    all_rows, all_summaries, all_exploration = [], [], []
    for seed in config.seeds:
        rows, summaries, exploration = _run_seed(config, world, goals, seed, chash, out_dir)
        all_rows.extend(rows)
        all_summaries.extend(summaries)
        all_exploration.extend(exploration)
    with (out_dir / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(all_rows)
    (out_dir / "eval_summary.json").write_text(json.dumps(all_summaries, indent=2) + "\n")
    (out_dir / "exploration_log.json").write_text(json.dumps(all_exploration, indent=2) + "\n")
    return out_dir
