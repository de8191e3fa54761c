"""Exploration and achievement policies: cross-entropy MPC over the
learned ensemble, plus condition-specific behavior.

POEL plans with the combined disagreement+proximity+lifting reward and
starts each episode near a purpose-relevant object; LEXA* plans with
disagreement alone and starts uniformly; ALAN* plans with normalized
predicted object displacement and starts near any detected object.
Planning works purely on feature vectors — imagined rollouts never
touch the real environment.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .learner import (
    BATCH_SIZE,
    CLASSIFIER_LEARNING_RATE,
    ENSEMBLE_SIZE,
    LEARNING_RATE,
    EnsembleModel,
    FeatureLayout,
    PurposeModels,
    RewardBreakdown,
    RunningNorm,
    classifier_decisions,
    disagreement_reward,
    ensemble_forward,
    ensemble_predict,
    ensemble_train_member,
    init_ensemble,
    init_purpose_models,
    make_breakdown,
    purpose_reward,
    purpose_training_step,
)
from .perception import DetectorConfig, SceneDescription, detect_oracle
from .purpose import ResolvedPurpose
from .replay import ReplayBuffer, Transition
from .sim import ActionCmd, StepInfo, Vec3, World

NEUTRAL_EE = Vec3(0.0, 0.0, 0.2)

GOAL_POSTURE = "posture"
GOAL_REACHING = "reaching"
GOAL_PUSHING = "pushing"
GOAL_PICKPLACE = "pickplace"
GOAL_TYPES = (GOAL_POSTURE, GOAL_REACHING, GOAL_PUSHING, GOAL_PICKPLACE)


class Condition(enum.Enum):
    POEL = "poel"
    LEXA_STAR = "lexa"
    ALAN_STAR = "alan"


@dataclass(frozen=True)
class PlannerConfig:
    """Sampling-based MPC settings. init_radius must exceed the world's
    grasp radius (checked at episode start, where both are in scope)."""

    candidates: int = 128
    horizon: int = 12
    iterations: int = 3
    elite_frac: float = 0.1
    action_noise_std: float = 0.01
    init_radius: float = 0.10
    init_z: tuple[float, float] = (0.05, 0.15)
    sample_std: float = 0.04
    min_sample_std: float = 1e-3
    held_bonus: float = 0.2

    def __post_init__(self):
        if self.candidates < 1 or self.horizon < 1 or self.iterations < 1:
            raise ValueError("candidates, horizon, iterations must be >= 1")
        if not 0.0 < self.elite_frac <= 1.0:
            raise ValueError("elite_frac must be in (0, 1]")
        if self.action_noise_std < 0 or self.init_radius <= 0:
            raise ValueError("action_noise_std >= 0 and init_radius > 0 required")
        if not self.init_z[0] <= self.init_z[1]:
            raise ValueError("init_z bounds out of order")


@dataclass(frozen=True)
class GoalSpec:
    goal_id: str
    goal_type: str
    tolerance: float
    target_object: str | None = None
    target_position: Vec3 | None = None
    target_box: str | None = None

    def __post_init__(self):
        if self.goal_type not in GOAL_TYPES:
            raise ValueError(f"unknown goal type {self.goal_type!r}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        needs_object = self.goal_type in (GOAL_REACHING, GOAL_PUSHING, GOAL_PICKPLACE)
        if needs_object and self.target_object is None:
            raise ValueError(f"{self.goal_type} goal needs target_object")
        if self.goal_type in (GOAL_POSTURE, GOAL_PUSHING) and self.target_position is None:
            raise ValueError(f"{self.goal_type} goal needs target_position")
        if self.goal_type == GOAL_PICKPLACE and self.target_box is None:
            raise ValueError("pickplace goal needs target_box")


@dataclass
class AgentModels:
    """Everything trainable for one run, in one place."""

    layout: FeatureLayout
    object_ids: tuple[str, ...]
    ensemble: EnsembleModel
    purpose: PurposeModels
    disagree_norm: RunningNorm
    change_norm: RunningNorm


def init_agent_models(
    world: World,
    rng: np.random.Generator,
    k: int = ENSEMBLE_SIZE,
    dtype=np.float32,
) -> AgentModels:
    """Fixed draw order: ensemble members first, then classifiers."""
    layout = FeatureLayout(n_objects=len(world.config.cube_colors))
    return AgentModels(
        layout=layout,
        object_ids=world.object_ids(),
        ensemble=init_ensemble(layout, rng, k=k, dtype=dtype),
        purpose=init_purpose_models(layout, rng, dtype=dtype),
        disagree_norm=RunningNorm(),
        change_norm=RunningNorm(),
    )


# ---- episode initialization --------------------------------------------------


def initial_ee_position(
    condition: Condition,
    scene: SceneDescription,
    resolved: ResolvedPurpose | None,
    rng: np.random.Generator,
    world: World,
    cfg: PlannerConfig,
) -> Vec3:
    """Condition-specific start: POEL near a relevant object, ALAN* near
    any detected object, LEXA* (and every fallback) workspace-uniform."""
    if condition is Condition.POEL and resolved is not None:
        pool = [d for d in scene.detections if d.id in resolved.relevant_ids]
    elif condition is Condition.ALAN_STAR:
        pool = list(scene.detections)
    else:
        pool = []
    if pool:
        anchor = pool[int(rng.integers(len(pool)))].position
        angle = rng.uniform(0.0, 2.0 * np.pi)
        radius = cfg.init_radius * np.sqrt(rng.uniform())
        point = Vec3(
            anchor.x + radius * np.cos(angle),
            anchor.y + radius * np.sin(angle),
            rng.uniform(*cfg.init_z),
        )
        # Clamping can only move the point toward the anchor's coordinate,
        # so the within-radius invariant survives at the walls.
        return world.clamp_to_workspace(point)
    c = world.config
    return Vec3(
        rng.uniform(*c.x_bounds), rng.uniform(*c.y_bounds), rng.uniform(*c.z_bounds)
    )


def env_change_reward(info: StepInfo) -> float:
    """Total object displacement this step; ee motion is excluded by
    construction because only object positions enter."""
    return float(sum(info.displacements))


# ---- imagination -------------------------------------------------------------


def imagine(
    ensemble: EnsembleModel, state_features: np.ndarray, actions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Roll candidate action sequences through the ensemble-mean model.

    actions is (M, H, action_dim); returns imagined states (M, H, state_dim)
    and raw per-step disagreement (M, H).
    """
    dtype = ensemble.weights[0].dtype
    m, horizon, _ = actions.shape
    state_dim = state_features.shape[0]
    cur = np.repeat(state_features[None, :].astype(dtype), m, axis=0)
    states = np.empty((m, horizon, state_dim), dtype=dtype)
    raws = np.empty((m, horizon), dtype=dtype)
    acts = actions.astype(dtype)
    for h in range(horizon):
        x = np.concatenate([cur, acts[:, h]], axis=1)
        preds = ensemble_forward(ensemble, x)  # (K, M, state_dim)
        cur = cur + preds.mean(axis=0)
        raws[:, h] = preds.var(axis=0).mean(axis=-1)
        states[:, h] = cur
    return states, raws


def _explore_returns(
    models: AgentModels,
    condition: Condition,
    initial: np.ndarray,
    states: np.ndarray,
    raws: np.ndarray,
) -> np.ndarray:
    """Sum of per-imagined-step rewards for each candidate (M,). Uses the
    running norms read-only; only realized steps update statistics."""
    if condition is Condition.ALAN_STAR:
        prev = np.concatenate(
            [np.repeat(initial[None, None, :], states.shape[0], axis=0), states[:, :-1]],
            axis=1,
        )
        layout = models.layout
        moved = layout.object_positions_of(states) - layout.object_positions_of(prev)
        change = np.linalg.norm(moved, axis=-1).sum(axis=-1)  # (M, H)
        return models.change_norm.transform(change).sum(axis=1)
    r_disagree = models.disagree_norm.transform(raws)
    if condition is Condition.LEXA_STAR:
        return r_disagree.sum(axis=1)
    r_prox = classifier_decisions(models.purpose.proximity, states)
    r_lift = classifier_decisions(models.purpose.lifting, states)
    return ((r_disagree + r_prox + r_lift) / 3.0).sum(axis=1)


# ---- cross-entropy planning ----------------------------------------------------


def cem_plan(
    score_fn,
    cfg: PlannerConfig,
    rng: np.random.Generator,
    delta_limit: float,
    init_mean: np.ndarray | None = None,
) -> np.ndarray:
    """Sample M sequences of H actions, iteratively refit the sampling
    distribution to the top elite_frac by score, and return the
    best-ever sequence (H, 4). Draw counts per iteration are fixed, so
    stream consumption is data-independent. init_mean (H, 3) seeds the
    first iteration's delta means (zeros when omitted)."""
    h = cfg.horizon
    mean = np.zeros((h, 3)) if init_mean is None else np.asarray(init_mean, dtype=np.float64)
    std = np.full((h, 3), cfg.sample_std)
    p_grip = np.full(h, 0.5)
    best_seq = None
    best_return = -np.inf
    n_elite = max(1, int(cfg.candidates * cfg.elite_frac))
    for _ in range(cfg.iterations):
        deltas = rng.normal(mean, std, size=(cfg.candidates, h, 3))
        np.clip(deltas, -delta_limit, delta_limit, out=deltas)
        grips = (rng.random((cfg.candidates, h)) < p_grip).astype(np.float64)
        actions = np.concatenate([deltas, grips[:, :, None]], axis=2)
        returns = np.asarray(score_fn(actions), dtype=np.float64)
        top = int(np.argmax(returns))
        if returns[top] > best_return:
            best_return = float(returns[top])
            best_seq = actions[top].copy()
        elite_idx = np.argpartition(returns, -n_elite)[-n_elite:]
        elite = actions[elite_idx]
        mean = elite[:, :, :3].mean(axis=0)
        std = np.maximum(elite[:, :, :3].std(axis=0), cfg.min_sample_std)
        p_grip = elite[:, :, 3].mean(axis=0)
    return best_seq


def plan_explore(
    models: AgentModels,
    state_features: np.ndarray,
    condition: Condition,
    cfg: PlannerConfig,
    rng: np.random.Generator,
    world: World,
) -> ActionCmd:
    """One MPC step of the exploration policy; the returned first action
    carries Gaussian exploration noise on the deltas."""
    initial = state_features.astype(models.ensemble.weights[0].dtype)

    def score(actions):
        states, raws = imagine(models.ensemble, state_features, actions)
        return _explore_returns(models, condition, initial, states, raws)

    limit = world.config.delta_limit
    seq = cem_plan(score, cfg, rng, limit)
    first = seq[0].astype(np.float64)
    first[:3] = np.clip(
        first[:3] + rng.normal(0.0, cfg.action_noise_std, size=3), -limit, limit
    )
    return models.layout.action_from_array(first)


def _achieve_returns(
    models: AgentModels,
    world: World,
    goal: GoalSpec,
    cfg: PlannerConfig,
    states: np.ndarray,
) -> np.ndarray:
    layout = models.layout
    terminal = states[:, -1]
    if goal.goal_type == GOAL_POSTURE:
        target = np.asarray(goal.target_position)
        return -np.linalg.norm(layout.ee_of(terminal) - target, axis=-1)
    obj_idx = models.object_ids.index(goal.target_object)
    obj_terminal = layout.object_positions_of(terminal)[:, obj_idx]
    if goal.goal_type == GOAL_REACHING:
        return -np.linalg.norm(layout.ee_of(terminal) - obj_terminal, axis=-1)
    if goal.goal_type == GOAL_PUSHING:
        target = np.asarray(goal.target_position)[:2]
        return -np.linalg.norm(obj_terminal[:, :2] - target, axis=-1)
    # Pick-and-place: terminal horizontal distance to the box center,
    # plus a staged bonus — holding pays while the object is outside the
    # box footprint, releasing pays once it is inside (pure terminal
    # distance gives no grasp gradient, and a flat held bonus would make
    # the planner hold forever).
    center = world.box_center(goal.target_box)
    obj_traj = layout.object_positions_of(states)[:, :, obj_idx]  # (M, H, 3)
    dist = np.linalg.norm(obj_traj[:, -1, :2] - np.array([center.x, center.y]), axis=-1)
    (x0, x1), (y0, y1) = world.box_region(goal.target_box)
    inside = (
        (obj_traj[..., 0] >= x0)
        & (obj_traj[..., 0] <= x1)
        & (obj_traj[..., 1] >= y0)
        & (obj_traj[..., 1] <= y1)
    )
    held = layout.held_of(states)[..., obj_idx] > 0.5
    staged = np.where(inside, ~held, held).sum(axis=1) * cfg.held_bonus
    return -dist + staged


def _goal_anchor(
    models: AgentModels, state_features: np.ndarray, goal: GoalSpec
) -> np.ndarray:
    """Point the achieve planner's initial sampling mean heads for: the
    target pose, or the goal object. Never the box — steering a held
    cube is left entirely to the imagined-rollout scores, so an agent
    whose model never saw a cube move gets no transport for free."""
    if goal.goal_type == GOAL_POSTURE:
        return np.asarray(goal.target_position, dtype=np.float64)
    obj_idx = models.object_ids.index(goal.target_object)
    return models.layout.object_positions_of(state_features[None])[0, obj_idx].astype(
        np.float64
    )


def _straight_line_mean(
    anchor: np.ndarray, ee: np.ndarray, horizon: int, delta_limit: float
) -> np.ndarray:
    """(H, 3) delta means walking straight to the anchor, then stopping."""
    means = np.zeros((horizon, 3))
    pos = ee.astype(np.float64)
    for h in range(horizon):
        step = np.clip(anchor - pos, -delta_limit, delta_limit)
        means[h] = step
        pos = pos + step
    return means


def plan_achieve(
    models: AgentModels,
    state_features: np.ndarray,
    goal: GoalSpec,
    cfg: PlannerConfig,
    rng: np.random.Generator,
    world: World,
) -> ActionCmd:
    """Goal-conditioned MPC step, scored by terminal goal distance.

    The first CEM iteration samples around a straight line toward the
    goal's anchor (target pose or target object): without it the
    terminal objective is flat until imagined contact, and random
    shooting never closes a 0.3 m approach inside the horizon. Elite
    refits are free to abandon the line.
    """
    if goal.target_object is not None and goal.target_object not in models.object_ids:
        raise KeyError(f"goal references unknown object {goal.target_object!r}")

    def score(actions):
        states, _ = imagine(models.ensemble, state_features, actions)
        return _achieve_returns(models, world, goal, cfg, states)

    anchor = _goal_anchor(models, state_features, goal)
    init_mean = _straight_line_mean(
        anchor, models.layout.ee_of(state_features[None])[0], cfg.horizon,
        world.config.delta_limit,
    )
    seq = cem_plan(score, cfg, rng, world.config.delta_limit, init_mean=init_mean)
    return models.layout.action_from_array(seq[0])


# ---- exploration episodes -------------------------------------------------------


@dataclass
class EpisodeLog:
    condition: Condition
    episode: int
    breakdowns: list[RewardBreakdown] = field(default_factory=list)
    lift_events: int = 0
    grasp_events: int = 0
    push_events: int = 0
    start: Vec3 = NEUTRAL_EE


def run_exploration_episode(
    world: World,
    buffer: ReplayBuffer,
    models: AgentModels,
    condition: Condition,
    resolved: ResolvedPurpose | None,
    cfg: PlannerConfig,
    rng: np.random.Generator,
    episode_index: int = 0,
    detector: DetectorConfig = DetectorConfig(),
    tracked_ids=None,
    train: bool = True,
    model_lr: float = LEARNING_RATE,
    classifier_lr: float = CLASSIFIER_LEARNING_RATE,
    batch_size: int = BATCH_SIZE,
) -> EpisodeLog:
    """One exploration episode: biased reset, plan/step loop, replay
    pushes, realized-reward logging, and on-schedule training (one batch
    per ensemble member per step, one classifier batch per step for
    POEL, once the buffer can fill a batch)."""
    if condition is Condition.POEL and resolved is None:
        raise ValueError("POEL requires a resolved purpose")
    if cfg.init_radius <= world.config.grasp_radius:
        raise ValueError("init_radius must exceed the grasp radius")
    layout = models.layout
    state = world.reset(rng, init_ee=NEUTRAL_EE)
    scene = detect_oracle(state, world, detector, rng)
    start = initial_ee_position(condition, scene, resolved, rng, world, cfg)
    state = world.move_ee(state, start)
    heights = np.array(state.initial_heights)
    relevant = sorted(resolved.relevant_ids) if resolved is not None else []
    tracked = tuple(sorted(tracked_ids)) if tracked_ids is not None else tuple(relevant)
    lifted_prev = {oid: world.predicate_lifted(state, oid) for oid in tracked}
    log = EpisodeLog(condition=condition, episode=episode_index, start=start)

    for _ in range(world.config.episode_length):
        features = layout.featurize_state(state)
        action = plan_explore(models, features, condition, cfg, rng, world)
        next_state, info = world.step(state, action)
        next_features = layout.featurize_state(next_state)
        action_features = layout.featurize_action(action)

        _, raw = ensemble_predict(models.ensemble, features, action_features)
        if condition is Condition.ALAN_STAR:
            # Same normalization mechanism, applied to realized change;
            # the breakdown's intrinsic slot carries it.
            r_intrinsic = disagreement_reward(env_change_reward(info), models.change_norm)
            breakdown = make_breakdown(r_intrinsic, 0, 0)
        else:
            r_disagree = disagreement_reward(raw, models.disagree_norm)
            if condition is Condition.POEL:
                r_prox, r_lift = purpose_reward(models.purpose, next_features)
                breakdown = make_breakdown(r_disagree, r_prox, r_lift)
            else:
                breakdown = make_breakdown(r_disagree, 0, 0)
        log.breakdowns.append(breakdown)

        pushed_mask = 0
        for oid in info.pushed_ids:
            pushed_mask |= 1 << next_state.object_index(oid)
        buffer.push(
            Transition(
                state=features,
                action=action_features,
                next_state=next_features,
                episode=episode_index,
                grasped=-1 if info.grasped_id is None else next_state.object_index(info.grasped_id),
                released=-1 if info.released_id is None else next_state.object_index(info.released_id),
                pushed_mask=pushed_mask,
                displacements=np.array(info.displacements),
                initial_heights=heights,
            )
        )

        if train and buffer.size >= batch_size:
            dtype = models.ensemble.weights[0].dtype
            for k in range(models.ensemble.k):
                batch = buffer.sample_arrays(batch_size, rng)
                inputs = np.concatenate([batch["state"], batch["action"]], axis=1)
                targets = batch["next_state"] - batch["state"]
                ensemble_train_member(
                    models.ensemble, k, inputs.astype(dtype), targets.astype(dtype), model_lr
                )
            if condition is Condition.POEL:
                batch = buffer.sample_arrays(batch_size, rng)
                purpose_training_step(
                    models.purpose,
                    layout,
                    models.object_ids,
                    batch["next_state"],
                    batch["initial_heights"],
                    relevant,
                    classifier_lr,
                )

        log.grasp_events += int(info.grasped_id is not None)
        log.push_events += len(info.pushed_ids)
        for oid in tracked:
            lifted_now = world.predicate_lifted(next_state, oid)
            if lifted_now and not lifted_prev[oid]:
                log.lift_events += 1
            lifted_prev[oid] = lifted_now
        state = next_state
    return log
