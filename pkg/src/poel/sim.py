"""Deterministic desk-scale tabletop world.

A point end effector with a binary gripper moves over a table carrying
three colored cubes and two open boxes.  Dynamics are kinematic and
exactly reproducible: moving is a clamped Cartesian delta, grasping is
attachment of the nearest cube within reach, releasing drops the cube
straight down to its rest height, and sweeping the end effector into a
cube at low height pushes the cube away.

All transitions are pure ``(state, action) -> (state, info)`` functions
of a :class:`World`; the class itself holds only immutable geometry, so
any number of trajectories can be run concurrently from one instance.

World rules worth knowing before reading the code:

* A push is triggered only when the end effector *enters* a cube's
  horizontal footprint (outside before the move, inside after) while
  below ``push_height``.  Descending vertically onto a cube therefore
  never pushes it, which is what makes grasping possible at all.
* A pushed cube is placed just outside ``PUSH_CLEARANCE`` of the end
  effector.  If that spot would leave the workspace or cross a box
  wall, the push is blocked and the cube stays put.
* Boxes have a raised floor: a cube resting inside a box sits at
  ``box_floor + cube_half`` instead of ``cube_half``.  The only way
  into (or out of) a box is being carried.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

# Minimum horizontal distance between a pushed cube's center and the end
# effector after the push resolves.
PUSH_CLEARANCE = 0.05

# Purpose predicate thresholds: end effector within 15 cm of a relevant
# object, and an object raised at least 5 cm above its start height.
PROXIMITY_RADIUS = 0.15
LIFT_DELTA = 0.05

GRIP_OPEN = "open"
GRIP_CLOSE = "close"

TABLE_REGION = "table"
BOX_A = "box-a"
BOX_B = "box-b"


class BoundsError(ValueError):
    """A requested position lies outside the workspace."""


class UnknownIdError(KeyError):
    """An object or box id does not exist in this world."""


class LayoutError(ValueError):
    """A configured object layout violates placement rules."""


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    def dist(self, other: "Vec3") -> float:
        return math.sqrt(
            (self.x - other.x) ** 2
            + (self.y - other.y) ** 2
            + (self.z - other.z) ** 2
        )

    def dist_xy(self, other: "Vec3") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class WorldConfig:
    """Geometry and episode parameters of the desk world (meters)."""

    x_bounds: tuple[float, float] = (-0.6, 0.6)
    y_bounds: tuple[float, float] = (-0.6, 0.6)
    z_bounds: tuple[float, float] = (0.0, 0.6)
    cube_half: float = 0.025
    cube_colors: tuple[str, ...] = ("red", "green", "blue")
    # Box regions as ((x0, x1), (y0, y1)).
    box_a: tuple[tuple[float, float], tuple[float, float]] = ((0.35, 0.55), (0.35, 0.55))
    box_b: tuple[tuple[float, float], tuple[float, float]] = ((0.35, 0.55), (-0.55, -0.35))
    box_floor: float = 0.02
    grasp_radius: float = 0.04
    push_height: float = 0.06
    delta_limit: float = 0.05
    episode_length: int = 100
    # Fixed start layout as (x, y) per color, or None to randomize on reset.
    object_xy: Optional[tuple[tuple[float, float], ...]] = (
        (-0.30, 0.20),
        (0.20, 0.30),
        (0.15, -0.30),
    )

    def __post_init__(self):
        if self.cube_half <= 0:
            raise ValueError("cube_half must be positive")
        if not self.grasp_radius < 2 * self.delta_limit:
            raise ValueError("grasp_radius must be below twice the delta limit")
        for region in (self.box_a, self.box_b):
            (x0, x1), (y0, y1) = region
            if not (self.x_bounds[0] <= x0 < x1 <= self.x_bounds[1]):
                raise ValueError("box region outside workspace (x)")
            if not (self.y_bounds[0] <= y0 < y1 <= self.y_bounds[1]):
                raise ValueError("box region outside workspace (y)")
        if _regions_overlap(self.box_a, self.box_b):
            raise ValueError("box regions must be disjoint")
        if self.object_xy is not None and len(self.object_xy) != len(self.cube_colors):
            raise ValueError("object_xy must list one position per cube")


def _regions_overlap(a, b) -> bool:
    (ax0, ax1), (ay0, ay1) = a
    (bx0, bx1), (by0, by1) = b
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


@dataclass(frozen=True)
class ObjectState:
    id: str
    color: str
    position: Vec3


@dataclass(frozen=True)
class SimState:
    """Full ground-truth world state at one step."""

    ee: Vec3
    gripper_closed: bool
    objects: tuple[ObjectState, ...]
    held: Optional[str]
    step_index: int
    initial_heights: tuple[float, ...]

    def object_index(self, object_id: str) -> int:
        for i, obj in enumerate(self.objects):
            if obj.id == object_id:
                return i
        raise UnknownIdError(object_id)

    def object(self, object_id: str) -> ObjectState:
        return self.objects[self.object_index(object_id)]


@dataclass(frozen=True)
class ActionCmd:
    """Bounded Cartesian end-effector delta plus a gripper command."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    grip: str = GRIP_OPEN

    def __post_init__(self):
        if self.grip not in (GRIP_OPEN, GRIP_CLOSE):
            raise ValueError(f"grip must be '{GRIP_OPEN}' or '{GRIP_CLOSE}'")


@dataclass(frozen=True)
class StepInfo:
    """What happened during one step, for reward shaping and logs."""

    pushed_ids: tuple[str, ...] = ()
    grasped_id: Optional[str] = None
    released_id: Optional[str] = None
    # Per-object displacement magnitude this step, aligned with state.objects.
    displacements: tuple[float, ...] = ()


def _clip(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


class World:
    """Pure transition functions over :class:`WorldConfig` geometry."""

    def __init__(self, config: WorldConfig | None = None):
        self.config = config or WorldConfig()

    # ------------------------------------------------------------ geometry
    def in_workspace(self, p: Vec3) -> bool:
        c = self.config
        return (
            c.x_bounds[0] <= p.x <= c.x_bounds[1]
            and c.y_bounds[0] <= p.y <= c.y_bounds[1]
            and c.z_bounds[0] <= p.z <= c.z_bounds[1]
        )

    def clamp_to_workspace(self, p: Vec3) -> Vec3:
        c = self.config
        return Vec3(
            _clip(p.x, *c.x_bounds),
            _clip(p.y, *c.y_bounds),
            _clip(p.z, *c.z_bounds),
        )

    def box_region(self, box_id: str):
        if box_id == BOX_A:
            return self.config.box_a
        if box_id == BOX_B:
            return self.config.box_b
        raise UnknownIdError(box_id)

    def box_center(self, box_id: str) -> Vec3:
        (x0, x1), (y0, y1) = self.box_region(box_id)
        return Vec3((x0 + x1) / 2.0, (y0 + y1) / 2.0, self.config.box_floor)

    def region_of(self, x: float, y: float) -> str:
        for box_id in (BOX_A, BOX_B):
            (x0, x1), (y0, y1) = self.box_region(box_id)
            if x0 <= x <= x1 and y0 <= y <= y1:
                return box_id
        return TABLE_REGION

    def rest_height(self, region: str) -> float:
        c = self.config
        if region == TABLE_REGION:
            return c.cube_half
        return c.box_floor + c.cube_half

    def object_ids(self) -> tuple[str, ...]:
        """Cube ids in state order (fixed by the configured color list)."""
        return tuple(f"cube-{color}" for color in self.config.cube_colors)

    # --------------------------------------------------------------- reset
    def place_objects(self, rng: np.random.Generator) -> tuple[ObjectState, ...]:
        """Draw a valid random table layout: in bounds, outside boxes,
        footprints non-overlapping."""
        c = self.config
        placed: list[tuple[float, float]] = []
        objects = []
        for color in c.cube_colors:
            for _ in range(10_000):
                x = rng.uniform(c.x_bounds[0] + c.cube_half, c.x_bounds[1] - c.cube_half)
                y = rng.uniform(c.y_bounds[0] + c.cube_half, c.y_bounds[1] - c.cube_half)
                if self.region_of(x, y) != TABLE_REGION:
                    continue
                if any(
                    abs(x - px) < 2 * c.cube_half and abs(y - py) < 2 * c.cube_half
                    for px, py in placed
                ):
                    continue
                placed.append((x, y))
                objects.append(
                    ObjectState(f"cube-{color}", color, Vec3(x, y, c.cube_half))
                )
                break
            else:
                raise LayoutError("could not place objects without overlap")
        return tuple(objects)

    def fixed_objects(self) -> tuple[ObjectState, ...]:
        c = self.config
        assert c.object_xy is not None
        objects = []
        for color, (x, y) in zip(c.cube_colors, c.object_xy):
            if not (c.x_bounds[0] <= x <= c.x_bounds[1] and c.y_bounds[0] <= y <= c.y_bounds[1]):
                raise LayoutError(f"cube-{color} start outside workspace")
            if self.region_of(x, y) != TABLE_REGION:
                raise LayoutError(f"cube-{color} start inside a box")
            objects.append(ObjectState(f"cube-{color}", color, Vec3(x, y, c.cube_half)))
        for i, a in enumerate(objects):
            for b in objects[:i]:
                if (
                    abs(a.position.x - b.position.x) < 2 * c.cube_half
                    and abs(a.position.y - b.position.y) < 2 * c.cube_half
                ):
                    raise LayoutError(f"{a.id} and {b.id} footprints overlap")
        return tuple(objects)

    def reset(
        self,
        rng: np.random.Generator | int | None,
        init_ee: Vec3,
        object_xy: Sequence[tuple[float, float]] | None = None,
    ) -> SimState:
        """Start an episode.

        Objects are placed at ``object_xy`` if given, else at the
        configured fixed layout, else seeded-random.  ``init_ee`` must be
        inside the workspace.
        """
        if not self.in_workspace(init_ee):
            raise BoundsError(f"init_ee {tuple(init_ee)} outside workspace")
        if object_xy is not None:
            cfg = replace(self.config, object_xy=tuple(tuple(p) for p in object_xy))
            objects = World(cfg).fixed_objects()
        elif self.config.object_xy is not None:
            objects = self.fixed_objects()
        else:
            if not isinstance(rng, np.random.Generator):
                rng = np.random.default_rng(rng)
            objects = self.place_objects(rng)
        return SimState(
            ee=init_ee,
            gripper_closed=False,
            objects=objects,
            held=None,
            step_index=0,
            initial_heights=tuple(o.position.z for o in objects),
        )

    def move_ee(self, state: SimState, ee: Vec3) -> SimState:
        """Teleport the end effector (used once, before the first step,
        to apply a condition's biased start).  Held objects follow."""
        if not self.in_workspace(ee):
            raise BoundsError(f"ee {tuple(ee)} outside workspace")
        objects = state.objects
        if state.held is not None:
            idx = state.object_index(state.held)
            objects = tuple(
                replace(o, position=ee) if i == idx else o
                for i, o in enumerate(objects)
            )
        return replace(state, ee=ee, objects=objects)

    # ---------------------------------------------------------------- step
    def step(self, state: SimState, action: ActionCmd) -> tuple[SimState, StepInfo]:
        """Advance one step.

        Order of resolution: the end effector moves by the clamped delta
        and is clamped to the workspace; the gripper command is applied
        (grasp nearest cube within ``grasp_radius`` on close, drop to
        rest height on open); finally, if nothing is held, cubes whose
        footprint the end effector entered below ``push_height`` are
        displaced to ``PUSH_CLEARANCE``, unless blocked by a wall.
        """
        c = self.config
        prev_ee = state.ee
        new_ee = self.clamp_to_workspace(
            Vec3(
                prev_ee.x + _clip(action.dx, -c.delta_limit, c.delta_limit),
                prev_ee.y + _clip(action.dy, -c.delta_limit, c.delta_limit),
                prev_ee.z + _clip(action.dz, -c.delta_limit, c.delta_limit),
            )
        )

        start_positions = [o.position for o in state.objects]
        positions = list(start_positions)
        held = state.held
        grasped_id = None
        released_id = None
        pushed: list[str] = []

        if action.grip == GRIP_CLOSE:
            if held is None:
                best_i, best_d = -1, float("inf")
                for i, pos in enumerate(positions):
                    d = pos.dist(new_ee)
                    if d <= c.grasp_radius and d < best_d:
                        best_i, best_d = i, d
                if best_i >= 0:
                    held = state.objects[best_i].id
                    grasped_id = held
            if held is not None:
                positions[state.object_index(held)] = new_ee
        else:
            if held is not None:
                idx = state.object_index(held)
                region = self.region_of(new_ee.x, new_ee.y)
                positions[idx] = Vec3(new_ee.x, new_ee.y, self.rest_height(region))
                released_id = held
                held = None

        if held is None:
            for i, obj in enumerate(state.objects):
                start = start_positions[i]
                if new_ee.z >= c.push_height:
                    continue
                inside_before = (
                    abs(prev_ee.x - start.x) <= c.cube_half
                    and abs(prev_ee.y - start.y) <= c.cube_half
                )
                inside_after = (
                    abs(new_ee.x - start.x) <= c.cube_half
                    and abs(new_ee.y - start.y) <= c.cube_half
                )
                if inside_before or not inside_after:
                    continue
                new_xy = self._resolve_push(new_ee, prev_ee, positions[i])
                if new_xy is not None:
                    positions[i] = Vec3(new_xy[0], new_xy[1], positions[i].z)
                    pushed.append(obj.id)

        objects = tuple(
            replace(o, position=p) for o, p in zip(state.objects, positions)
        )
        displacements = tuple(
            p.dist(s) for p, s in zip(positions, start_positions)
        )
        next_state = SimState(
            ee=new_ee,
            gripper_closed=action.grip == GRIP_CLOSE,
            objects=objects,
            held=held,
            step_index=state.step_index + 1,
            initial_heights=state.initial_heights,
        )
        info = StepInfo(
            pushed_ids=tuple(pushed),
            grasped_id=grasped_id,
            released_id=released_id,
            displacements=displacements,
        )
        return next_state, info

    def _resolve_push(self, ee: Vec3, prev_ee: Vec3, obj: Vec3):
        """Target spot for a pushed cube, or None if the push is blocked.

        The cube lands PUSH_CLEARANCE from the end effector along the
        ee->cube direction; the push is blocked if that spot (clamped to
        the workspace) violates the clearance or crosses a box wall.
        """
        c = self.config
        dx, dy = obj.x - ee.x, obj.y - ee.y
        norm = math.hypot(dx, dy)
        if norm < 1e-12:
            dx, dy = ee.x - prev_ee.x, ee.y - prev_ee.y
            norm = math.hypot(dx, dy)
            if norm < 1e-12:
                dx, dy, norm = 1.0, 0.0, 1.0
        ux, uy = dx / norm, dy / norm
        px = _clip(ee.x + ux * PUSH_CLEARANCE, *c.x_bounds)
        py = _clip(ee.y + uy * PUSH_CLEARANCE, *c.y_bounds)
        if math.hypot(px - ee.x, py - ee.y) < PUSH_CLEARANCE - 1e-12:
            return None
        if self.region_of(px, py) != self.region_of(obj.x, obj.y):
            return None
        return px, py

    # ---------------------------------------------------------- predicates
    def predicate_proximity(self, state: SimState, object_id: str) -> bool:
        """End effector strictly within 0.15 m of the object center."""
        obj = state.object(object_id)
        return state.ee.dist(obj.position) < PROXIMITY_RADIUS

    def predicate_lifted(self, state: SimState, object_id: str) -> bool:
        """Object raised at least 0.05 m above its episode-start height.

        The boundary is inclusive; a 1e-12 slack absorbs float
        representation error so an exact 5 cm raise counts.
        """
        idx = state.object_index(object_id)
        delta = state.objects[idx].position.z - state.initial_heights[idx]
        return delta >= LIFT_DELTA - 1e-12

    def in_box(self, state: SimState, object_id: str, box_id: str) -> bool:
        """Object resting on the floor of the given box."""
        obj = state.object(object_id)
        (x0, x1), (y0, y1) = self.box_region(box_id)
        if not (x0 <= obj.position.x <= x1 and y0 <= obj.position.y <= y1):
            return False
        return abs(obj.position.z - self.rest_height(box_id)) < 1e-9
