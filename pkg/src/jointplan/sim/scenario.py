"""Scenario description, built-in scenarios, and loading from config files."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from jointplan.errors import ConfigurationError
from jointplan.geometry import BoundingBox, Lane, Polyline
from jointplan.sim.agents import AgentBehavior
from jointplan.trajectory import KinematicState

LANE_WIDTH = 3.5
CAR = BoundingBox(4.5, 2.0)


@dataclass(frozen=True, eq=False)
class ScriptedAgent:
    state: KinematicState
    box: BoundingBox
    behavior: AgentBehavior
    lane: int  # index into Scenario.lanes


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    lanes: tuple
    route: Polyline
    goal: tuple  # (x, y)
    goal_radius: float
    ego_init: KinematicState
    ego_box: BoundingBox
    agents: tuple
    time_budget: float
    seed: int = 0
    speed_limit: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "agents", tuple(self.agents))
        if not self.lanes:
            raise ConfigurationError(f"scenario {self.name!r} has no lanes")
        if not self.time_budget > 0 or not self.goal_radius > 0:
            raise ConfigurationError("time_budget and goal_radius must be positive")
        ego = np.array([[self.ego_init.x, self.ego_init.y]])
        if not any(abs(l.centerline.project(ego)[3][0]) <= l.half_width for l in self.lanes):
            raise ConfigurationError(f"scenario {self.name!r}: ego does not start on a lane")
        if self.route.distance(np.array([self.goal]))[0] > self.goal_radius:
            raise ConfigurationError(f"scenario {self.name!r}: goal is not on the route")
        for a in self.agents:
            if not 0 <= a.lane < len(self.lanes):
                raise ConfigurationError(f"agent lane index {a.lane} out of range")


def _straight(y: float, x0: float = 0.0, x1: float = 150.0) -> Polyline:
    return Polyline(np.array([[x0, y], [x1, y]]))


def _two_lanes(x0: float = -120.0, length: float = 220.0):
    return (Lane(_straight(0.0, x0, x0 + length), LANE_WIDTH), Lane(_straight(LANE_WIDTH, x0, x0 + length), LANE_WIDTH))


def dense_merge(seed: int = 0, time_budget: float = 20.0, n_agents: int = 6, ego_speed: float = 4.0,
                leader_distance: float = 80.0) -> Scenario:
    """Ego driving toward a stopped car in the right lane, must merge into a dense left-lane platoon."""
    rng = np.random.default_rng(seed)
    lanes = _two_lanes()
    ego = KinematicState(0.0, 0.0, 0.0, ego_speed)
    leader = ScriptedAgent(KinematicState(leader_distance, 0.0, 0.0, 0.0), CAR, AgentBehavior(desired_speed=0.0), 0)
    agents = [leader]
    x = ego.x + float(rng.uniform(-4.0, 10.0))
    for _ in range(n_agents):
        v = float(rng.uniform(5.0, 9.0))
        agents.append(ScriptedAgent(KinematicState(x, LANE_WIDTH, 0.0, v), CAR, AgentBehavior(desired_speed=v), 1))
        x -= float(rng.uniform(12.0, 18.0))
    return Scenario("dense_merge", lanes, lanes[1].centerline, (90.0, LANE_WIDTH), 4.0, ego, CAR,
                    tuple(agents), time_budget, seed)


def empty_road(seed: int = 0, time_budget: float = 20.0) -> Scenario:
    lanes = _two_lanes()
    ego = KinematicState(-30.0, 0.0, 0.0, 5.0)
    return Scenario("empty_road", lanes, lanes[0].centerline, (60.0, 0.0), 4.0, ego, CAR, (), time_budget, seed)


def boxed_in(seed: int = 0, time_budget: float = 6.0) -> Scenario:
    """Ego at walking pace with stopped cars ahead, beside, and behind: nowhere to go."""
    lanes = _two_lanes()
    ego = KinematicState(30.0, 0.0, 0.0, 1.0)
    parked = AgentBehavior(desired_speed=0.0)
    spots = [(38.0, 0.0), (22.0, 0.0), (30.0, LANE_WIDTH), (38.0, LANE_WIDTH), (22.0, LANE_WIDTH)]
    agents = tuple(ScriptedAgent(KinematicState(x, y, 0.0, 0.0), CAR, parked, int(y > 0)) for x, y in spots)
    return Scenario("boxed_in", lanes, lanes[0].centerline, (90.0, 0.0), 4.0, ego, CAR, agents, time_budget, seed)


BUILTINS = {"dense_merge": dense_merge, "empty_road": empty_road, "boxed_in": boxed_in}


def builtin(name: str, seed: int = 0, **kw) -> Scenario:
    if name not in BUILTINS:
        raise ConfigurationError(f"unknown scenario {name!r}; built-ins: {sorted(BUILTINS)}")
    try:
        return BUILTINS[name](seed=seed, **kw)
    except TypeError as e:
        raise ConfigurationError(f"bad parameters for scenario {name!r}: {e}") from None


def _state(d) -> KinematicState:
    try:
        return KinematicState(float(d["x"]), float(d["y"]), float(d.get("heading", 0.0)), float(d.get("speed", 0.0)))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"bad state entry {d!r}: {e}") from None


def _box(d) -> BoundingBox:
    if d is None:
        return CAR
    return BoundingBox(float(d.get("length", CAR.length)), float(d.get("width", CAR.width)))


def scenario_from_dict(d: dict, seed: int | None = None) -> Scenario:
    """Either ``{builtin: name, params: {...}}`` or a full explicit description."""
    if not isinstance(d, dict):
        raise ConfigurationError("scenario must be a mapping")
    seed = int(d.get("seed", 0) if seed is None else seed)
    if "builtin" in d:
        return builtin(d["builtin"], seed, **(d.get("params") or {}))
    try:
        lanes = tuple(Lane(Polyline(np.array(l["centerline"], dtype=float)), float(l.get("width", LANE_WIDTH)))
                      for l in d["lanes"])
        route = Polyline(np.array(d["route"], dtype=float))
        agents = []
        for a in d.get("agents", []):
            beh = AgentBehavior(**(a.get("behavior") or {}))
            agents.append(ScriptedAgent(_state(a["state"]), _box(a.get("box")), beh, int(a.get("lane", 0))))
        return Scenario(str(d.get("name", "custom")), lanes, route, tuple(float(v) for v in d["goal"]),
                        float(d.get("goal_radius", 4.0)), _state(d["ego"]), _box(d.get("ego_box")),
                        tuple(agents), float(d["time_budget"]), seed, float(d.get("speed_limit", 10.0)))
    except KeyError as e:
        raise ConfigurationError(f"scenario is missing field {e}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigurationError):
            raise
        raise ConfigurationError(f"malformed scenario: {e}") from None


def load_scenario(path, seed: int | None = None) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"scenario file not found: {p}")
    try:
        d = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse scenario file {p}: {e}") from None
    return scenario_from_dict(d, seed)


def scenario_to_dict(sc: Scenario) -> dict:
    st = lambda s: {"x": s.x, "y": s.y, "heading": s.heading, "speed": s.speed}  # noqa: E731
    return {
        "name": sc.name,
        "seed": sc.seed,
        "lanes": [{"centerline": l.centerline.vertices.tolist(), "width": l.width} for l in sc.lanes],
        "route": sc.route.vertices.tolist(),
        "goal": list(sc.goal),
        "goal_radius": sc.goal_radius,
        "ego": st(sc.ego_init),
        "ego_box": {"length": sc.ego_box.length, "width": sc.ego_box.width},
        "agents": [{"state": st(a.state), "box": {"length": a.box.length, "width": a.box.width},
                    "behavior": a.behavior.to_dict(), "lane": a.lane} for a in sc.agents],
        "time_budget": sc.time_budget,
        "speed_limit": sc.speed_limit,
    }
