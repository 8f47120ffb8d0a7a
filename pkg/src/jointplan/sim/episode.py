"""Closed-loop episodes: replan, execute one period, step traffic, check terminal events."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from jointplan._backend import kernels
from jointplan.energy import AgentObservation, EnergyWeights, PlanningContext
from jointplan.errors import ConfigurationError, JointPlanError
from jointplan.geometry import wrap_angle
from jointplan.inference import LbpOptions
from jointplan.planner import MODES, plan
from jointplan.sim.agents import Neighbor, step_scripted_agent
from jointplan.sim.scenario import Scenario, scenario_to_dict
from jointplan.trajectory import KinematicState, SamplerProfile, sample_candidates

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EVENTS = ("collision", "goal_reached", "off_lanes", "timeout", "planner_failure")
PREDICTION_FLOOR = 0.1  # predicted candidates at or above this probability are written to the trace


@dataclass(frozen=True)
class EpisodeOptions:
    replan_period: float = 0.5
    substeps: int = 5
    profile: SamplerProfile = field(default_factory=SamplerProfile)
    lbp: LbpOptions = field(default_factory=LbpOptions)
    radius: float = 30.0
    max_agents: int = 8
    decimals: int = 6

    def __post_init__(self):
        if not self.replan_period > 0 or self.substeps < 1:
            raise ConfigurationError("replan_period must be positive and substeps >= 1")
        if abs(self.replan_period - self.profile.dt) > 1e-12:
            raise ConfigurationError("replan_period must equal the sampler time step")


def _r(x, d):
    return round(float(x), d)


def _state_rec(s: KinematicState, d: int) -> list:
    return [_r(s.x, d), _r(s.y, d), _r(s.heading, d), _r(s.speed, d)]


def _path_rec(poses: np.ndarray, d: int) -> list:
    return [[_r(p[0], d), _r(p[1], d)] for p in poses]


@dataclass(eq=False)
class EpisodeTrace:
    """Header, one record per tick, and a summary; serialized as JSON lines."""

    header: dict
    ticks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    planning_times: list = field(default_factory=list, repr=False)  # wall clock, kept out of the serialized form

    @property
    def outcome(self) -> str:
        return self.summary.get("outcome", "")

    @property
    def success(self) -> bool:
        return self.outcome == "goal_reached"

    @property
    def route_fraction(self) -> float:
        return float(self.summary.get("route_fraction", 0.0))

    def records(self) -> Iterable[dict]:
        yield self.header
        yield from self.ticks
        yield self.summary

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records())

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeTrace":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not recs or recs[0].get("kind") != "header":
            raise ValueError("trace does not start with a header record")
        if recs[0].get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported trace schema version {recs[0].get('schema_version')!r}")
        ticks = [r for r in recs[1:] if r.get("kind") == "tick"]
        summary = next((r for r in recs[1:] if r.get("kind") == "summary"), {})
        if [t["tick"] for t in ticks] != sorted(set(t["tick"] for t in ticks)):
            raise ValueError("tick indices are not strictly increasing")
        return cls(recs[0], ticks, summary)

    @classmethod
    def read(cls, path) -> "EpisodeTrace":
        with open(path) as f:
            return cls.from_jsonl(f.read())


def _ego_collides(ego: KinematicState, ego_box, others) -> bool:
    if not others:
        return False
    pa = np.array([[[ego.x, ego.y, ego.heading]]])
    for s, box in others:
        pb = np.array([[[s.x, s.y, s.heading]]])
        if kernels.rect_gaps(pa, pb, ego_box.length, ego_box.width, box.length, box.width)[0, 0, 0] <= 0:
            return True
    return False


def _on_lanes(state: KinematicState, lanes) -> bool:
    p = np.array([[state.x, state.y]])
    for lane in lanes:
        _, s, _, lat = lane.centerline.project(p)
        if abs(lat[0]) <= lane.half_width and 0.0 < s[0] < lane.centerline.length:
            return True
    return False


def _interp(a: np.ndarray, b: np.ndarray, f: float) -> KinematicState:
    h = a[2] + f * wrap_angle(b[2] - a[2])
    return KinematicState(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), h, a[3] + f * (b[3] - a[3]))


def _marginal_summary(res, sets, ids, d: int) -> list:
    """Per predicted agent: world id, candidates above the floor with probabilities, and their paths."""
    out = []
    for row, c in enumerate(res.agent_ids):
        p = res.predictions.unary[row]
        keep = [int(k) for k in np.argsort(-p, kind="stable") if p[k] >= PREDICTION_FLOOR]
        out.append({
            "agent": int(ids[c]),
            "top": [[k, _r(p[k], d)] for k in keep],
            "paths": [_path_rec(sets[c + 1].array[k], 3) for k in keep],
        })
    return out


def run_episode(sc: Scenario, weights: EnergyWeights, mode: str = "interactive",
                opts: EpisodeOptions | None = None) -> EpisodeTrace:
    """Simulate one episode; deterministic in (scenario, weights, mode, options)."""
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    opts = opts or EpisodeOptions()
    d = opts.decimals
    header = {"kind": "header", "schema_version": SCHEMA_VERSION, "scenario": scenario_to_dict(sc),
              "seed": sc.seed, "mode": mode, "weights": dict(zip(weights.names, weights.w.tolist())),
              "replan_period": opts.replan_period, "horizon": opts.profile.horizon}
    trace = EpisodeTrace(header)
    ego = sc.ego_init
    agents = [a.state for a in sc.agents]
    active = [True] * len(agents)
    half = sc.lanes[0].half_width
    on_route = 0
    n_ticks = int(round(sc.time_budget / opts.replan_period))
    outcome = "timeout"
    for tick in range(n_ticks):
        ids = [i for i in range(len(agents)) if active[i]]
        ctx = PlanningContext(AgentObservation(ego, sc.ego_box),
                              tuple(AgentObservation(agents[i], sc.agents[i].box) for i in ids),
                              sc.route, sc.lanes, sc.speed_limit)
        rec = {"kind": "tick", "tick": tick, "t": _r(tick * opts.replan_period, d),
               "ego": _state_rec(ego, d),
               "agents": [{"id": i, "state": _state_rec(agents[i], d)} for i in ids]}
        on_route += abs(sc.route.project(np.array([[ego.x, ego.y]]))[3][0]) < half
        t0 = time.perf_counter()
        try:
            sets = [sample_candidates(s, opts.profile, sc.lanes) for s in [ego] + [agents[i] for i in ids]]
            res = plan(ctx, sets, weights, mode, opts.lbp, opts.radius, opts.max_agents)
        except JointPlanError as e:
            log.warning("planner failed at tick %d: %s", tick, e)
            rec["event"] = "planner_failure"
            trace.ticks.append(rec)
            outcome = "planner_failure"
            break
        trace.planning_times.append(time.perf_counter() - t0)
        rec["plan"] = int(res.chosen_index)
        rec["costs"] = [_r(c, d) for c in res.costs]
        rec["plan_path"] = _path_rec(res.chosen_trajectory.poses, 3)
        rec["predictions"] = _marginal_summary(res, sets, ids, d)

        # execute one replan period
        a0, a1 = res.chosen_trajectory.poses[0], res.chosen_trajectory.poses[1]
        event = None
        for sub in range(1, opts.substeps + 1):
            dt = opts.replan_period / opts.substeps
            ego_now = _interp(a0, a1, sub / opts.substeps)
            prev_ego = _interp(a0, a1, (sub - 1) / opts.substeps)
            nbrs = [Neighbor(prev_ego, sc.ego_box, True)]
            nbrs += [Neighbor(agents[i], sc.agents[i].box) for i in range(len(agents)) if active[i]]
            new = list(agents)
            for i in range(len(agents)):
                if not active[i]:
                    continue
                spec = sc.agents[i]
                lane = sc.lanes[spec.lane]
                others = [n for j, n in enumerate(nbrs[1:]) if n.state is not agents[i]]
                new[i] = step_scripted_agent(agents[i], spec.behavior, [nbrs[0]] + others, dt, lane, spec.box)
                s_i = lane.centerline.project(np.array([[new[i].x, new[i].y]]))[1][0]
                if s_i >= lane.centerline.length - 1e-9:
                    active[i] = False
            agents = new
            ego = ego_now
            if _ego_collides(ego, sc.ego_box, [(agents[i], sc.agents[i].box) for i in range(len(agents)) if active[i]]):
                event = "collision"
                break
            if np.hypot(ego.x - sc.goal[0], ego.y - sc.goal[1]) <= sc.goal_radius:
                event = "goal_reached"
                break
            if not _on_lanes(ego, sc.lanes):
                event = "off_lanes"
                break
        if event:
            rec["event"] = event
            trace.ticks.append(rec)
            outcome = event
            break
        if tick == n_ticks - 1:
            rec["event"] = "timeout"
        trace.ticks.append(rec)
    n = max(len(trace.ticks), 1)
    trace.summary = {"kind": "summary", "outcome": outcome, "ticks": len(trace.ticks),
                     "route_fraction": _r(on_route / n, d),
                     "final_ego": _state_rec(ego, d)}
    return trace

