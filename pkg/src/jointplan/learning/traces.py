"""Training scenes cut from episode traces: the logged future of every vehicle is its ground truth."""
from __future__ import annotations

import logging
from typing import Iterable

from jointplan.energy import AgentObservation, PlanningContext
from jointplan.errors import ConfigurationError, JointPlanError
from jointplan.learning.fit import Scene
from jointplan.planner import relevant_agents
from jointplan.sim.episode import EpisodeTrace
from jointplan.sim.scenario import scenario_from_dict
from jointplan.trajectory import KinematicState, SamplerProfile, Trajectory, sample_candidates

log = logging.getLogger(__name__)


def scenes_from_trace(trace: EpisodeTrace, profile: SamplerProfile | None = None, stride: int = 1,
                      radius: float = 30.0, max_agents: int = 8) -> list:
    """One scene per tick that has a full horizon of logged future.

    Agents that leave the trace before the horizon ends are dropped from that scene.
    """
    profile = profile or SamplerProfile()
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    if abs(trace.header.get("replan_period", profile.dt) - profile.dt) > 1e-9:
        raise ConfigurationError("trace replan period differs from the sampler time step")
    sc = scenario_from_dict(trace.header["scenario"])
    boxes = {i: a.box for i, a in enumerate(sc.agents)}
    h = profile.n_steps - 1
    ticks = trace.ticks
    scenes = []
    for t in range(0, len(ticks) - h, stride):
        window = ticks[t: t + h + 1]
        if [r["tick"] for r in window] != list(range(window[0]["tick"], window[0]["tick"] + h + 1)):
            continue
        present = [{a["id"]: a["state"] for a in r["agents"]} for r in window]
        ids = [i for i in present[0] if all(i in p for p in present)]
        try:
            ego_fut = Trajectory.from_states([KinematicState(*r["ego"]) for r in window], profile.dt)
            futs = [Trajectory.from_states([KinematicState(*p[i]) for p in present], profile.dt) for i in ids]
        except JointPlanError as e:
            log.warning("skipping tick %d: %s", window[0]["tick"], e)
            continue
        ego = KinematicState(*window[0]["ego"])
        obs = tuple(AgentObservation(KinematicState(*present[0][i]), boxes.get(i, sc.ego_box), f)
                    for i, f in zip(ids, futs))
        ctx = PlanningContext(AgentObservation(ego, sc.ego_box), obs, sc.route, sc.lanes, sc.speed_limit)
        keep = relevant_agents(ctx, radius, max_agents)
        ctx = ctx.subset(keep)
        futs = [futs[i] for i in keep]
        sets = [sample_candidates(o.state, profile, sc.lanes) for o in ctx.observations]
        name = f"seed{trace.header.get('seed')}-{trace.header.get('mode')}-t{window[0]['tick']}"
        scenes.append(Scene(ctx, sets, [ego_fut] + futs, name))
    return scenes


def scenes_from_traces(traces: Iterable[EpisodeTrace], profile: SamplerProfile | None = None, stride: int = 1,
                       radius: float = 30.0, max_agents: int = 8) -> list:
    return [s for tr in traces for s in scenes_from_trace(tr, profile, stride, radius, max_agents)]
