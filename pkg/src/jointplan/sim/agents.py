"""Scripted lane-following traffic with time-headway braking and yielding to cut-ins."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from jointplan.errors import ConfigurationError
from jointplan.geometry import BoundingBox, Lane
from jointplan.trajectory import KinematicState


@dataclass(frozen=True)
class AgentBehavior:
    desired_speed: float = 7.0
    headway: float = 1.5        # s
    standstill_gap: float = 2.0  # m, bumper to bumper
    max_decel: float = 4.0
    max_accel: float = 2.0
    yield_to_cut_in: bool = True

    def __post_init__(self):
        if self.desired_speed < 0 or self.headway < 0 or self.standstill_gap < 0:
            raise ConfigurationError("behavior speeds and gaps must be non-negative")
        if not (self.max_decel > 0 and self.max_accel >= 0):
            raise ConfigurationError("acceleration bounds must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Neighbor:
    state: KinematicState
    box: BoundingBox
    is_ego: bool = False


def _front(state: KinematicState, box: BoundingBox) -> np.ndarray:
    h = 0.5 * box.length
    return np.array([state.x + h * np.cos(state.heading), state.y + h * np.sin(state.heading)])


def _along(lane: Lane, state: KinematicState, box: BoundingBox):
    """Arclength, lateral offset, half extent along the lane, and speed along the lane."""
    _, s, tangent, lat = lane.centerline.project(np.array([[state.x, state.y]]))
    d = state.heading - tangent[0]
    half = 0.5 * (box.length * abs(np.cos(d)) + box.width * abs(np.sin(d)))
    return s[0], lat[0], half, state.speed * np.cos(d)


def leader_gap(state: KinematicState, box: BoundingBox, lane: Lane, behavior: AgentBehavior,
               neighbors: Sequence[Neighbor]):
    """Bumper gap and along-lane speed of the closest vehicle ahead in this lane, or None.

    Traffic counts when its center is inside the lane corridor; the ego also
    counts as soon as its front enters the corridor (a cut-in), if the behavior yields.
    """
    s_me, _, half_me, _ = _along(lane, state, box)
    best = None
    for nb in neighbors:
        s_c, lat, half, v_along = _along(lane, nb.state, nb.box)
        inside = abs(lat) <= lane.half_width
        if not inside and nb.is_ego and behavior.yield_to_cut_in:
            lat_front = lane.centerline.project(_front(nb.state, nb.box)[None])[3][0]
            inside = abs(lat_front) <= lane.half_width
        if not inside or s_c <= s_me:
            continue
        gap = (s_c - half) - (s_me + half_me)
        if best is None or gap < best[0]:
            best = (float(gap), float(v_along))
    return best


def commanded_accel(state: KinematicState, box: BoundingBox, lane: Lane, behavior: AgentBehavior,
                    neighbors: Sequence[Neighbor]) -> float:
    """Minimum of the free-road and car-following commands, clipped to the behavior's bounds."""
    v = state.speed
    a = behavior.desired_speed - v
    lead = leader_gap(state, box, lane, behavior, neighbors)
    if lead is not None:
        gap, v_lead = lead
        a_follow = (gap - behavior.standstill_gap - behavior.headway * v) + (v_lead - v)
        a = min(a, a_follow)
    return float(np.clip(a, -behavior.max_decel, behavior.max_accel))


def step_scripted_agent(state: KinematicState, behavior: AgentBehavior, neighbors: Sequence[Neighbor],
                        dt: float, lane: Lane, box: BoundingBox = BoundingBox(4.5, 2.0)) -> KinematicState:
    """Advance one lane-following agent by ``dt``.

    Speed never exceeds ``max(desired_speed, current speed)`` and never drops below zero;
    the agent keeps its lateral offset and takes the lane's heading.
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    a = commanded_accel(state, box, lane, behavior, neighbors)
    v0 = state.speed
    v1 = min(max(v0 + a * dt, 0.0), max(behavior.desired_speed, v0))
    ds = 0.5 * (v0 + v1) * dt
    _, s, _, lat = lane.centerline.project(np.array([[state.x, state.y]]))
    p, hd = lane.centerline.point_at(float(s[0] + ds))
    x = p[0] - lat[0] * np.sin(hd)
    y = p[1] + lat[0] * np.cos(hd)
    return KinematicState(float(x), float(y), hd, float(v1))
