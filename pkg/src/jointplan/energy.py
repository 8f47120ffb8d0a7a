"""Joint energy over per-agent candidate choices: agent cost, pairwise safety, route following.

The agent cost is linear in the weights over a fixed feature basis, so the score
matrix is ``features @ w``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from jointplan._backend import kernels
from jointplan.errors import ConfigurationError, ShapeError
from jointplan.geometry import BoundingBox, Lane, Polyline, wrap_angle
from jointplan.trajectory import CandidateSet, KinematicState, Trajectory, route_deviation

FEATURE_NAMES = (
    "lane_offset",
    "speed_deviation",
    "acceleration",
    "jerk",
    "lateral_acceleration",
    "progress_rate",
    "heading_error",
    "off_road",
)
# Teacher-only: computed from the agent's logged future.
PRIVILEGED_NAMES = ("future_speed_gap", "future_turn_gap")

DEFAULT_W = {
    "lane_offset": 1.0,
    "speed_deviation": 0.4,
    "acceleration": 0.3,
    "jerk": 0.1,
    "lateral_acceleration": 0.3,
    "progress_rate": -0.4,
    "heading_error": 2.0,
    "off_road": 20.0,
    "future_speed_gap": 1.0,
    "future_turn_gap": 1.0,
}


@dataclass(frozen=True)
class AgentObservation:
    state: KinematicState
    box: BoundingBox = BoundingBox(4.5, 2.0)
    future: Trajectory | None = None  # privileged, only read by teacher features


@dataclass(frozen=True, eq=False)
class PlanningContext:
    ego: AgentObservation
    agents: tuple
    route: Polyline
    lanes: tuple
    speed_limit: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "lanes", tuple(self.lanes))
        if not self.lanes:
            raise ConfigurationError("context needs at least one lane")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def observations(self) -> tuple:
        return (self.ego,) + self.agents

    def subset(self, keep: Sequence[int]) -> "PlanningContext":
        return replace(self, agents=tuple(self.agents[i] for i in keep))


@dataclass(frozen=True, eq=False)
class EnergyWeights:
    w: np.ndarray
    names: tuple = FEATURE_NAMES
    safety_collision_weight: float = 1e4
    safety_margin: float = 2.0
    goal_weight: float = 5.0

    def __post_init__(self):
        w = np.array(self.w, dtype=float).ravel()
        if len(w) != len(self.names):
            raise ShapeError(f"{len(w)} weights for {len(self.names)} features")
        if not np.all(np.isfinite(w)):
            raise ConfigurationError("weights must be finite")
        if self.safety_collision_weight < 0 or not self.safety_margin >= 0 or not self.goal_weight >= 0:
            raise ConfigurationError("collision weight, safety margin and goal weight must be non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def privileged(self) -> bool:
        return len(self.names) > len(FEATURE_NAMES)

    def with_w(self, w) -> "EnergyWeights":
        return replace(self, w=np.asarray(w, dtype=float))

    def to_text(self) -> str:
        lines = ["# jointplan weights v1"]
        lines += [f"{n} = {v!r}" for n, v in zip(self.names, self.w.tolist())]
        lines.append(f"safety_collision_weight = {self.safety_collision_weight!r}")
        lines.append(f"safety_margin = {self.safety_margin!r}")
        lines.append(f"goal_weight = {self.goal_weight!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EnergyWeights":
        vals = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"malformed weights line: {raw!r}")
            k, v = (p.strip() for p in line.split("=", 1))
            try:
                vals[k] = float(v)
            except ValueError:
                raise ConfigurationError(f"non-numeric weight {k} = {v}") from None
        kw = {}
        for key in ("safety_collision_weight", "safety_margin", "goal_weight"):
            if key in vals:
                kw[key] = vals.pop(key)
        names = FEATURE_NAMES + (PRIVILEGED_NAMES if any(n in vals for n in PRIVILEGED_NAMES) else ())
        missing = [n for n in names if n not in vals]
        extra = set(vals) - set(names)
        if missing or extra:
            raise ConfigurationError(f"weights file: missing {missing}, unknown {sorted(extra)}")
        return cls(np.array([vals[n] for n in names]), names, **kw)


def default_weights(privileged: bool = False) -> EnergyWeights:
    names = FEATURE_NAMES + (PRIVILEGED_NAMES if privileged else ())
    return EnergyWeights(np.array([DEFAULT_W[n] for n in names]), names)


def _check_sets(ctx: PlanningContext, sets: Sequence[CandidateSet]):
    if len(sets) != ctx.n_agents + 1:
        raise ShapeError(f"{len(sets)} candidate sets for {ctx.n_agents} agents plus ego")
    k, t = sets[0].k, sets[0].n_steps
    for s in sets:
        if s.k != k or s.n_steps != t:
            raise ShapeError("all candidate sets must share K and step count")


def _reference_paths(ctx: PlanningContext):
    """Route for the ego, nearest lane centerline (at the current position) for everyone else."""
    refs = [ctx.route]
    for obs in ctx.agents:
        p = np.array([[obs.state.x, obs.state.y]])
        d = [lane.centerline.distance(p)[0] for lane in ctx.lanes]
        refs.append(ctx.lanes[int(np.argmin(d))].centerline)
    return refs


def candidate_features(ctx: PlanningContext, sets: Sequence[CandidateSet], privileged: bool = False) -> np.ndarray:
    """Feature tensor of shape (N+1, K, F); row 0 is the ego."""
    _check_sets(ctx, sets)
    arr = np.stack([s.array for s in sets])  # (A, K, T, 4)
    dt = sets[0].dt
    pos = arr[..., :2]
    heading = arr[..., 2]
    speed = arr[..., 3]

    lane_d = np.stack([lane.centerline.project(pos) for lane in ctx.lanes])  # (L, 4, A, K, T)
    nearest = np.argmin(lane_d[:, 0], axis=0)
    offset = np.take_along_axis(lane_d[:, 0], nearest[None], 0)[0]
    lane_heading = np.take_along_axis(lane_d[:, 2], nearest[None], 0)[0]
    half_width = np.array([lane.half_width for lane in ctx.lanes])[nearest]

    acc = np.diff(speed, axis=-1) / dt
    jerk = np.diff(acc, axis=-1) / dt
    ds = np.hypot(*np.moveaxis(np.diff(pos, axis=-2), -1, 0))
    dth = wrap_angle(np.diff(heading, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        curv = np.where(ds > 1e-6, np.abs(dth) / ds, 0.0)
    v_mid = 0.5 * (speed[..., 1:] + speed[..., :-1])
    lat = v_mid * v_mid * curv

    progress = np.empty(arr.shape[:2])
    for a, ref in enumerate(_reference_paths(ctx)):
        s = ref.project(pos[a][:, [0, -1]])[1]
        progress[a] = (s[:, 1] - s[:, 0]) / sets[0].horizon

    cols = [
        offset.mean(-1),
        np.abs(speed - ctx.speed_limit).mean(-1),
        np.abs(acc).mean(-1) if acc.shape[-1] else np.zeros(arr.shape[:2]),
        np.abs(jerk).mean(-1) if jerk.shape[-1] else np.zeros(arr.shape[:2]),
        lat.mean(-1) if lat.shape[-1] else np.zeros(arr.shape[:2]),
        progress,
        np.abs(wrap_angle(heading - lane_heading)).mean(-1),
        np.maximum(offset - half_width, 0.0).mean(-1),
    ]
    if privileged:
        gap_v = np.zeros(arr.shape[:2])
        gap_turn = np.zeros(arr.shape[:2])
        for a, obs in enumerate(ctx.observations):
            if obs.future is None:
                continue
            fut = obs.future.poses
            gap_v[a] = np.abs(speed[a].mean(-1) - fut[:, 3].mean())
            turn = wrap_angle(heading[a, :, -1] - heading[a, :, 0])
            gap_turn[a] = np.abs(wrap_angle(turn - wrap_angle(fut[-1, 2] - fut[0, 2])))
        cols += [gap_v, gap_turn]
    return np.stack(cols, axis=-1)


def agent_energy(ctx: PlanningContext, sets: Sequence[CandidateSet], weights: EnergyWeights) -> np.ndarray:
    """Score matrix of shape (K, N+1): entry [k, i] is the agent cost of candidate k of agent i."""
    phi = candidate_features(ctx, sets, weights.privileged)
    if phi.shape[-1] != len(weights.w):
        raise ShapeError(f"feature dimension {phi.shape[-1]} != weight dimension {len(weights.w)}")
    return (phi @ weights.w).T


def _xyh(a) -> np.ndarray:
    if isinstance(a, Trajectory):
        return a.poses[None, :, :3]
    a = np.asarray(a, dtype=float)
    return a[..., :3] if a.ndim == 3 else a[None, :, :3]


def safety_energy(a: Trajectory, box_a: BoundingBox, b: Trajectory, box_b: BoundingBox,
                  scale_speed=None, weights: EnergyWeights | None = None) -> float:
    """Collision indicator plus speed-scaled squared margin violation for one trajectory pair.

    ``scale_speed`` defaults to the speeds of ``a``.
    """
    weights = weights or default_weights()
    if len(a) != len(b) or a.dt != b.dt:
        raise ShapeError("safety_energy needs trajectories aligned in step count and dt")
    scale = a.speeds if scale_speed is None else np.asarray(scale_speed, dtype=float)
    if scale.shape != (len(a),):
        raise ShapeError("scale_speed must have one entry per step")
    return float(kernels.safety_matrix(_xyh(a), scale[None], _xyh(b), box_a.length, box_a.width,
                                       box_b.length, box_b.width, weights.safety_margin,
                                       weights.safety_collision_weight)[0, 0])


def goal_energy(tau0, route: Polyline) -> float:
    return route_deviation(tau0, route)


def _envelopes_apart(sa: CandidateSet, box_a: BoundingBox, sb: CandidateSet, box_b: BoundingBox, margin: float) -> bool:
    """True when, at every step, the padded bounding boxes of both candidate sets are further apart than ``margin``."""
    ra = 0.5 * np.hypot(box_a.length, box_a.width)
    rb = 0.5 * np.hypot(box_b.length, box_b.width)
    pa, pb = sa.array[..., :2], sb.array[..., :2]
    lo_a, hi_a = pa.min(axis=0) - ra, pa.max(axis=0) + ra
    lo_b, hi_b = pb.min(axis=0) - rb, pb.max(axis=0) + rb
    sep = np.maximum(lo_b - hi_a, lo_a - hi_b).max(axis=-1)  # (T,)
    return bool(np.all(sep > margin))


def pair_safety(sa: CandidateSet, box_a: BoundingBox, sb: CandidateSet, box_b: BoundingBox,
                weights: EnergyWeights) -> np.ndarray | None:
    """K x K safety energies scaled by the first set's speeds, or None when identically zero."""
    if weights.safety_collision_weight == 0 and weights.safety_margin == 0:
        return None
    if _envelopes_apart(sa, box_a, sb, box_b, weights.safety_margin):
        return None
    m = kernels.safety_matrix(sa.array[..., :3], sa.array[..., 3], sb.array[..., :3],
                              box_a.length, box_a.width, box_b.length, box_b.width,
                              weights.safety_margin, weights.safety_collision_weight)
    return m if np.any(m != 0) else None


@dataclass(eq=False)
class EnergyTables:
    """Every energy term the planner and inference need, evaluated once per scene.

    ``agent``: (N+1, K) agent costs (row 0 ego); ``goal``: (K,) weighted ego route deviation;
    ``ego_safety``: (N, K, K) with [i, k_ego, k_agent]; ``pairs``: {(i, j): K x K}
    over agent nodes 1..N with i < j, absent when identically zero.
    """

    agent: np.ndarray
    goal: np.ndarray
    ego_safety: np.ndarray
    pairs: dict = field(default_factory=dict)
    features: np.ndarray | None = None

    @property
    def n_agents(self) -> int:
        return self.agent.shape[0] - 1

    @property
    def k(self) -> int:
        return self.agent.shape[1]


def energy_tables(ctx: PlanningContext, sets: Sequence[CandidateSet], weights: EnergyWeights) -> EnergyTables:
    phi = candidate_features(ctx, sets, weights.privileged)
    if phi.shape[-1] != len(weights.w):
        raise ShapeError(f"feature dimension {phi.shape[-1]} != weight dimension {len(weights.w)}")
    obs = ctx.observations
    k = sets[0].k
    ego_safety = np.zeros((ctx.n_agents, k, k))
    for i in range(1, ctx.n_agents + 1):
        m = pair_safety(sets[0], obs[0].box, sets[i], obs[i].box, weights)
        if m is not None:
            ego_safety[i - 1] = m
    pairs = {}
    for i in range(1, ctx.n_agents + 1):
        for j in range(i + 1, ctx.n_agents + 1):
            m = pair_safety(sets[i], obs[i].box, sets[j], obs[j].box, weights)
            if m is not None:
                pairs[(i, j)] = m
    goal = weights.goal_weight * ctx.route.distance(sets[0].array[..., :2]).mean(axis=-1)
    return EnergyTables(phi @ weights.w, goal, ego_safety, pairs, phi)


def joint_energy(assignment: Sequence[int], ctx: PlanningContext, sets: Sequence[CandidateSet],
                 weights: EnergyWeights, tables: EnergyTables | None = None) -> float:
    """Sum of agent costs, safety over unordered pairs (ego included), and ego route deviation."""
    tables = tables or energy_tables(ctx, sets, weights)
    n = tables.n_agents
    if len(assignment) != n + 1:
        raise ShapeError(f"assignment has {len(assignment)} entries, expected {n + 1}")
    a = [int(x) for x in assignment]
    if any(not 0 <= x < tables.k for x in a):
        raise IndexError(f"assignment index out of range [0, {tables.k})")
    total = sum(tables.agent[i, a[i]] for i in range(n + 1))
    total += sum(tables.ego_safety[i - 1, a[0], a[i]] for i in range(1, n + 1))
    total += sum(m[a[i], a[j]] for (i, j), m in tables.pairs.items())
    total += tables.goal[a[0]]
    return float(total)
