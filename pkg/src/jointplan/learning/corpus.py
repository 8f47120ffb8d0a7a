"""The toy distillation corpus: random two-lane scenes with ground truth sampled from a known joint.

A corpus file is JSON lines: a header (schema version, generator weights, split
sizes) followed by one record per scene holding the initial states, the route
lane and the ground-truth candidate of every node. Candidate sets are
regenerated on load; the stored trajectories guard against sampler drift.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from jointplan.energy import FEATURE_NAMES, AgentObservation, EnergyWeights, PlanningContext
from jointplan.errors import ConfigurationError
from jointplan.geometry import Lane, Polyline
from jointplan.inference import build_joint_mrf, joint_log_table
from jointplan.learning.fit import Scene
from jointplan.trajectory import KinematicState, SamplerProfile, Trajectory, sample_candidates

SCHEMA_VERSION = 1
LANE_WIDTH = 3.5
X_RANGE = (-60.0, 200.0)

# Weights that generate the ground truth. The goal weight matches the planner default,
# so a student with the base features can represent the generator exactly.
CORPUS_W = {
    "lane_offset": 1.5,
    "speed_deviation": 0.6,
    "acceleration": 0.5,
    "jerk": 0.2,
    "lateral_acceleration": 0.25,
    "progress_rate": -1.0,
    "heading_error": 3.0,
    "off_road": 20.0,
}
CORPUS_GOAL_WEIGHT = 5.0


def corpus_weights() -> EnergyWeights:
    return EnergyWeights(np.array([CORPUS_W[n] for n in FEATURE_NAMES]), goal_weight=CORPUS_GOAL_WEIGHT)


def _lanes():
    return tuple(Lane(Polyline(np.array([[X_RANGE[0], y], [X_RANGE[1], y]])), LANE_WIDTH) for y in (0.0, LANE_WIDTH))


def _route(lane: int) -> Polyline:
    y = lane * LANE_WIDTH
    return Polyline(np.array([[X_RANGE[0], y], [X_RANGE[1], y]]))


def _context(ego: KinematicState, agents, route_lane: int, futures=None) -> PlanningContext:
    futures = futures or [None] * len(agents)
    obs = tuple(AgentObservation(a, future=f) for a, f in zip(agents, futures))
    return PlanningContext(AgentObservation(ego), obs, _route(route_lane), _lanes())


def sample_record(rng: np.random.Generator, n_agents: int = 2, profile: SamplerProfile | None = None,
                  name: str = "") -> dict:
    """Draw one scene layout and a ground-truth assignment from the generator's exact joint."""
    profile = profile or SamplerProfile()
    ego_lane = int(rng.integers(2))
    ego = KinematicState(0.0, ego_lane * LANE_WIDTH, 0.0, float(rng.uniform(4, 10)))
    placed = [(ego.x, ego.y)]
    agents = []
    while len(agents) < n_agents:
        x, y = float(rng.uniform(-20, 30)), LANE_WIDTH * int(rng.integers(2))
        if all(np.hypot(x - px, y - py) > 8.0 for px, py in placed):
            placed.append((x, y))
            agents.append(KinematicState(x, y, 0.0, float(rng.uniform(3, 10))))
    route_lane = 1 - ego_lane if rng.random() < 0.3 else ego_lane
    ctx = _context(ego, agents, route_lane)
    sets = [sample_candidates(s, profile, ctx.lanes) for s in [ego] + agents]
    logp = joint_log_table(build_joint_mrf(ctx, sets, corpus_weights()))
    p = np.exp(logp - logp.max()).ravel()
    idx = np.unravel_index(int(rng.choice(p.size, p=p / p.sum())), logp.shape)
    st = lambda s: [s.x, s.y, s.heading, s.speed]  # noqa: E731
    return {
        "name": name,
        "ego": st(ego),
        "agents": [st(a) for a in agents],
        "route_lane": route_lane,
        "gt_index": [int(i) for i in idx],
        "gt": [np.round(s.array[int(i)], 9).tolist() for s, i in zip(sets, idx)],
    }


def scene_from_record(rec: dict, profile: SamplerProfile | None = None) -> Scene:
    profile = profile or SamplerProfile()
    try:
        ego = KinematicState(*rec["ego"])
        agents = [KinematicState(*a) for a in rec["agents"]]
        gt = [Trajectory(np.array(g, dtype=float), profile.dt) for g in rec["gt"]]
        idx = [int(i) for i in rec["gt_index"]]
        route_lane = int(rec["route_lane"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"malformed corpus record {rec.get('name', '?')!r}: {e}") from None
    lanes = _lanes()
    sets = [sample_candidates(s, profile, lanes) for s in [ego] + agents]
    for s, i, g in zip(sets, idx, gt):
        if not 0 <= i < s.k or np.abs(s.array[i] - g.poses).max() > 1e-6:
            raise ConfigurationError(f"corpus record {rec.get('name')!r} does not match the current sampler")
    ctx = _context(ego, agents, route_lane, gt[1:])
    return Scene(ctx, sets, gt, rec.get("name", ""))


@dataclass(frozen=True)
class Corpus:
    header: dict
    records: tuple

    def scenes(self, which=None, profile: SamplerProfile | None = None) -> list:
        idx = range(len(self.records)) if which is None else which
        return [scene_from_record(self.records[i], profile) for i in idx]

    @property
    def teacher_indices(self) -> list:
        return list(range(int(self.header["teacher_pool"])))

    @property
    def split_pool(self) -> list:
        return list(range(int(self.header["teacher_pool"]), len(self.records)))

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records]
        return "\n".join(lines) + "\n"


def generate_corpus(seed: int = 0, teacher_pool: int = 150, split_pool: int = 150, n_agents: int = 2,
                    train: int = 8, test: int = 40) -> Corpus:
    rng = np.random.default_rng(seed)
    n = teacher_pool + split_pool
    recs = tuple(sample_record(rng, n_agents, name=f"c{seed}-{i}") for i in range(n))
    header = {"kind": "corpus", "schema_version": SCHEMA_VERSION, "seed": seed, "n_agents": n_agents,
              "generator": dict(CORPUS_W, goal_weight=CORPUS_GOAL_WEIGHT),
              "teacher_pool": teacher_pool, "train": train, "test": test}
    return Corpus(header, recs)


def read_corpus(path) -> Corpus:
    p = Path(path)
    if p.is_dir():
        p = p / "corpus.jsonl"
    if not p.is_file():
        raise ConfigurationError(f"corpus not found: {p}")
    lines = [ln for ln in p.read_text().splitlines() if ln.strip()]
    try:
        header, recs = json.loads(lines[0]), tuple(json.loads(ln) for ln in lines[1:])
    except (IndexError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot parse corpus {p}: {e}") from None
    if header.get("kind") != "corpus" or header.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"{p} is not a version-{SCHEMA_VERSION} corpus file")
    if int(header["teacher_pool"]) >= len(recs):
        raise ConfigurationError("corpus has no scenes outside the teacher pool")
    return Corpus(header, recs)


def packaged_corpus() -> Corpus:
    return read_corpus(resources.files("jointplan") / "data" / "corpus.jsonl")
