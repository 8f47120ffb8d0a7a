"""Success rate, route-following rate, and batch evaluation over seeds."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from jointplan.energy import EnergyWeights
from jointplan.errors import ConfigurationError
from jointplan.sim.episode import EpisodeOptions, EpisodeTrace, run_episode
from jointplan.sim.scenario import Scenario


@dataclass(frozen=True)
class Metrics:
    success_rate: float
    right_lane_rate: float  # fraction of time on the input route
    episodes: int
    collisions: int
    timeouts: int
    off_lanes: int = 0
    failures: int = 0
    mean_planning_time: float = 0.0

    def __post_init__(self):
        if not (0 <= self.success_rate <= 1 and 0 <= self.right_lane_rate <= 1):
            raise ValueError("rates must lie in [0, 1]")

    def as_row(self, mode: str) -> dict:
        return {"mode": mode, "SR": self.success_rate, "RL": self.right_lane_rate,
                "episodes": self.episodes, "collisions": self.collisions, "timeouts": self.timeouts,
                "mean_planning_time_s": self.mean_planning_time}


def summarize(traces: Sequence[EpisodeTrace]) -> Metrics:
    """Success: goal reached within the budget with no collision and never leaving the lanes.

    RL is tick-weighted over all episodes (every tick lasts one replan period).
    """
    if not traces:
        raise ConfigurationError("at least one episode is required")
    outcomes = [t.outcome for t in traces]
    ticks = np.array([max(len(t.ticks), 1) for t in traces], dtype=float)
    rl = np.array([t.route_fraction for t in traces])
    times = [x for t in traces for x in t.planning_times]
    return Metrics(
        success_rate=outcomes.count("goal_reached") / len(traces),
        right_lane_rate=float((rl * ticks).sum() / ticks.sum()),
        episodes=len(traces),
        collisions=outcomes.count("collision"),
        timeouts=outcomes.count("timeout"),
        off_lanes=outcomes.count("off_lanes"),
        failures=outcomes.count("planner_failure"),
        mean_planning_time=float(np.mean(times)) if times else 0.0,
    )


def _run(args):
    sc, weights, mode, opts = args
    return run_episode(sc, weights, mode, opts)


def run_many(scenarios: Sequence[Scenario], weights: EnergyWeights, mode: str,
             opts: EpisodeOptions | None = None, workers: int = 1,
             on_trace: Callable | None = None) -> list:
    """Episodes in input order; ``workers > 1`` runs them in separate processes."""
    jobs = [(sc, weights, mode, opts) for sc in scenarios]
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    if workers == 1 or len(jobs) < 2:
        results = map(_run, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_run, jobs)
    out = []
    try:
        for sc, tr in zip(scenarios, results):
            if on_trace:
                on_trace(sc, tr)
            out.append(tr)
    finally:
        if workers > 1 and len(jobs) >= 2:
            pool.shutdown()
    return out


def evaluate(scenarios: Sequence[Scenario], weights: EnergyWeights, mode: str,
             episodes_per_scenario: int = 1, opts: EpisodeOptions | None = None, workers: int = 1) -> Metrics:
    """Aggregate metrics; repeated episodes of one scenario are deterministic, so they only repeat outcomes."""
    if episodes_per_scenario < 1:
        raise ConfigurationError("episodes_per_scenario must be >= 1")
    scs = [sc for sc in scenarios for _ in range(episodes_per_scenario)]
    return summarize(run_many(scs, weights, mode, opts, workers))
