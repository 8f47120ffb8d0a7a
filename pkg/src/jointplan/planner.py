"""Ego plan selection by expected cost under (conditioned or unconditioned) agent marginals."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from jointplan.energy import EnergyTables, EnergyWeights, PlanningContext, energy_tables
from jointplan.errors import ConfigurationError, PlanningError, ShapeError
from jointplan.inference import (ConditionalMarginals, LbpOptions, PairwiseMRF, build_unconditional_mrf,
                                 conditional_unaries, lbp_batch, lbp_marginals, _agent_pairs)
from jointplan.trajectory import CandidateSet, Trajectory

MODES = ("interactive", "non_interactive")


@dataclass(eq=False)
class PlanResult:
    chosen_index: int
    chosen_trajectory: Trajectory
    costs: np.ndarray
    predictions: ConditionalMarginals
    mode: str
    agent_ids: tuple = ()  # context agent index of each prediction row


def _expected_cost(ego_index: int, tables: EnergyTables, marginals: ConditionalMarginals) -> float:
    n = tables.n_agents
    if marginals.unary.shape != (n, tables.k):
        raise ShapeError(f"marginals {marginals.unary.shape} do not match {n} agents x {tables.k} candidates")
    cost = tables.agent[0, ego_index] + tables.goal[ego_index]
    if n:
        per_agent = tables.agent[1:] + tables.ego_safety[:, ego_index, :]
        cost += float(np.sum(marginals.unary * per_agent))
    return float(cost)


def interactive_cost(ego_index: int, ctx: PlanningContext, sets: Sequence[CandidateSet], weights: EnergyWeights,
                     marginals: ConditionalMarginals, tables: EnergyTables | None = None) -> float:
    """Ego cost plus the expected agent costs and ego-agent safety under marginals conditioned on ``ego_index``.

    Agent-agent safety does not enter the cost (it still shapes the marginals).
    """
    tables = tables or energy_tables(ctx, sets, weights)
    return _expected_cost(ego_index, tables, marginals)


def noninteractive_cost(ego_index: int, ctx: PlanningContext, sets: Sequence[CandidateSet], weights: EnergyWeights,
                        marginals_unconditioned: ConditionalMarginals, tables: EnergyTables | None = None) -> float:
    """Same four terms, with marginals that ignore the ego plan."""
    tables = tables or energy_tables(ctx, sets, weights)
    return _expected_cost(ego_index, tables, marginals_unconditioned)


def relevant_agents(ctx: PlanningContext, radius: float = 30.0, max_agents: int = 8) -> list:
    """Indices of agents within ``radius`` of the ego, nearest first, at most ``max_agents``."""
    ex, ey = ctx.ego.state.x, ctx.ego.state.y
    d = [np.hypot(a.state.x - ex, a.state.y - ey) for a in ctx.agents]
    order = sorted((di, i) for i, di in enumerate(d) if di <= radius)
    return sorted(i for _, i in order[:max_agents])


def plan(ctx: PlanningContext, sets: Sequence[CandidateSet], weights: EnergyWeights, mode: str = "interactive",
         lbp_opts: LbpOptions | None = None, radius: float | None = 30.0, max_agents: int = 8,
         tables: EnergyTables | None = None) -> PlanResult:
    """Pick the ego candidate with minimal expected cost.

    Interactive mode runs one conditioned LBP per ego candidate (batched);
    non-interactive mode runs a single unconditioned LBP. Ties go to the lowest index.
    Agents outside ``radius`` (or beyond the ``max_agents`` nearest) are dropped first;
    pass ``radius=None`` to keep everyone.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    if not sets:
        raise ConfigurationError("no candidate sets")
    lbp_opts = lbp_opts or LbpOptions()
    keep = list(range(ctx.n_agents)) if radius is None else relevant_agents(ctx, radius, max_agents)
    if tables is None or len(keep) != ctx.n_agents:
        if len(keep) != ctx.n_agents:
            ctx = ctx.subset(keep)
            sets = [sets[0]] + [sets[i + 1] for i in keep]
        tables = energy_tables(ctx, sets, weights)
    k = tables.k

    if mode == "interactive":
        skeleton = PairwiseMRF(np.zeros((tables.n_agents, k)), _agent_pairs(tables, 1))
        runs = lbp_batch(skeleton, conditional_unaries(tables), lbp_opts)
        costs = np.array([_expected_cost(e, tables, runs[e]) for e in range(k)])
    else:
        shared = lbp_marginals(build_unconditional_mrf(ctx, sets, weights, tables), lbp_opts)
        runs = [shared] * k
        costs = np.array([_expected_cost(e, tables, shared) for e in range(k)])

    finite = np.isfinite(costs)
    if not finite.any():
        raise PlanningError("every ego candidate has non-finite cost")
    best = int(np.argmin(np.where(finite, costs, np.inf)))
    return PlanResult(best, sets[0][best], costs, runs[best], mode, tuple(keep))
