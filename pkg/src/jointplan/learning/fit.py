"""Scenes with logged futures, their training fixtures, and gradient descent on the weights."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from jointplan.energy import EnergyTables, EnergyWeights, PlanningContext, energy_tables
from jointplan.errors import ConfigurationError, NumericError, ShapeError
from jointplan.inference import LbpOptions, build_joint_mrf
from jointplan.learning.gradient import TRAINING_LBP, Fixture, planning_loss_and_grad
from jointplan.learning.losses import make_targets
from jointplan.trajectory import CandidateSet

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Scene:
    """A planning context, its candidate sets, and the logged future of every node (ego first)."""

    ctx: PlanningContext
    sets: tuple
    gt: tuple
    name: str = ""

    def __post_init__(self):
        self.sets = tuple(self.sets)
        self.gt = tuple(self.gt)
        if len(self.sets) != self.ctx.n_agents + 1 or len(self.gt) != len(self.sets):
            raise ShapeError(f"scene {self.name!r}: need one candidate set and one future per node")


def scene_tables(scene: Scene, weights: EnergyWeights) -> EnergyTables:
    return energy_tables(scene.ctx, scene.sets, weights)


def scene_fixture(scene: Scene, weights: EnergyWeights, epsilon: float = 0.5,
                  tables: EnergyTables | None = None) -> Fixture:
    """Joint-MRF fixture: only the agent-cost term depends on the weights."""
    tables = tables or scene_tables(scene, weights)
    mrf = build_joint_mrf(scene.ctx, scene.sets, weights, tables)
    offset = np.zeros(tables.agent.shape)
    offset[0] = -tables.goal
    return Fixture(tables.features, offset, mrf, make_targets(scene.gt, scene.sets, epsilon), scene.name)


@dataclass(frozen=True)
class FitOptions:
    steps: int = 100
    step_size: float = 1e-2
    halving: bool = True
    min_step: float = 1e-6
    tolerance: float = 1e-9
    growth: float = 1.0
    lbp: LbpOptions = TRAINING_LBP

    def __post_init__(self):
        if self.steps < 0 or not self.step_size > 0 or not self.min_step > 0 or self.growth < 1:
            raise ConfigurationError("invalid fit options")

    @classmethod
    def from_dict(cls, d: dict) -> "FitOptions":
        d = dict(d)
        bad = set(d) - set(cls.__dataclass_fields__)
        if bad:
            raise ConfigurationError(f"unknown fit options: {sorted(bad)}")
        if "lbp" in d and isinstance(d["lbp"], dict):
            d["lbp"] = LbpOptions(**d["lbp"])
        return cls(**d)


@dataclass(eq=False)
class FitResult:
    w: np.ndarray
    history: list = field(default_factory=list)
    steps: int = 0

    def weights(self, template: EnergyWeights) -> EnergyWeights:
        return template.with_w(self.w)


def minimize(objective: Callable, w0, opts: FitOptions = FitOptions(),
             callback: Callable | None = None) -> FitResult:
    """Gradient descent; with ``opts.halving`` the step is halved whenever the loss would rise.

    ``objective(w) -> (loss, grad)``; ``callback(step, loss, w)`` sees every accepted point.
    """
    w = np.array(w0, dtype=float)
    loss, grad = objective(w)
    history = [loss]
    if callback:
        callback(0, loss, w.copy())
    eta = opts.step_size
    step = 0
    while step < opts.steps:
        trial = w - eta * grad
        t_loss, t_grad = objective(trial)
        if opts.halving and not t_loss <= loss:
            eta *= 0.5
            if eta < opts.min_step:
                break
            continue
        step += 1
        improvement = loss - t_loss
        w, loss, grad = trial, t_loss, t_grad
        history.append(loss)
        if callback:
            callback(step, loss, w.copy())
        log.debug("step %d loss %.6g eta %.3g", step, loss, eta)
        if not np.isfinite(loss):
            raise NumericError("loss diverged; lower the step size or enable halving")
        if abs(improvement) < opts.tolerance:
            break
        eta *= opts.growth
    return FitResult(w, history, step)


def mean_objective(fixtures: Sequence[Fixture], per_fixture: Callable) -> Callable:
    """Average of ``per_fixture(fx, w) -> (loss, grad)`` over fixtures; errors name the fixture."""
    if not fixtures:
        raise ConfigurationError("no training fixtures")

    def objective(w):
        total, grad = 0.0, np.zeros_like(w)
        for fx in fixtures:
            l, g = per_fixture(fx, w)
            if not (np.isfinite(l) and np.all(np.isfinite(g))):
                raise NumericError(f"non-finite loss or gradient on episode {fx.name!r}")
            total += l
            grad += g
        return total / len(fixtures), grad / len(fixtures)

    return objective


def planning_objective(fixtures: Sequence[Fixture], lbp: LbpOptions = TRAINING_LBP) -> Callable:
    return mean_objective(fixtures, lambda fx, w: planning_loss_and_grad(fx, w, lbp))


def fit_weights(scenes: Sequence[Scene], init: EnergyWeights, opts: FitOptions = FitOptions(),
                callback: Callable | None = None, epsilon: float = 0.5) -> EnergyWeights:
    """Fit the agent-cost weights by minimizing the mean planning loss over scenes."""
    fixtures = [scene_fixture(s, init, epsilon) for s in scenes]
    res = minimize(planning_objective(fixtures, opts.lbp), init.w, opts, callback)
    return init.with_w(res.w)


def mean_planning_loss(scenes: Sequence[Scene], weights: EnergyWeights, epsilon: float = 0.5,
                       lbp: LbpOptions = TRAINING_LBP) -> float:
    fixtures = [scene_fixture(s, weights, epsilon) for s in scenes]
    return planning_objective(fixtures, lbp)(weights.w)[0]
