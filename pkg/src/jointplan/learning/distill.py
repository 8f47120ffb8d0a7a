"""Teacher/student training on scenes with logged futures.

The teacher sees two extra features computed from each agent's logged future;
the student sees only the current state and learns from ground truth plus the
teacher's marginals, selections and cost maps.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from jointplan.energy import EnergyTables, EnergyWeights, default_weights, energy_tables
from jointplan.errors import ConfigurationError
from jointplan.inference import LbpOptions
from jointplan.learning.fit import FitOptions, Scene, mean_objective, mean_planning_loss, minimize, \
    planning_objective, scene_fixture
from jointplan.learning.gradient import TRAINING_LBP, Fixture, loss_and_grad, planning_logit_grads, \
    run_lbp, soft_logit_grads
from jointplan.learning.losses import LossWeights, ModelOutput, distill_feature_loss, selection_distance
from jointplan.planner import plan


def teacher_init() -> EnergyWeights:
    return default_weights(privileged=True)


def student_init() -> EnergyWeights:
    return default_weights(privileged=False)


def _tables_with(tables: EnergyTables, w) -> EnergyTables:
    return replace(tables, agent=tables.features @ np.asarray(w, dtype=float))


def select(scene: Scene, tables: EnergyTables, lbp: LbpOptions | None = None) -> tuple:
    """Indices the model picks: the planned ego candidate, then each agent's most likely reply."""
    res = plan(scene.ctx, scene.sets, None, "interactive", lbp, radius=None, tables=tables)
    agents = np.argmax(res.predictions.unary, axis=1) if tables.n_agents else []
    return (res.chosen_index,) + tuple(int(a) for a in agents)


@dataclass(eq=False)
class DistillFixture:
    """A student fixture bundled with the teacher's outputs on the same scene."""

    scene: Scene
    fixture: Fixture
    tables: EnergyTables
    teacher: ModelOutput

    @property
    def name(self) -> str:
        return self.scene.name


def teacher_output(scene: Scene, teacher_w: EnergyWeights, epsilon: float = 0.5,
                   lbp: LbpOptions = TRAINING_LBP) -> ModelOutput:
    tables = energy_tables(scene.ctx, scene.sets, teacher_w)
    fx = scene_fixture(scene, teacher_w, epsilon, tables)
    marg = run_lbp(fx.skeleton, fx.unary(teacher_w.w), lbp)
    picks = select(scene, tables)
    selected = tuple(s[i] for s, i in zip(scene.sets, picks))
    return ModelOutput(marg, selected, tables.agent)


def distill_fixtures(scenes: Sequence[Scene], teacher_w: EnergyWeights, student_w: EnergyWeights,
                     epsilon: float = 0.5) -> list:
    out = []
    for s in scenes:
        tables = energy_tables(s.ctx, s.sets, student_w)
        out.append(DistillFixture(s, scene_fixture(s, student_w, epsilon, tables), tables,
                                  teacher_output(s, teacher_w, epsilon)))
    return out


def student_loss_and_grad(df: DistillFixture, w, lw: LossWeights, lbp: LbpOptions = TRAINING_LBP):
    """Planning loss plus the gated plan-distillation and feature-distillation terms, with gradient.

    Detection terms are constant here (perception is ground truth), so they drop out.
    """
    fx = df.fixture
    loss, grad, _ = loss_and_grad(fx, w, lambda m: planning_logit_grads(m, fx.targets), lbp)
    loss *= lw.planning
    grad = grad * lw.planning
    if lw.distill == 0:
        return loss, grad
    if lw.distill_planning:
        tables = _tables_with(df.tables, w)
        picks = select(df.scene, tables)
        selected = tuple(s[i] for s, i in zip(df.scene.sets, picks))
        student = ModelOutput(None, selected)
        if selection_distance(df.scene.gt, student.selected) > selection_distance(df.scene.gt, df.teacher.selected):
            l_dp, g_dp, _ = loss_and_grad(fx, w, lambda m: soft_logit_grads(m, df.teacher.marginals), lbp)
            loss += lw.distill * lw.distill_planning * l_dp
            grad = grad + lw.distill * lw.distill_planning * g_dp
    if lw.distill_feature:
        energies = fx.features @ w
        diff = df.teacher.energies - energies
        loss += lw.distill * lw.distill_feature * distill_feature_loss(df.teacher.energies, energies)
        grad = grad - lw.distill * lw.distill_feature * np.einsum("nk,nkf->f", np.sign(diff), fx.features)
    return loss, grad


def fit_teacher(scenes: Sequence[Scene], opts: FitOptions = FitOptions(), init: EnergyWeights | None = None,
                epsilon: float = 0.5, callback=None) -> EnergyWeights:
    init = init or teacher_init()
    if not init.privileged:
        raise ConfigurationError("teacher weights must include the privileged features")
    fixtures = [scene_fixture(s, init, epsilon) for s in scenes]
    return init.with_w(minimize(planning_objective(fixtures, opts.lbp), init.w, opts, callback).w)


def fit_student(scenes: Sequence[Scene], teacher: EnergyWeights | None, lw: LossWeights = LossWeights(),
                opts: FitOptions = FitOptions(), init: EnergyWeights | None = None, epsilon: float = 0.5,
                callback=None) -> EnergyWeights:
    """Student fit; with ``teacher=None`` (or zero distillation weight) this is plain planning-loss training."""
    init = init or student_init()
    if init.privileged:
        raise ConfigurationError("student weights must not include privileged features")
    if teacher is None or lw.distill == 0:
        fixtures = [scene_fixture(s, init, epsilon) for s in scenes]
        objective = planning_objective(fixtures, opts.lbp)
        if lw.planning != 1.0:
            base = objective
            objective = lambda w: tuple(lw.planning * v for v in base(w))  # noqa: E731
    else:
        dfs = distill_fixtures(scenes, teacher, init, epsilon)
        objective = mean_objective(dfs, lambda d, w: student_loss_and_grad(d, w, lw, opts.lbp))
    return init.with_w(minimize(objective, init.w, opts, callback).w)


@dataclass(frozen=True)
class SplitResult:
    seed: int
    train: tuple  # corpus indices
    test: tuple
    plain_loss: float      # held-out planning loss, student trained without distillation
    distilled_loss: float  # same, with distillation

    @property
    def distillation_helped(self) -> bool:
        return self.distilled_loss <= self.plain_loss


def split(pool: Sequence[int], seed: int, n_train: int, n_test: int) -> tuple:
    """Disjoint random train and held-out subsets of ``pool``."""
    if n_train < 1 or n_test < 1 or n_train + n_test > len(pool):
        raise ConfigurationError(f"cannot draw {n_train} + {n_test} scenes from a pool of {len(pool)}")
    perm = np.random.default_rng(seed).permutation(len(pool))
    pick = [pool[i] for i in perm]
    return tuple(sorted(pick[:n_train])), tuple(sorted(pick[n_train:n_train + n_test]))


def run_splits(teacher: EnergyWeights, scenes: Sequence[Scene], pool: Sequence[int], seeds: Sequence[int],
               n_train: int, n_test: int, lw: LossWeights = LossWeights(), opts: FitOptions = FitOptions(),
               epsilon: float = 0.5, on_result: Callable | None = None) -> list:
    """For each seed: fit a student with and without distillation on the train subset, score both held out.

    ``scenes`` is indexed by corpus position; only entries named by the splits are touched.
    """
    out = []
    for seed in seeds:
        tr, te = split(pool, seed, n_train, n_test)
        train = [scenes[i] for i in tr]
        test = [scenes[i] for i in te]
        plain = fit_student(train, None, lw, opts, epsilon=epsilon)
        distilled = fit_student(train, teacher, lw, opts, epsilon=epsilon)
        res = SplitResult(seed, tr, te, mean_planning_loss(test, plain, epsilon, opts.lbp),
                          mean_planning_loss(test, distilled, epsilon, opts.lbp))
        if on_result:
            on_result(res)
        out.append(res)
    return out
