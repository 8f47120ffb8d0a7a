"""Detection, prediction/planning, and distillation losses as pure functions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from jointplan.errors import ConfigurationError, DomainError, ShapeError
from jointplan.inference import ConditionalMarginals
from jointplan.trajectory import CandidateSet, candidate_distances, near_set, trajectory_distance

PROB_ATOL = 1e-6
REG_STATES = ("dx", "dy", "width", "height", "sin_yaw", "cos_yaw", "vx", "vy")


def _xlogy(x, y):
    """x * log(y) with 0 * log(0) = 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x * np.log(y)
    return np.where(x == 0, 0.0, out)


def _check_prob_rows(p, name):
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        p = p[None]
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=PROB_ATOL):
        raise DomainError(f"{name} rows must be probability distributions")
    return p


def cross_entropy(target, pred) -> float:
    """Sum over rows of -sum_c target_c log pred_c."""
    t = _check_prob_rows(target, "target")
    p = _check_prob_rows(pred, "prediction")
    if t.shape != p.shape:
        raise ShapeError(f"target {t.shape} vs prediction {p.shape}")
    return float(-_xlogy(t, p).sum())


def smooth_l1(x, beta: float = 1.0):
    a = np.abs(np.asarray(x, dtype=float))
    return np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


@dataclass(frozen=True, eq=False)
class DetectionBatch:
    """Class distributions (M, C) and 8-state regression rows (M, 8).

    Regression columns follow :data:`REG_STATES`.
    """

    class_target: np.ndarray
    class_pred: np.ndarray
    reg_target: np.ndarray
    reg_pred: np.ndarray

    def __post_init__(self):
        for name in ("class_target", "class_pred", "reg_target", "reg_pred"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if self.reg_target.shape != self.reg_pred.shape or self.reg_target.shape[-1] != len(REG_STATES):
            raise ShapeError(f"regression rows must be (M, {len(REG_STATES)}) and aligned")


def detection_class_loss(batch: DetectionBatch) -> float:
    return cross_entropy(batch.class_target, batch.class_pred)


def detection_reg_loss(batch: DetectionBatch) -> float:
    return float(smooth_l1(batch.reg_pred - batch.reg_target).sum())


def detection_loss(batch: DetectionBatch) -> float:
    return detection_class_loss(batch) + detection_reg_loss(batch)


def distill_class_loss(teacher_pred, student_pred) -> float:
    """Cross entropy of the student's class distribution against the teacher's soft one."""
    return cross_entropy(teacher_pred, student_pred)


def distill_reg_loss(gt, teacher_pred, student_pred) -> float:
    """Smooth-L1 pull toward the teacher, only on states where the student is strictly worse than the teacher."""
    gt, t, s = (np.asarray(a, dtype=float) for a in (gt, teacher_pred, student_pred))
    if not (gt.shape == t.shape == s.shape):
        raise ShapeError(f"shapes differ: {gt.shape}, {t.shape}, {s.shape}")
    gate = np.abs(gt - s) > np.abs(gt - t)
    return float(np.where(gate, smooth_l1(t - s), 0.0).sum())


def distill_feature_loss(teacher, student) -> float:
    t = np.asarray(teacher, dtype=float).ravel()
    s = np.asarray(student, dtype=float).ravel()
    if t.shape != s.shape:
        raise ShapeError(f"feature embeddings differ in size: {t.size} vs {s.size}")
    return float(np.abs(t - s).sum())


@dataclass(frozen=True, eq=False)
class TrajectoryTargets:
    """Ground-truth candidate index per node plus the near sets excluded from the penalty."""

    indices: tuple
    near_sets: tuple
    n_states: int
    nearest: tuple = None
    gt: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.indices) != len(self.near_sets):
            raise ShapeError("one near set per target required")
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "near_sets", tuple(tuple(sorted(int(x) for x in s)) for s in self.near_sets))
        nearest = self.indices if self.nearest is None else tuple(int(i) for i in self.nearest)
        object.__setattr__(self, "nearest", nearest)
        for t, u, n in zip(self.indices, self.near_sets, nearest):
            if not 0 <= t < self.n_states:
                raise ShapeError(f"target index {t} out of range")
            if t in u and t != n:
                raise ConfigurationError(f"target {t} lies in the masked near set but is not the nearest candidate {n}")

    @property
    def target_unary(self) -> np.ndarray:
        return np.eye(self.n_states)[list(self.indices)]

    def target_pairwise(self, edges) -> dict:
        out = {}
        for i, j in edges:
            m = np.zeros((self.n_states, self.n_states))
            m[self.indices[i], self.indices[j]] = 1.0
            out[(i, j)] = m
        return out

    def keep_mask(self, node: int) -> np.ndarray:
        """Candidates that enter the loss: everything outside the near set, plus the target itself."""
        keep = np.ones(self.n_states, dtype=bool)
        keep[list(self.near_sets[node])] = False
        keep[self.indices[node]] = True
        return keep


def make_targets(gt: Sequence, sets: Sequence[CandidateSet], epsilon: float = 0.5) -> TrajectoryTargets:
    """Nearest candidate and near set for each ground-truth trajectory."""
    if len(gt) != len(sets):
        raise ShapeError("one ground-truth trajectory per candidate set required")
    idx, near = [], []
    for g, s in zip(gt, sets):
        d = candidate_distances(g, s)
        idx.append(int(np.argmin(d)))
        near.append(near_set(g, s, epsilon))
    return TrajectoryTargets(tuple(idx), tuple(near), sets[0].k, tuple(idx), tuple(gt))


def _masked_ce(p: np.ndarray, target: int, keep: np.ndarray) -> float:
    kept = float(p[keep].sum())
    with np.errstate(divide="ignore"):
        return float(-np.log(p[target]) + np.log(kept))


def prediction_planning_loss(marginals: ConditionalMarginals, targets: TrajectoryTargets) -> float:
    """Cross entropy of unary and pairwise marginals against the targets.

    Near-set candidates other than the target are removed and the remainder
    renormalized before taking the log; pairwise tables use the product of the
    two nodes' kept sets.
    """
    n = marginals.unary.shape[0]
    if n != len(targets.indices) or marginals.unary.shape[1] != targets.n_states:
        raise ShapeError(f"marginals {marginals.unary.shape} vs {len(targets.indices)} targets")
    loss = 0.0
    for i in range(n):
        loss += _masked_ce(marginals.unary[i], targets.indices[i], targets.keep_mask(i))
    for (i, j), p in marginals.pairwise.items():
        keep = np.outer(targets.keep_mask(i), targets.keep_mask(j))
        t = targets.indices[i] * targets.n_states + targets.indices[j]
        loss += _masked_ce(p.ravel(), t, keep.ravel())
    return float(loss)


def soft_planning_loss(teacher: ConditionalMarginals, student: ConditionalMarginals) -> float:
    """Same two-part cross entropy with the teacher's marginals as soft targets (no masking)."""
    if teacher.unary.shape != student.unary.shape:
        raise ShapeError("teacher and student marginals are not aligned")
    loss = float(-_xlogy(teacher.unary, student.unary).sum())
    for e, q in teacher.pairwise.items():
        if e not in student.pairwise:
            raise ShapeError(f"student has no edge {e}")
        loss -= float(_xlogy(q, student.pairwise[e]).sum())
    return loss


@dataclass(eq=False)
class ModelOutput:
    """What a model produces for one scene: marginals and its selected trajectory per node."""

    marginals: ConditionalMarginals
    selected: tuple  # one trajectory (or (T, >=2) array) per node
    energies: np.ndarray | None = None  # agent-cost map, the feature embedding for distillation


def selection_distance(gt: Sequence, selected: Sequence) -> float:
    if len(gt) != len(selected):
        raise ShapeError("ground truth and selection differ in node count")
    return float(sum(trajectory_distance(g, s) for g, s in zip(gt, selected)))


def distill_plan_gate(gt: Sequence, teacher_out: ModelOutput, student_out: ModelOutput) -> bool:
    return selection_distance(gt, student_out.selected) > selection_distance(gt, teacher_out.selected)


def distill_plan_loss(gt: Sequence, teacher_out: ModelOutput, student_out: ModelOutput) -> float:
    """Soft-target planning loss, applied only while the student's selections are further from ground truth."""
    if teacher_out.marginals.unary.shape != student_out.marginals.unary.shape:
        raise ShapeError("teacher and student outputs cover different candidate sets")
    if not distill_plan_gate(gt, teacher_out, student_out):
        return 0.0
    return soft_planning_loss(teacher_out.marginals, student_out.marginals)


@dataclass(frozen=True)
class LossWeights:
    detection: float = 1.0       # lambda_O
    planning: float = 1.0        # lambda_P
    distill: float = 1.0         # lambda_D
    distill_detection: float = 1.0  # lambda_DO
    distill_planning: float = 1.0   # lambda_DP
    distill_feature: float = 1.0    # lambda_DF

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not v >= 0:
                raise ConfigurationError(f"loss weight {name} must be non-negative, got {v}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        bad = set(d) - set(cls.__dataclass_fields__)
        if bad:
            raise ConfigurationError(f"unknown loss weights: {sorted(bad)}")
        return cls(**d)


def distillation_loss(det_distill: float, plan_distill: float, feature_distill: float, lw: LossWeights) -> float:
    return lw.distill_detection * det_distill + lw.distill_planning * plan_distill + lw.distill_feature * feature_distill


def teacher_loss(det_loss: float, plan_loss: float, lw: LossWeights = LossWeights()) -> float:
    return lw.detection * det_loss + lw.planning * plan_loss


def student_loss(det_loss: float, plan_loss: float, det_distill: float, plan_distill: float,
                 feature_distill: float, lw: LossWeights = LossWeights()) -> float:
    return (lw.detection * det_loss + lw.planning * plan_loss
            + lw.distill * distillation_loss(det_distill, plan_distill, feature_distill, lw))
