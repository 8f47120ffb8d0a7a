"""Trajectories, the straight/arc/spiral candidate sampler, and distance metrics."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from jointplan.errors import ConfigurationError, ShapeError
from jointplan.geometry import BoundingBox, Polyline, wrap_angle

__all__ = [
    "KinematicState",
    "Trajectory",
    "CandidateSet",
    "BoundingBox",
    "SamplerProfile",
    "sample_candidates",
    "trajectory_distance",
    "route_deviation",
    "near_set",
    "FAMILIES",
]

FAMILIES = ("straight", "arc", "spiral")


@dataclass(frozen=True)
class KinematicState:
    x: float
    y: float
    heading: float = 0.0
    speed: float = 0.0

    def __post_init__(self):
        if not self.speed >= 0:
            raise ConfigurationError(f"speed must be >= 0, got {self.speed}")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed])


class Trajectory:
    """Waypoint sequence sampled every ``dt`` seconds.

    Backed by a read-only ``(T, 4)`` array of ``x, y, heading, speed`` rows.
    """

    __slots__ = ("poses", "dt")

    def __init__(self, poses, dt: float, validate: bool = True):
        p = np.array(poses, dtype=float)
        if p.ndim != 2 or p.shape[1] != 4 or len(p) == 0:
            raise ShapeError(f"trajectory poses must be a non-empty (T, 4) array, got {p.shape}")
        if not dt > 0:
            raise ConfigurationError(f"dt must be positive, got {dt}")
        if validate:
            if np.any(p[:, 3] < 0):
                raise ConfigurationError("trajectory speeds must be non-negative")
            p[:, 2] = wrap_angle(p[:, 2])
            if len(p) > 1:
                step = np.hypot(*np.diff(p[:, :2], axis=0).T)
                if np.any(step > 2.0 * dt * p[:, 3].max() + 1e-9):
                    raise ConfigurationError("waypoint spacing inconsistent with speeds")
        p.setflags(write=False)
        self.poses = p
        self.dt = float(dt)

    @classmethod
    def from_states(cls, states: Sequence[KinematicState], dt: float) -> "Trajectory":
        return cls([s.as_array() for s in states], dt)

    def __len__(self) -> int:
        return len(self.poses)

    def __repr__(self) -> str:
        return f"Trajectory(steps={len(self)}, dt={self.dt})"

    @property
    def states(self) -> list[KinematicState]:
        return [KinematicState(*row) for row in self.poses]

    @property
    def horizon(self) -> float:
        return self.dt * (len(self.poses) - 1)

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :2]

    @property
    def speeds(self) -> np.ndarray:
        return self.poses[:, 3]

    def translated(self, dx: float, dy: float) -> "Trajectory":
        p = self.poses.copy()
        p[:, 0] += dx
        p[:, 1] += dy
        return Trajectory(p, self.dt)


@dataclass(frozen=True)
class SamplerProfile:
    """Grids and limits for the candidate sampler.

    Straight candidates use every acceleration; arcs use every non-zero curvature;
    spirals combine every curvature with every curvature rate. The raw set is
    deduplicated and reduced to ``k`` members (see :func:`sample_candidates`).
    """

    accelerations: tuple = (-4.0, -2.0, 0.0, 1.0, 2.0)
    curvatures: tuple = (0.0, 0.02, -0.02, 0.05, -0.05, 0.1, -0.1)
    curvature_rates: tuple = (0.005, -0.005, 0.01, -0.01)
    dt: float = 0.5
    horizon: float = 4.0
    k: int = 12
    families: tuple = FAMILIES
    substeps: int = 4
    max_lateral_accel: float = 4.0
    max_curvature: float = 0.25

    def __post_init__(self):
        for name in ("accelerations", "curvatures", "curvature_rates", "families"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if not self.dt > 0 or not self.horizon > 0:
            raise ConfigurationError("dt and horizon must be positive")
        if self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")
        if not self.accelerations:
            raise ConfigurationError("acceleration grid is empty")
        unknown = set(self.families) - set(FAMILIES)
        if unknown or not self.families:
            raise ConfigurationError(f"bad families {self.families}")
        if "arc" in self.families and not any(c != 0 for c in self.curvatures):
            raise ConfigurationError("arc family needs a non-zero curvature")
        if "spiral" in self.families and not (self.curvatures and self.curvature_rates):
            raise ConfigurationError("spiral family needs curvature and curvature-rate grids")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigurationError("horizon must be a whole number of dt steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt)) + 1

    def to_dict(self) -> dict:
        return {
            "accelerations": list(self.accelerations),
            "curvatures": list(self.curvatures),
            "curvature_rates": list(self.curvature_rates),
            "dt": self.dt,
            "horizon": self.horizon,
            "k": self.k,
            "families": list(self.families),
            "substeps": self.substeps,
            "max_lateral_accel": self.max_lateral_accel,
            "max_curvature": self.max_curvature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerProfile":
        known = cls.__dataclass_fields__
        bad = set(d) - set(known)
        if bad:
            raise ConfigurationError(f"unknown sampler keys: {sorted(bad)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """K candidate trajectories sharing an origin state; stored as a (K, T, 4) array."""

    array: np.ndarray
    origin: KinematicState
    family_tags: tuple
    dt: float
    params: np.ndarray = field(default=None, repr=False)  # (K, 3): accel, curvature, curvature rate

    def __post_init__(self):
        a = np.asarray(self.array, dtype=float)
        if a.ndim != 3 or a.shape[2] != 4 or a.shape[0] < 1:
            raise ShapeError(f"candidate array must be (K, T, 4), got {a.shape}")
        if len(self.family_tags) != a.shape[0]:
            raise ShapeError("one family tag per candidate required")
        a.setflags(write=False)
        object.__setattr__(self, "array", a)

    @property
    def k(self) -> int:
        return self.array.shape[0]

    @property
    def n_steps(self) -> int:
        return self.array.shape[1]

    @property
    def horizon(self) -> float:
        return self.dt * (self.n_steps - 1)

    def __len__(self) -> int:
        return self.k

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.array[i], self.dt, validate=False)

    @property
    def candidates(self) -> list[Trajectory]:
        return [self[i] for i in range(self.k)]


def _arclength(v0: float, a: np.ndarray, t: np.ndarray):
    """Exact distance travelled and speed under constant acceleration, stopping at zero speed."""
    a = a[:, None]
    t = t[None, :]
    v = np.maximum(v0 + a * t, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stop = np.where(a < 0, v0 / -a, np.inf)
    tc = np.minimum(t, t_stop)
    s = v0 * tc + 0.5 * a * tc * tc
    return s, v


def _integrate(origin: KinematicState, acc, k0, k1, dt: float, n_steps: int, substeps: int):
    """Integrate the unicycle for each parameter row; returns (R, T, 4) waypoints and (R, M) substep speed/curvature.

    Heading is closed-form in arclength, so position is the integral of the unit
    heading vector over arclength; each substep uses Simpson's rule with the heading
    at the substep's mid-arclength.
    """
    n_sub = (n_steps - 1) * substeps
    t = np.linspace(0.0, dt * (n_steps - 1), n_sub + 1)
    s, v = _arclength(origin.speed, acc, t)
    k0, k1 = k0[:, None], k1[:, None]

    def heading(s):
        return origin.heading + k0 * s + 0.5 * k1 * s * s

    theta = heading(s)
    ds = np.diff(s, axis=1)
    mid = heading(0.5 * (s[:, 1:] + s[:, :-1]))
    w = ds / 6.0
    dx = w * (np.cos(theta[:, :-1]) + 4.0 * np.cos(mid) + np.cos(theta[:, 1:]))
    dy = w * (np.sin(theta[:, :-1]) + 4.0 * np.sin(mid) + np.sin(theta[:, 1:]))
    x = origin.x + np.concatenate([np.zeros((len(acc), 1)), np.cumsum(dx, axis=1)], axis=1)
    y = origin.y + np.concatenate([np.zeros((len(acc), 1)), np.cumsum(dy, axis=1)], axis=1)
    sel = slice(None, None, substeps)
    out = np.stack([x[:, sel], y[:, sel], wrap_angle(theta[:, sel]), v[:, sel]], axis=-1)
    kappa = k0 + k1 * s
    return out, v, kappa


@functools.lru_cache(maxsize=64)
def _raw_grid(profile: SamplerProfile):
    rows, tags = [], []
    if "straight" in profile.families:
        for a in profile.accelerations:
            rows.append((a, 0.0, 0.0))
            tags.append("straight")
    if "arc" in profile.families:
        for c in profile.curvatures:
            if c == 0:
                continue
            for a in profile.accelerations:
                rows.append((a, c, 0.0))
                tags.append("arc")
    if "spiral" in profile.families:
        for c in profile.curvatures:
            for r in profile.curvature_rates:
                if r == 0:
                    continue
                for a in profile.accelerations:
                    rows.append((a, c, r))
                    tags.append("spiral")
    params = np.array(rows, dtype=float).reshape(-1, 3)
    params.setflags(write=False)
    return params, tuple(tags)


def _on_road(traj: np.ndarray, lanes) -> np.ndarray:
    """(R,) True where every waypoint center lies inside some lane."""
    pts = traj[:, :, :2].reshape(-1, 2)
    inside = np.zeros(len(pts), dtype=bool)
    for lane in lanes:
        inside |= np.abs(lane.centerline.project(pts)[3]) <= lane.half_width
    return inside.reshape(traj.shape[:2]).all(axis=1)


def _lane_fit(traj: np.ndarray, lanes, max_heading: float = 0.3) -> np.ndarray:
    """(R,) how far the final pose is from settling into a lane; inf when it is not settled in any."""
    end = traj[:, -1]
    best = np.full(len(traj), np.inf)
    for lane in lanes:
        _, _, tangent, lat = lane.centerline.project(end[:, :2])
        herr = np.abs(wrap_angle(end[:, 2] - tangent))
        off = np.abs(lat) / lane.half_width
        score = np.where((off < 0.5) & (herr < max_heading), off + herr / max_heading, np.inf)
        best = np.minimum(best, score)
    return best


def sample_candidates(origin: KinematicState, profile: SamplerProfile | None = None,
                      lanes: Sequence | None = None) -> CandidateSet:
    """Sample K distinct candidate trajectories from ``origin``.

    Straight candidates are always kept first (in acceleration-grid order) since
    longitudinal options drive yielding. Remaining slots are filled by farthest-point
    selection (mean waypoint distance) over curved candidates that respect the
    lateral-acceleration and curvature limits, then, if still short, over the
    infeasible ones in order of least violation. With ``lanes`` given, curved
    candidates that stay on the lanes and settle into one (centered and aligned
    at the horizon, e.g. a completed lane change) are taken first, by farthest-point
    selection up to half the remaining slots; then the rest of the on-lane
    candidates; candidates leaving the lanes come last.
    """
    profile = profile or SamplerProfile()
    params, tags = _raw_grid(profile)
    if len(params) == 0:
        raise ConfigurationError("profile produces no candidates")
    traj, v, kappa = _integrate(origin, params[:, 0], params[:, 1], params[:, 2],
                                profile.dt, profile.n_steps, profile.substeps)

    # deduplicate (e.g. every braking candidate from standstill is the same trajectory)
    keys = np.round(traj[:, :, :2], 9) + 0.0  # + 0.0 folds -0.0 into 0.0
    seen = {}
    for i in range(len(keys)):
        seen.setdefault(keys[i].tobytes(), i)
    unique = np.zeros(len(traj), dtype=bool)
    unique[list(seen.values())] = True
    if unique.sum() < profile.k:
        raise ConfigurationError(
            f"profile yields only {int(unique.sum())} distinct candidates from this origin, k={profile.k}")

    violation = np.maximum(np.abs(kappa) * v * v - profile.max_lateral_accel, 0).max(axis=1)
    violation += np.maximum(np.abs(kappa) * (v > 0) - profile.max_curvature, 0).max(axis=1) * 100.0

    straight = [i for i in range(len(tags)) if tags[i] == "straight" and unique[i]]
    chosen = straight[: profile.k]
    taken = set(chosen)
    rest = [i for i in range(len(tags)) if unique[i] and i not in taken]
    feasible = [i for i in rest if violation[i] == 0]
    infeasible = sorted((i for i in rest if violation[i] > 0), key=lambda i: (violation[i], i))

    pts = traj[:, :, :2]
    if lanes:
        road = _on_road(traj, lanes)
        fit = _lane_fit(traj, lanes)
        settled = [i for i in feasible if road[i] and np.isfinite(fit[i])]
        chosen = _farthest_point(pts, chosen, settled, len(chosen) + (profile.k - len(chosen)) // 2)
        chosen = _farthest_point(pts, chosen, [i for i in feasible if road[i] and i not in chosen], profile.k)
        feasible = [i for i in feasible if not road[i]]
    chosen = _farthest_point(pts, chosen, feasible, profile.k)
    if len(chosen) < profile.k:
        chosen = chosen + infeasible[: profile.k - len(chosen)]
    chosen = np.array(chosen[: profile.k])
    return CandidateSet(traj[chosen], origin, tuple(tags[i] for i in chosen), profile.dt, params[chosen])


def _farthest_point(pts: np.ndarray, chosen: list, pool: list, k: int) -> list:
    chosen = list(chosen)
    if not pool or len(chosen) >= k:
        return chosen
    pool = np.array(pool)
    cand = pts[pool]  # (P, T, 2)
    if chosen:
        diff = cand[:, None] - pts[chosen][None]
        d = np.sqrt((diff * diff).sum(-1)).mean(-1).min(axis=1)
    else:
        d = np.zeros(len(pool))
        d[0] = np.inf
    while len(chosen) < k:
        j = int(np.argmax(d))
        if d[j] == -np.inf:
            break
        chosen.append(int(pool[j]))
        diff = cand - cand[j]
        d = np.minimum(d, np.sqrt((diff * diff).sum(-1)).mean(-1))
        d[j] = -np.inf
    return chosen


def _positions(t) -> np.ndarray:
    return t.positions if isinstance(t, Trajectory) else np.asarray(t, dtype=float)[..., :2]


def trajectory_distance(a, b) -> float:
    """Mean Euclidean distance between corresponding waypoints."""
    pa, pb = _positions(a), _positions(b)
    if pa.shape != pb.shape:
        raise ShapeError(f"trajectories differ in step count: {pa.shape[0]} vs {pb.shape[0]}")
    if isinstance(a, Trajectory) and isinstance(b, Trajectory) and a.dt != b.dt:
        raise ShapeError(f"trajectories differ in dt: {a.dt} vs {b.dt}")
    return float(np.hypot(*(pa - pb).T).mean())


def candidate_distances(gt, cset: CandidateSet) -> np.ndarray:
    """trajectory_distance from ``gt`` to every candidate, as a length-K vector."""
    p = _positions(gt)
    if p.shape[0] != cset.n_steps:
        raise ShapeError(f"ground truth has {p.shape[0]} steps, candidates have {cset.n_steps}")
    diff = cset.array[:, :, :2] - p[None]
    return np.hypot(diff[..., 0], diff[..., 1]).mean(axis=1)


def route_deviation(t, route: Polyline) -> float:
    """Mean perpendicular distance from the waypoints to the route polyline."""
    if not isinstance(route, Polyline):
        route = Polyline(route)
    return float(route.distance(_positions(t)).mean())


def near_set(gt, cset: CandidateSet, epsilon: float) -> tuple:
    """Indices of candidates whose distance to ``gt`` is strictly below ``epsilon``."""
    if epsilon < 0:
        raise ConfigurationError("epsilon must be >= 0")
    d = candidate_distances(gt, cset)
    return tuple(int(i) for i in np.flatnonzero(d < epsilon))
