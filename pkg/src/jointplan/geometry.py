"""Planar geometry: angle wrapping, polylines and lanes, oriented boxes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from jointplan.errors import ConfigurationError

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]. Works on scalars and arrays."""
    if np.isscalar(theta):
        w = math.remainder(float(theta), TWO_PI)
        return math.pi if w == -math.pi else w
    w = np.remainder(np.asarray(theta, dtype=float) + math.pi, TWO_PI) - math.pi
    return np.where(w == -math.pi, math.pi, w)


@dataclass(frozen=True)
class BoundingBox:
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ConfigurationError(f"box dimensions must be positive, got {self.length}x{self.width}")


@dataclass(frozen=True, eq=False)
class Polyline:
    """Open polyline through ``vertices`` (M x 2)."""

    vertices: np.ndarray
    _seg_len: np.ndarray = field(init=False, repr=False)
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) < 2:
            raise ConfigurationError("polyline needs at least 2 vertices")
        seg = np.hypot(*np.diff(v, axis=0).T)
        if not np.any(seg > 0):
            raise ConfigurationError("degenerate polyline: all vertices coincide")
        # drop zero-length segments so projections are well defined
        keep = np.concatenate([[True], seg > 0])
        v = v[keep]
        seg = seg[seg > 0]
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "_seg_len", seg)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(seg)]))

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def project(self, points):
        """Project points onto the polyline.

        Returns ``(distance, arclength, tangent_heading, signed_lateral)`` arrays with
        the leading shape of ``points``. Lateral offset is positive to the left.
        """
        p = np.asarray(points, dtype=float)
        lead = p.shape[:-1]
        p = p.reshape(-1, 2)
        a = self.vertices[:-1]
        d = np.diff(self.vertices, axis=0)
        L2 = self._seg_len ** 2
        rel = p[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("psk,sk->ps", rel, d) / L2, 0.0, 1.0)
        foot = a[None] + t[..., None] * d[None]
        diff = p[:, None, :] - foot
        dist = np.hypot(diff[..., 0], diff[..., 1])
        best = np.argmin(dist, axis=1)
        idx = np.arange(len(p))
        dmin = dist[idx, best]
        s = self._cum[best] + t[idx, best] * self._seg_len[best]
        tan = d[best]
        heading = np.arctan2(tan[:, 1], tan[:, 0])
        cross = tan[:, 0] * diff[idx, best, 1] - tan[:, 1] * diff[idx, best, 0]
        lateral = np.where(cross >= 0, dmin, -dmin)
        return (dmin.reshape(lead), s.reshape(lead), heading.reshape(lead), lateral.reshape(lead))

    def distance(self, points):
        return self.project(points)[0]

    def point_at(self, s: float):
        """Position and tangent heading at arclength ``s``; linear extrapolation past either end."""
        i = int(np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self._seg_len) - 1))
        d = self.vertices[i + 1] - self.vertices[i]
        u = d / self._seg_len[i]
        p = self.vertices[i] + u * (s - self._cum[i])
        return p, math.atan2(u[1], u[0])


@dataclass(frozen=True, eq=False)
class Lane:
    centerline: Polyline
    width: float = 3.5

    @property
    def half_width(self) -> float:
        return 0.5 * self.width


def box_corners(x, y, heading, length, width):
    """Corners of oriented rectangles, counter-clockwise. Output shape (..., 4, 2)."""
    x, y, heading = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(heading, float))
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    cx = x[..., None] + c[..., None] * local[:, 0] - s[..., None] * local[:, 1]
    cy = y[..., None] + s[..., None] * local[:, 0] + c[..., None] * local[:, 1]
    return np.stack([cx, cy], axis=-1)
