"""Unicycle kinematics, rollouts and reference windows along a polyline path."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import wrap_angle


class VehicleState(NamedTuple):
    x: float
    y: float
    theta: float


class Action(NamedTuple):
    v: float
    psi: float


@dataclass(frozen=True)
class ActionBounds:
    v_min: float = 0.0
    v_max: float = 8.0
    psi_min: float = -1.0
    psi_max: float = 1.0

    def __post_init__(self):
        if self.v_min > self.v_max or self.psi_min > self.psi_max:
            raise ValueError(f"inverted action bounds: {self}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.v_min, self.psi_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.v_max, self.psi_max])

    def clip(self, actions) -> np.ndarray:
        return np.clip(np.asarray(actions, dtype=float), self.lower, self.upper)


def step(s, w, dt: float) -> VehicleState:
    """One explicit-Euler step of the unicycle model."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x, y, th = s
    v, psi = w
    return VehicleState(
        x + v * math.cos(th) * dt,
        y + v * math.sin(th) * dt,
        wrap_angle(th + psi * dt),
    )


def rollout(s0, actions, dt: float) -> np.ndarray:
    """States s_1..s_H generated by applying ``actions`` from ``s0``; shape (H, 3)."""
    actions = np.asarray(actions, dtype=float)
    if actions.ndim != 2 or len(actions) == 0:
        raise ValueError("rollout needs a non-empty (H, 2) action sequence")
    out = np.empty((len(actions), 3))
    s = VehicleState(*(float(c) for c in s0))
    for k, (v, psi) in enumerate(actions):
        s = step(s, (float(v), float(psi)), dt)
        out[k] = s
    return out


def planar_velocity(theta, v):
    return np.stack([v * np.cos(theta), v * np.sin(theta)], axis=-1)


class ReferencePath:
    """Polyline reference with arc-length parametrisation.

    The ego tracks poses sampled every ``cruise_speed * dt`` along the path
    from its projection point; past the last waypoint it holds the goal.
    """

    def __init__(self, waypoints, cruise_speed: float = 5.0):
        wp = np.asarray(waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 2:
            raise ValueError("reference path needs at least 2 waypoints of shape (n, 2)")
        seg = np.diff(wp, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len <= 0.0):
            raise ValueError("consecutive waypoints must be distinct")
        if cruise_speed < 0:
            raise ValueError("cruise_speed must be non-negative")
        self.waypoints = wp
        self.cruise_speed = float(cruise_speed)
        self._seg = seg
        self._seg_len = seg_len
        self._cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self._tangent = np.arctan2(seg[:, 1], seg[:, 0])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1]

    @property
    def goal_heading(self) -> float:
        return float(self._tangent[-1])

    def project(self, point) -> float:
        """Arc length of the closest point on the path."""
        p = np.asarray(point, dtype=float)[:2]
        rel = p - self.waypoints[:-1]
        t = np.clip(np.sum(rel * self._seg, axis=1) / self._seg_len**2, 0.0, 1.0)
        closest = self.waypoints[:-1] + t[:, None] * self._seg
        k = int(np.argmin(np.sum((closest - p) ** 2, axis=1)))
        return float(self._cum[k] + t[k] * self._seg_len[k])

    def pose_at(self, s):
        """Pose (x, y, heading) at arc lengths ``s`` (clamped to the path)."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        k = np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self._seg) - 1)
        frac = (s - self._cum[k]) / self._seg_len[k]
        xy = self.waypoints[k] + frac[..., None] * self._seg[k]
        return np.concatenate([xy, self._tangent[k][..., None]], axis=-1)

    def reference_window(self, s, horizon: int, dt: float):
        """Reference states (H, 3) and actions (H, 2) for the next ``horizon`` steps."""
        return reference_window(self, s, horizon, dt)


def reference_window(path: ReferencePath, s, horizon: int, dt: float):
    s0 = path.project(s)
    ds = path.cruise_speed * dt
    arc = s0 + ds * np.arange(1, horizon + 1)
    states = path.pose_at(arc)
    actions = np.zeros((horizon, 2))
    actions[:, 0] = path.cruise_speed
    past = arc >= path.length - 1e-12
    if np.any(past):
        states[past] = np.array([*path.goal, path.goal_heading])
        # the step that lands exactly on the goal is still a cruise step
        first_past = arc - ds >= path.length - 1e-12
        actions[first_past] = 0.0
    return states, actions
