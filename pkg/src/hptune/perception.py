"""Simulated 2D Doppler LiDAR, ray-wise velocity recovery and Kalman tracking.

Sign convention: rays point from the ego outward, and the Doppler reading is
the relative velocity ``(v_obs - v_ego)`` projected on the ray. An obstacle
approaching the sensor therefore reads negative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import box_corners
from .planner import ObstaclePrediction


@dataclass(frozen=True)
class SensorConfig:
    angular_resolution: float = math.radians(0.5)
    max_range: float = 50.0
    doppler_noise_std: float = 0.1
    range_noise_std: float = 0.02

    def __post_init__(self):
        if self.angular_resolution <= 0:
            raise ValueError("angular_resolution must be positive")
        if self.doppler_noise_std < 0 or self.range_noise_std < 0:
            raise ValueError("noise standard deviations must be non-negative")


@dataclass(frozen=True)
class KalmanConfig:
    sigma_p: float = 0.05
    sigma_v: float = 0.5
    meas_pos_std: float = 0.1
    meas_vel_std: float = 0.3
    init_cov: float = 10.0
    heading_speed: float = 0.1

    @property
    def Q(self) -> np.ndarray:
        return np.diag([self.sigma_p**2] * 2 + [self.sigma_v**2] * 2)

    @property
    def R(self) -> np.ndarray:
        return np.diag([self.meas_pos_std**2] * 2 + [self.meas_vel_std**2] * 2)


@dataclass
class DopplerScan:
    """Column-oriented scan: one row per returned ray."""

    hits: np.ndarray  # (K, 2)
    ray_dirs: np.ndarray  # (K, 2)
    doppler: np.ndarray  # (K,)
    obstacle_ids: np.ndarray  # (K,)

    def __len__(self):
        return len(self.doppler)

    def for_obstacle(self, n: int) -> "DopplerScan":
        m = self.obstacle_ids == n
        return DopplerScan(self.hits[m], self.ray_dirs[m], self.doppler[m], self.obstacle_ids[m])


@dataclass
class ObstacleTrack:
    state: np.ndarray  # (px, py, vx, vy)
    covariance: np.ndarray  # (4, 4)
    length: float = 4.0
    width: float = 2.0
    last_heading: float = 0.0
    missed: int = 0
    obstacle_id: int = 0

    @property
    def position(self) -> np.ndarray:
        return self.state[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[2:]


def scan(ego, ego_vel, obstacles, cfg: SensorConfig, rng=None) -> DopplerScan:
    """Cast rays around the ego and return the nearest hit per ray.

    ``obstacles`` is a sequence of ``(x, y, heading, vx, vy, length, width)``
    rows (array-like of shape (N, 7)). The first ray points along the ego
    heading; the obstacle index is reported with every point.
    """
    obs = np.asarray(obstacles, dtype=float).reshape(-1, 7)
    n_rays = int(round(2.0 * math.pi / cfg.angular_resolution))
    empty = DopplerScan(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=int))
    if len(obs) == 0 or n_rays == 0:
        return empty
    origin = np.asarray(ego, dtype=float)[:2]
    ang = float(ego[2]) + cfg.angular_resolution * np.arange(n_rays)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)

    corners = box_corners(obs[:, 0], obs[:, 1], obs[:, 2], obs[:, 5], obs[:, 6])  # (N, 4, 2)
    a = corners.reshape(-1, 2)
    e = (np.roll(corners, -1, axis=1) - corners).reshape(-1, 2)
    owner = np.repeat(np.arange(len(obs)), 4)
    # origin + t*dir = a + s*e  ->  solve with 2D cross products
    rel = a - origin
    den = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[None, :, 0] * e[None, :, 1] - rel[None, :, 1] * e[None, :, 0]) / den
        s = (rel[None, :, 0] * dirs[:, None, 1] - rel[None, :, 1] * dirs[:, None, 0]) / den
    ok = (np.abs(den) > 1e-12) & (t > 0.0) & (s >= 0.0) & (s <= 1.0) & (t <= cfg.max_range)
    t = np.where(ok, t, np.inf)
    k = np.argmin(t, axis=1)
    t_hit = t[np.arange(n_rays), k]
    got = np.isfinite(t_hit)
    if not np.any(got):
        return empty
    dirs, t_hit, ids = dirs[got], t_hit[got], owner[k[got]]

    rng = np.random.default_rng() if rng is None else rng
    rel_vel = obs[ids, 3:5] - np.asarray(ego_vel, dtype=float)
    doppler = np.sum(rel_vel * dirs, axis=1)
    if cfg.doppler_noise_std > 0:
        doppler = doppler + rng.normal(0.0, cfg.doppler_noise_std, len(doppler))
    if cfg.range_noise_std > 0:
        t_hit = t_hit + rng.normal(0.0, cfg.range_noise_std, len(t_hit))
    hits = origin + t_hit[:, None] * dirs
    return DopplerScan(hits, dirs, doppler, ids.astype(int))


def estimate_velocity(ray_dirs, doppler, ego_vel, max_cond: float = 1e6) -> np.ndarray:
    """Least-squares obstacle velocity from per-ray Doppler readings.

    Falls back to the mean-ray (radial only) solution when the rays are too
    close to parallel to observe the tangential component.
    """
    r = np.asarray(ray_dirs, dtype=float).reshape(-1, 2)
    d = np.asarray(doppler, dtype=float).reshape(-1)
    if len(d) == 0:
        raise ValueError("estimate_velocity needs at least one point")
    ego_vel = np.asarray(ego_vel, dtype=float)
    A = r.T @ r
    b = r.T @ (d + r @ ego_vel)
    if np.linalg.cond(A) <= max_cond:
        return np.linalg.solve(A, b)
    r_bar = r.mean(axis=0)
    r_bar = r_bar / np.linalg.norm(r_bar)
    return ego_vel + d.mean() * r_bar


def fit_center(hits, ego_xy, heading: float, length: float, width: float) -> np.ndarray:
    """Center of a known-size box fitted to the visible surface points.

    Along each box axis the observed extent is anchored on the side facing the
    sensor; the hidden far side is placed one box dimension away.
    """
    hits = np.asarray(hits, dtype=float).reshape(-1, 2)
    u = np.array([math.cos(heading), math.sin(heading)])
    n = np.array([-u[1], u[0]])
    center = np.zeros(2)
    for axis, size in ((u, length), (n, width)):
        proj = hits @ axis
        lo, hi = proj.min(), proj.max()
        ego_p = float(np.asarray(ego_xy, dtype=float)[:2] @ axis)
        if hi - lo >= size:
            mid = 0.5 * (lo + hi)
        elif ego_p <= lo:
            mid = lo + 0.5 * size
        elif ego_p >= hi:
            mid = hi - 0.5 * size
        else:
            mid = 0.5 * (lo + hi)
        center += mid * axis
    return center


def init_track(meas_pos, meas_vel, cfg: KalmanConfig = KalmanConfig(), length=4.0, width=2.0,
               heading: float = 0.0, obstacle_id: int = 0) -> ObstacleTrack:
    v = np.asarray(meas_vel, dtype=float)
    if np.hypot(*v) > cfg.heading_speed:
        heading = math.atan2(v[1], v[0])
    return ObstacleTrack(
        state=np.concatenate([np.asarray(meas_pos, dtype=float), v]),
        covariance=cfg.init_cov * np.eye(4),
        length=length,
        width=width,
        last_heading=heading,
        obstacle_id=obstacle_id,
    )


def _transition(dt):
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def _clean_cov(P):
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() < 0.0:
        P = (V * np.maximum(w, 0.0)) @ V.T
        P = 0.5 * (P + P.T)
    return P


def kf_predict(track: ObstacleTrack, dt: float, cfg: KalmanConfig = KalmanConfig()) -> ObstacleTrack:
    """Coast a track one step (used while the obstacle is unseen)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    F = _transition(dt)
    return replace(
        track,
        state=F @ track.state,
        covariance=_clean_cov(F @ track.covariance @ F.T + cfg.Q),
        missed=track.missed + 1,
    )


def kf_update(track: ObstacleTrack, meas_pos, meas_vel, dt: float,
              cfg: KalmanConfig = KalmanConfig()) -> ObstacleTrack:
    """Constant-velocity predict, then a full-state measurement update."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    F = _transition(dt)
    x = F @ track.state
    P = F @ track.covariance @ F.T + cfg.Q
    z = np.concatenate([np.asarray(meas_pos, dtype=float), np.asarray(meas_vel, dtype=float)])
    S = P + cfg.R
    K = np.linalg.solve(S.T, P.T).T  # P S^-1 (H = I)
    x = x + K @ (z - x)
    IK = np.eye(4) - K
    P = IK @ P @ IK.T + K @ cfg.R @ K.T  # Joseph form
    heading = track.last_heading
    if np.hypot(x[2], x[3]) > cfg.heading_speed:
        heading = math.atan2(x[3], x[2])
    return replace(track, state=x, covariance=_clean_cov(P), last_heading=heading, missed=0)


def predict_horizon(track: ObstacleTrack, horizon: int, dt: float,
                    cfg: KalmanConfig = KalmanConfig()) -> ObstaclePrediction:
    """Constant-velocity poses for the H-1 steps after the current one."""
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    v = track.velocity
    k = np.arange(1, horizon)[:, None]
    xy = track.position + k * dt * v
    if np.hypot(v[0], v[1]) > cfg.heading_speed:
        heading = math.atan2(v[1], v[0])
    else:
        heading = track.last_heading
    poses = np.concatenate([xy, np.full((horizon - 1, 1), heading)], axis=1)
    vel = np.tile(v, (horizon - 1, 1))
    return ObstaclePrediction(poses, vel, track.length, track.width, track.obstacle_id)


@dataclass
class Tracker:
    """Per-episode track table keyed by obstacle id (association is given)."""

    sensor: SensorConfig = field(default_factory=SensorConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    footprint: tuple = (4.0, 2.0)
    tracks: dict = field(default_factory=dict)

    def observe(self, points: DopplerScan, ego, ego_vel, dt: float):
        seen = set(np.unique(points.obstacle_ids).tolist()) if len(points) else set()
        for n in sorted(set(self.tracks) | seen):
            if n not in seen:
                self.tracks[n] = kf_predict(self.tracks[n], dt, self.kalman)
                continue
            pts = points.for_obstacle(n)
            v_hat = estimate_velocity(pts.ray_dirs, pts.doppler, ego_vel)
            prev = self.tracks.get(n)
            if np.hypot(*v_hat) > self.kalman.heading_speed:
                heading = math.atan2(v_hat[1], v_hat[0])
            elif prev is not None:
                heading = prev.last_heading
            else:
                heading = 0.0
            center = fit_center(pts.hits, ego, heading, *self.footprint)
            if prev is None:
                self.tracks[n] = init_track(center, v_hat, self.kalman, *self.footprint,
                                            heading=heading, obstacle_id=n)
            else:
                self.tracks[n] = kf_update(prev, center, v_hat, dt, self.kalman)

    def predictions(self, horizon: int, dt: float):
        return [predict_horizon(self.tracks[n], horizon, dt, self.kalman) for n in sorted(self.tracks)]
