"""Closed-loop episodes: scene generation, obstacle motion, strategy variants.

Each step follows the tuning workflow: scan, estimate velocities, update
tracks, predict, pick margins, plan, execute the first action, evaluate the
plan's risk and, every T steps, take a gradient step on (alpha, beta).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import box_pair_distance, box_pair_overlap, closing_speed_batch
from .perception import KalmanConfig, SensorConfig, Tracker, scan
from .planner import PlannerConfig, TunableParams, shift_warm_start, solve
from .tuning import (
    LossWeights,
    MarginConfig,
    ParamRecord,
    RiskGrid,
    SlowTuner,
    base_margins,
    build_risk_grid,
    margin_grid,
    proactive_margin,
)
from .vehicle import ActionBounds, ReferencePath, VehicleState, planar_velocity, reference_window, rollout, step


class Strategy(str, enum.Enum):
    HPTUNE = "HPTUNE"
    FAST_ONLY = "FAST_ONLY"
    SLOW_ONLY = "SLOW_ONLY"
    FIXED_MARGIN = "FIXED_MARGIN"
    REACTIVE_MARGIN = "REACTIVE_MARGIN"

    @property
    def tunes(self) -> bool:
        return self in (Strategy.HPTUNE, Strategy.SLOW_ONLY)


class Outcome(str, enum.Enum):
    PASS = "PASS"
    COLLISION = "COLLISION"
    TIMEOUT = "TIMEOUT"


@dataclass(frozen=True)
class Scenario:
    half_extent: float = 20.0
    n_obstacles: int = 4
    obstacle_speed: float = 5.0
    obstacle_length: float = 4.0
    obstacle_width: float = 2.0
    heading_noise: float = 0.3  # rad / sqrt(s)
    waypoints: tuple = ((-18.0, 0.0), (18.0, 0.0))
    cruise_speed: float = 5.0
    time_limit: float = 40.0
    goal_tolerance: float = 1.0
    start_clearance: float = 5.0
    pair_gap: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_obstacles < 0:
            raise ValueError("n_obstacles must be >= 0")
        if self.obstacle_speed < 0:
            raise ValueError("obstacle_speed must be >= 0")
        if self.half_extent <= 0:
            raise ValueError("half_extent must be positive")

    @property
    def path(self) -> ReferencePath:
        return ReferencePath(self.waypoints, self.cruise_speed)

    def start_state(self) -> VehicleState:
        p = self.path
        pose = p.pose_at(0.0)
        return VehicleState(float(pose[0]), float(pose[1]), float(pose[2]))


@dataclass(frozen=True)
class EpisodeConfig:
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    bounds: ActionBounds = field(default_factory=ActionBounds)
    margins: MarginConfig = field(default_factory=MarginConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)


@dataclass
class EpisodeResult:
    outcome: Outcome
    pass_time: float | None
    avg_acc: float
    avg_jerk: float
    trajectory: np.ndarray  # (K+1, 3) executed ego states
    actions: np.ndarray  # (K, 2)
    obstacle_trajectory: np.ndarray  # (K+1, N, 3)
    param_trace: list  # ParamRecord per slow update
    margin_samples: np.ndarray  # rows (t, h, n, phi)
    steps: list  # per-step log records
    final_params: TunableParams
    n_updates: int
    infeasible_steps: int
    seed: int
    strategy: Strategy


# --- scene -----------------------------------------------------------------


def _streams(seed: int):
    ss = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def spawn_scene(scn: Scenario, rng, ego_dims=(4.0, 2.0)) -> np.ndarray:
    """Obstacle states (N, 3) = (x, y, heading), placed by rejection sampling.

    Clearances are footprint gaps: at least ``start_clearance`` to the ego at
    its start pose and ``pair_gap`` between obstacles.
    """
    start = np.asarray(scn.start_state(), dtype=float)
    dims = (scn.obstacle_length, scn.obstacle_width)
    h = scn.half_extent
    placed = []
    for _ in range(scn.n_obstacles):
        for _attempt in range(1000):
            p = rng.uniform(-h, h, 2)
            cand = np.array([p[0], p[1], rng.uniform(-math.pi, math.pi)])
            if box_pair_distance(start, ego_dims, cand, dims) < scn.start_clearance:
                continue
            if placed and np.min(box_pair_distance(np.array(placed), dims, cand, dims)) < scn.pair_gap:
                continue
            placed.append(cand)
            break
        else:
            raise RuntimeError("could not place obstacles: field too crowded")
    return np.array(placed).reshape(-1, 3)


def obstacle_step(state, rng, dt: float, half_extent: float, speed: float, heading_noise: float = 0.3):
    """Constant-speed random heading walk with specular reflection off the walls."""
    st = np.array(state, dtype=float).reshape(-1, 3)
    if heading_noise > 0 and len(st):
        st[:, 2] += rng.normal(0.0, heading_noise * math.sqrt(dt), len(st))
    c, s = np.cos(st[:, 2]), np.sin(st[:, 2])
    x = st[:, 0] + speed * c * dt
    y = st[:, 1] + speed * s * dt
    h = half_extent
    for _ in range(2):
        hit_x = np.abs(x) > h
        x = np.where(x > h, 2 * h - x, np.where(x < -h, -2 * h - x, x))
        c = np.where(hit_x, -c, c)
        hit_y = np.abs(y) > h
        y = np.where(y > h, 2 * h - y, np.where(y < -h, -2 * h - y, y))
        s = np.where(hit_y, -s, s)
    st[:, 0], st[:, 1], st[:, 2] = x, y, np.arctan2(s, c)
    return st


def _obstacle_rows(obs, scn: Scenario):
    n = len(obs)
    v = scn.obstacle_speed * np.stack([np.cos(obs[:, 2]), np.sin(obs[:, 2])], axis=1)
    dims = np.tile([scn.obstacle_length, scn.obstacle_width], (n, 1))
    return np.concatenate([obs, v, dims], axis=1)


# --- margins per strategy -----------------------------------------------------


def current_risk(ego, ego_vel, obstacle_rows, ego_dims=(4.0, 2.0)):
    """True current distance and closing speed of every obstacle, shape (N,) each."""
    rows = np.asarray(obstacle_rows, dtype=float).reshape(-1, 7)
    n = len(rows)
    ego = np.asarray(ego, dtype=float)
    d = box_pair_distance(np.tile(ego, (n, 1)), ego_dims, rows[:, :3], rows[:, 5:7])
    vc = closing_speed_batch(ego[:2], np.asarray(ego_vel, dtype=float), rows[:, :2], rows[:, 3:5])
    return d, vc


def strategy_margins(strategy: Strategy, risk: RiskGrid, beta: float, cfg: MarginConfig,
                     current_true=None) -> np.ndarray:
    """Margin grid (H-1, N) used by the planner for a given strategy.

    ``current_true`` is ``(distances, closing_speeds)`` at the current step,
    aligned with the grid columns; only the reactive variant reads it.
    """
    strategy = Strategy(strategy)
    if strategy in (Strategy.HPTUNE, Strategy.FAST_ONLY):
        return margin_grid(risk, beta, cfg)
    if strategy in (Strategy.FIXED_MARGIN, Strategy.SLOW_ONLY):
        return base_margins(risk.shape, cfg)
    d, vc = current_true
    phi_now = np.asarray(proactive_margin(np.asarray(vc), np.asarray(d), beta, cfg), dtype=float)
    return np.broadcast_to(phi_now.reshape(1, -1), risk.shape).copy()


# --- metrics -------------------------------------------------------------------


def metrics(trajectory, dt: float):
    """Mean acceleration and jerk magnitudes by finite differences, and pass time."""
    traj = np.asarray(trajectory, dtype=float)
    if len(traj) < 3:
        raise ValueError("metrics need at least 3 trajectory points")
    pos = traj[:, :2]
    vel = np.diff(pos, axis=0) / dt
    acc = np.diff(vel, axis=0) / dt
    avg_acc = float(np.mean(np.linalg.norm(acc, axis=1)))
    jerk = np.diff(acc, axis=0) / dt
    avg_jerk = float(np.mean(np.linalg.norm(jerk, axis=1))) if len(jerk) else 0.0
    return avg_acc, avg_jerk, (len(traj) - 1) * dt


# --- episode -------------------------------------------------------------------


def run_episode(scn: Scenario, strategy: Strategy, params_init: TunableParams = TunableParams(),
                cfg: EpisodeConfig = EpisodeConfig(), tune: bool = True,
                update_budget: int | None = None, initial_obstacles=None) -> EpisodeResult:
    """Simulate one episode until PASS, COLLISION or TIMEOUT.

    ``tune`` enables slow-level updates for the strategies that use them;
    ``update_budget`` caps how many updates this episode may perform, after
    which the parameters stay frozen. ``initial_obstacles`` overrides the
    random scene with explicit (x, y, heading) rows.
    """
    strategy = Strategy(strategy)
    pc = cfg.planner
    H, dt = pc.horizon, pc.dt
    ego_dims = (pc.ego_length, pc.ego_width)
    rng_scene, rng_motion, rng_sensor = _streams(scn.seed)
    path = scn.path

    if initial_obstacles is None:
        obs = spawn_scene(scn, rng_scene, ego_dims)
    else:
        obs = np.asarray(initial_obstacles, dtype=float).reshape(-1, 3)

    weights = cfg.weights
    if strategy is Strategy.SLOW_ONLY:
        weights = replace(weights, eta2=0.0, eta3=0.0)
    tuner = SlowTuner(params_init, weights, cfg.margins)
    do_tune = tune and strategy.tunes
    tracker = Tracker(cfg.sensor, cfg.kalman, (scn.obstacle_length, scn.obstacle_width))

    s = scn.start_state()
    w_exec = np.zeros(2)
    traj, acts, obs_traj = [np.array(s)], [], [obs.copy()]
    margin_rows, step_log, param_trace = [], [], []
    warm = None
    infeasible = 0
    max_steps = int(round(scn.time_limit / dt))
    outcome = Outcome.TIMEOUT
    goal = path.goal

    for t in range(1, max_steps + 1):
        rows = _obstacle_rows(obs, scn)
        ego_vel = planar_velocity(s[2], w_exec[0])
        pts = scan(s, ego_vel, rows, cfg.sensor, rng_sensor)
        tracker.observe(pts, s, ego_vel, dt)
        preds = tracker.predictions(H, dt)
        ids = [p.obstacle_id for p in preds]

        s_ref, w_ref = reference_window(path, s, H, dt)
        warm = w_ref.copy() if warm is None else shift_warm_start(warm)
        warm = cfg.bounds.clip(warm)
        params = tuner.params

        warm_states = rollout(s, warm, dt)
        risk_pre = build_risk_grid(warm_states, warm, preds, ego_dims)
        cur = None
        if strategy is Strategy.REACTIVE_MARGIN:
            d_all, vc_all = current_risk(s, ego_vel, rows, ego_dims)
            cur = (d_all[ids], vc_all[ids])
        phi = strategy_margins(strategy, risk_pre, params.beta, cfg.margins, cur)

        plan = solve(s, warm, s_ref, w_ref, preds, phi, params, cfg.bounds, pc)
        fallback = False
        if not plan.feasible and np.any(phi > cfg.margins.phi_base):
            # widened margins cannot be met: retry at the base safety floor
            fallback = True
            plan = solve(s, warm, s_ref, w_ref, preds, base_margins(phi.shape, cfg.margins),
                         params, cfg.bounds, pc)
        if plan.feasible:
            w_exec = plan.actions[0].copy()
        else:
            infeasible += 1
            w_exec = cfg.bounds.clip(np.zeros(2))
        warm = plan.actions

        s_next = step(s, w_exec, dt)
        obs = obstacle_step(obs, rng_motion, dt, scn.half_extent, scn.obstacle_speed, scn.heading_noise)

        risk_post = build_risk_grid(plan.states, plan.actions, preds, ego_dims)
        tuner.record(s_next, w_exec, s_ref[0], w_ref[0])
        if do_tune and t % weights.T == 0 and (update_budget is None or tuner.n_updates < update_budget):
            param_trace.append(tuner.update(t, risk_post))

        for (h, j), val in np.ndenumerate(phi):
            margin_rows.append((t, h, ids[j], float(val)))
        step_log.append({
            "t": t,
            "time": round(t * dt, 10),
            "ego": [float(c) for c in s_next],
            "action": [float(c) for c in w_exec],
            "alpha": params.alpha,
            "beta": params.beta,
            "feasible": bool(plan.feasible),
            "fallback": fallback,
            "d_prox_min": {str(i): float(risk_post.d_prox[:, j].min()) for j, i in enumerate(ids)},
            "phi_min": {str(i): float(phi[:, j].min()) for j, i in enumerate(ids)},
        })

        s = s_next
        traj.append(np.array(s))
        acts.append(w_exec.copy())
        obs_traj.append(obs.copy())

        if len(obs) and np.any(box_pair_overlap(
                np.tile(np.array(s), (len(obs), 1)), ego_dims, obs,
                (scn.obstacle_length, scn.obstacle_width))):
            outcome = Outcome.COLLISION
            break
        if np.hypot(s[0] - goal[0], s[1] - goal[1]) <= scn.goal_tolerance:
            outcome = Outcome.PASS
            break

    traj = np.array(traj)
    if len(traj) >= 3:
        avg_acc, avg_jerk, elapsed = metrics(traj, dt)
    else:
        avg_acc, avg_jerk, elapsed = 0.0, 0.0, (len(traj) - 1) * dt
    return EpisodeResult(
        outcome=outcome,
        pass_time=elapsed if outcome is Outcome.PASS else None,
        avg_acc=avg_acc,
        avg_jerk=avg_jerk,
        trajectory=traj,
        actions=np.array(acts).reshape(-1, 2),
        obstacle_trajectory=np.array(obs_traj),
        param_trace=param_trace,
        margin_samples=np.array(margin_rows, dtype=float).reshape(-1, 4),
        steps=step_log,
        final_params=tuner.params,
        n_updates=tuner.n_updates,
        infeasible_steps=infeasible,
        seed=scn.seed,
        strategy=strategy,
    )


def pass_rate(template: Scenario, strategy: Strategy, params: TunableParams, seeds,
              cfg: EpisodeConfig = EpisodeConfig(), tune: bool = False):
    """Fraction of PASS outcomes over ``seeds`` with parameters frozen at ``params``."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("pass_rate needs at least one seed")
    results = [run_episode(replace(template, seed=sd), strategy, params, cfg, tune=tune) for sd in seeds]
    return sum(r.outcome is Outcome.PASS for r in results) / len(results), results


def tune_params(template: Scenario, strategy: Strategy, params: TunableParams, n_updates: int,
                seed0: int, cfg: EpisodeConfig = EpisodeConfig(), checkpoint_every: int | None = None,
                on_checkpoint=None, max_episodes: int = 100_000):
    """Run training episodes until ``n_updates`` slow-level updates have accumulated.

    Parameters carry over between episodes. ``on_checkpoint(k, params)`` is
    called whenever the update count reaches a multiple of ``checkpoint_every``.
    Returns the final parameters and the concatenated parameter trace.
    """
    strategy = Strategy(strategy)
    trace: list[ParamRecord] = []
    done = 0
    next_ck = checkpoint_every if checkpoint_every else None
    if not strategy.tunes:
        return params, trace
    for ep in range(max_episodes):
        if done >= n_updates:
            break
        budget = n_updates - done
        if next_ck is not None:
            budget = min(budget, next_ck - done)
        res = run_episode(replace(template, seed=seed0 + ep), strategy, params, cfg, tune=True,
                          update_budget=budget)
        params = res.final_params
        trace.extend(res.param_trace)
        done += res.n_updates
        if next_ck is not None and done >= next_ck:
            if on_checkpoint is not None:
                on_checkpoint(done, params)
            next_ck += checkpoint_every
    return params, trace
