"""Receding-horizon planner with per-step, per-obstacle distance margins.

Single shooting: the decision variables are the H actions, states come from
an exact rollout. Margin constraints are handled with an augmented Lagrangian
whose inner problems are solved by projected gradient descent (Barzilai-Borwein
trial step, Armijo backtracking) or, optionally, scipy's L-BFGS-B. Feasibility
of the returned plan is always judged with the exact box distance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from numba import njit

from .geometry import box_circumradius, box_pair_distance, pair_signed_distance, wrap_angle
from .vehicle import ActionBounds, rollout


@dataclass(frozen=True)
class TunableParams:
    alpha: float = 0.2
    beta: float = 5.0

    def projected(self, alpha_box=(0.01, 0.99), beta_box=(0.0, 100.0)) -> "TunableParams":
        return TunableParams(
            alpha=float(np.clip(self.alpha, *alpha_box)),
            beta=float(np.clip(self.beta, *beta_box)),
        )


@dataclass
class ObstaclePrediction:
    """Predicted poses (H-1, 3) and planar velocities (H-1, 2) of one obstacle."""

    poses: np.ndarray
    velocities: np.ndarray
    length: float
    width: float
    obstacle_id: int = 0

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 2)
        if len(self.poses) != len(self.velocities):
            raise ValueError("poses and velocities must have the same length")


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 15
    dt: float = 0.12
    tol_feas: float = 1e-3
    rho_schedule: tuple = (10.0, 100.0, 1000.0)
    max_inner: int = 60
    max_iters: int = 200
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    ego_length: float = 4.0
    ego_width: float = 2.0
    inner: str = "pgd"

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.inner not in ("pgd", "lbfgsb"):
            raise ValueError(f"unknown inner solver {self.inner!r}")
        if self.max_inner < 1 or self.max_iters < 1 or self.tol_feas <= 0:
            raise ValueError("iteration caps and tol_feas must be positive")


@dataclass
class PlanResult:
    states: np.ndarray
    actions: np.ndarray
    cost: float
    feasible: bool
    max_violation: float
    iterations: int
    restarts: int = 0
    extras: dict = field(default_factory=dict)


def cost(states, actions, s_ref, w_ref, alpha: float) -> float:
    """Weighted tracking cost over the horizon, angle errors wrapped."""
    states, actions = np.asarray(states, dtype=float), np.asarray(actions, dtype=float)
    s_ref, w_ref = np.asarray(s_ref, dtype=float), np.asarray(w_ref, dtype=float)
    if not (len(states) == len(actions) == len(s_ref) == len(w_ref)):
        raise ValueError("cost: sequence lengths differ")
    ds = states - s_ref
    ds[:, 2] = wrap_angle(ds[:, 2])
    dw = actions - w_ref
    return float(alpha * np.sum(ds * ds) + (1.0 - alpha) * np.sum(dw * dw))


def shift_warm_start(prev) -> np.ndarray:
    prev = np.asarray(prev, dtype=float)
    return np.concatenate([prev[1:], prev[-1:]], axis=0)


def plan_violation(states, predictions, margins, ego_dims=(4.0, 2.0)) -> float:
    """Largest margin shortfall over (h, n), using the exact box distance."""
    if not predictions:
        return 0.0
    poses, dims, phi = _stack_predictions(predictions, margins)
    hm1, n = phi.shape
    ego = np.repeat(np.asarray(states, dtype=float)[:hm1], n, axis=0)
    d = box_pair_distance(ego, ego_dims, poses.reshape(-1, 3), dims.reshape(-1, 2))
    return float(np.max(np.maximum(phi.reshape(-1) - d, 0.0)))


def _stack_predictions(predictions, margins):
    poses = np.stack([p.poses for p in predictions], axis=1)  # (H-1, N, 3)
    dims = np.broadcast_to(
        np.array([[p.length, p.width] for p in predictions]), poses.shape[:2] + (2,)
    )
    phi = np.asarray(margins, dtype=float).reshape(poses.shape[:2])
    return poses, dims, phi


@njit(cache=True)
def _wrap(a):
    return a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))


@njit(cache=True)
def _rollout_kernel(u, s0, dt):
    h = u.shape[0]
    st = np.empty((h, 3))
    th_pre = np.empty(h)
    x, y, th = s0[0], s0[1], s0[2]
    for k in range(h):
        th_pre[k] = th
        x += dt * u[k, 0] * np.cos(th)
        y += dt * u[k, 0] * np.sin(th)
        th += dt * u[k, 1]
        st[k, 0], st[k, 1], st[k, 2] = x, y, th
    return st, th_pre


@njit(cache=True)
def _merit_kernel(u, s0, s_ref, w_ref, alpha, dt, ego_l, ego_w, obs_pose, obs_dims, state_idx,
                  rsum, phi, lam, rho, want_grad):
    h = u.shape[0]
    st, th_pre = _rollout_kernel(u, s0, dt)
    g_st = np.zeros((h, 3))
    g = np.zeros((h, 2))
    f = 0.0
    for k in range(h):
        ex, ey = st[k, 0] - s_ref[k, 0], st[k, 1] - s_ref[k, 1]
        et = _wrap(st[k, 2] - s_ref[k, 2])
        ev, ep = u[k, 0] - w_ref[k, 0], u[k, 1] - w_ref[k, 1]
        f += alpha * (ex * ex + ey * ey + et * et) + (1.0 - alpha) * (ev * ev + ep * ep)
        g_st[k, 0], g_st[k, 1], g_st[k, 2] = 2.0 * alpha * ex, 2.0 * alpha * ey, 2.0 * alpha * et
        g[k, 0], g[k, 1] = 2.0 * (1.0 - alpha) * ev, 2.0 * (1.0 - alpha) * ep
    for i in range(phi.shape[0]):
        k = state_idx[i]
        f -= lam[i] * lam[i] / (2.0 * rho)
        lb = np.hypot(st[k, 0] - obs_pose[i, 0], st[k, 1] - obs_pose[i, 1]) - rsum[i]
        if lb >= phi[i] + lam[i] / rho:
            continue
        sd, gx, gy, gt = pair_signed_distance(st[k, 0], st[k, 1], st[k, 2], ego_l, ego_w,
                                              obs_pose[i, 0], obs_pose[i, 1], obs_pose[i, 2],
                                              obs_dims[i, 0], obs_dims[i, 1], want_grad)
        shifted = lam[i] + rho * (phi[i] - sd)
        if shifted <= 0.0:
            continue
        f += shifted * shifted / (2.0 * rho)
        g_st[k, 0] -= shifted * gx
        g_st[k, 1] -= shifted * gy
        g_st[k, 2] -= shifted * gt
    if not want_grad:
        return f, g
    # adjoint pass through the rollout
    gx_tail = 0.0
    gy_tail = 0.0
    b = np.zeros(h + 1)
    b[h] = g_st[h - 1, 2]
    for j in range(h - 1, -1, -1):
        gx_tail += g_st[j, 0]
        gy_tail += g_st[j, 1]
        c, s_ = np.cos(th_pre[j]), np.sin(th_pre[j])
        g[j, 0] += dt * (c * gx_tail + s_ * gy_tail)
        b[j] = dt * u[j, 0] * (-s_ * gx_tail + c * gy_tail)
        if j >= 1:
            b[j] += g_st[j - 1, 2]
    tail = 0.0
    for j in range(h - 1, -1, -1):
        tail += b[j + 1]
        g[j, 1] += dt * tail
    return f, g


@njit(cache=True)
def _violation_kernel(u, s0, dt, ego_l, ego_w, obs_pose, obs_dims, state_idx, rsum, phi):
    st, _ = _rollout_kernel(u, s0, dt)
    c = np.full(phi.shape[0], -np.inf)
    worst = 0.0
    for i in range(phi.shape[0]):
        k = state_idx[i]
        lb = np.hypot(st[k, 0] - obs_pose[i, 0], st[k, 1] - obs_pose[i, 1]) - rsum[i]
        if lb >= phi[i]:
            continue
        sd = pair_signed_distance(st[k, 0], st[k, 1], st[k, 2], ego_l, ego_w,
                                  obs_pose[i, 0], obs_pose[i, 1], obs_pose[i, 2],
                                  obs_dims[i, 0], obs_dims[i, 1], False)[0]
        c[i] = phi[i] - sd
        if c[i] > worst:
            worst = c[i]
    return worst, c


@njit(cache=True)
def _constraint_kernel(u, s0, dt, ego_l, ego_w, obs_pose, obs_dims, state_idx, phi, pairs):
    """Margin shortfalls of the selected pairs and their Jacobian w.r.t. the actions."""
    h = u.shape[0]
    st, th_pre = _rollout_kernel(u, s0, dt)
    m = pairs.shape[0]
    c = np.empty(m)
    jac = np.zeros((m, 2 * h))
    for r in range(m):
        i = pairs[r]
        k = state_idx[i]
        sd, gx, gy, gt = pair_signed_distance(st[k, 0], st[k, 1], st[k, 2], ego_l, ego_w,
                                              obs_pose[i, 0], obs_pose[i, 1], obs_pose[i, 2],
                                              obs_dims[i, 0], obs_dims[i, 1], True)
        c[r] = phi[i] - sd
        gx, gy, gt = -gx, -gy, -gt
        for j in range(k, -1, -1):
            ct, sn = np.cos(th_pre[j]), np.sin(th_pre[j])
            jac[r, 2 * j] = dt * (gx * ct + gy * sn)
            jac[r, 2 * j + 1] = dt * gt
            gt += dt * u[j, 0] * (gy * ct - gx * sn)
    return c, jac


class _ShootingProblem:
    def __init__(self, s0, s_ref, w_ref, predictions, margins, alpha, cfg: PlannerConfig):
        self.s0 = np.asarray(s0, dtype=float)
        self.s_ref = np.ascontiguousarray(s_ref, dtype=float)
        self.w_ref = np.ascontiguousarray(w_ref, dtype=float)
        self.alpha = float(alpha)
        self.dt = cfg.dt
        self.H = cfg.horizon
        self.ego = (float(cfg.ego_length), float(cfg.ego_width))
        if predictions:
            poses, dims, phi = _stack_predictions(predictions, margins)
            hm1, n = phi.shape
            if hm1 != self.H - 1:
                raise ValueError(f"predictions cover {hm1} steps, expected {self.H - 1}")
            self.n_obs = n
            self.obs_pose = np.ascontiguousarray(poses.reshape(-1, 3))
            self.obs_dims = np.ascontiguousarray(dims.reshape(-1, 2))
            self.phi = np.ascontiguousarray(phi.reshape(-1))
            self.state_idx = np.repeat(np.arange(hm1), n)
            self.rsum = box_circumradius(np.array(self.ego)) + box_circumradius(self.obs_dims)
        else:
            self.n_obs = 0
            self.obs_pose = np.zeros((0, 3))
            self.obs_dims = np.zeros((0, 2))
            self.phi = np.zeros(0)
            self.state_idx = np.zeros(0, dtype=np.int64)
            self.rsum = np.zeros(0)

    def merit(self, u, lam, rho, with_grad=True):
        f, g = _merit_kernel(u, self.s0, self.s_ref, self.w_ref, self.alpha, self.dt, *self.ego,
                             self.obs_pose, self.obs_dims, self.state_idx, self.rsum, self.phi,
                             lam, float(rho), with_grad)
        return (f, g) if with_grad else f

    def violation(self, u):
        return _violation_kernel(u, self.s0, self.dt, *self.ego, self.obs_pose, self.obs_dims,
                                 self.state_idx, self.rsum, self.phi)

    def near_pairs(self, u, slack):
        """Indices of pairs whose distance lower bound is within ``phi + slack``."""
        if self.n_obs == 0:
            return np.zeros(0, dtype=np.int64)
        st = rollout(self.s0, u, self.dt)[self.state_idx]
        lb = np.hypot(st[:, 0] - self.obs_pose[:, 0], st[:, 1] - self.obs_pose[:, 1]) - self.rsum
        return np.flatnonzero(lb < self.phi + slack).astype(np.int64)

    def constraints(self, u, pairs):
        return _constraint_kernel(np.ascontiguousarray(u, dtype=float), self.s0, self.dt, *self.ego,
                                  self.obs_pose, self.obs_dims, self.state_idx, self.phi, pairs)

    def objective(self, u, with_grad=False):
        """Tracking cost alone (constraints dropped)."""
        none = slice(0, 0)
        f, g = _merit_kernel(u, self.s0, self.s_ref, self.w_ref, self.alpha, self.dt, *self.ego,
                             self.obs_pose[none], self.obs_dims[none], self.state_idx[none],
                             self.rsum[none], self.phi[none], self.phi[none], 1.0, with_grad)
        return (f, g) if with_grad else f


def _polish(prob, u, lo, hi, cfg, budget, slack=1.0):
    """Refine a feasible plan with SLSQP on the tracking cost.

    Only pairs within ``phi + slack`` of the ego at the start are passed as
    constraints; the caller keeps the result only if the exact audit still
    holds and the cost went down.
    """
    shape = u.shape
    pairs = prob.near_pairs(u, slack)

    def fun(x):
        f, g = prob.objective(x.reshape(shape), with_grad=True)
        return f, g.ravel()

    cons = []
    if len(pairs):
        cons.append({
            "type": "ineq",
            "fun": lambda x: -prob.constraints(x.reshape(shape), pairs)[0],
            "jac": lambda x: -prob.constraints(x.reshape(shape), pairs)[1],
        })
    bounds = list(zip(np.broadcast_to(lo, shape).ravel(), np.broadcast_to(hi, shape).ravel()))
    res = minimize(fun, u.ravel(), jac=True, method="SLSQP", bounds=bounds, constraints=cons,
                   options={"maxiter": budget, "ftol": 1e-12})
    return np.clip(res.x.reshape(shape), lo, hi), max(int(res.nit), 1)


def _projected_descent(prob, u, lam, rho, lo, hi, cfg, budget):
    """Projected gradient descent with a Barzilai-Borwein trial step and Armijo backtracking."""
    f, g = prob.merit(u, lam, rho)
    step = 1.0
    u_prev = g_prev = None
    iters = 0
    for _ in range(min(cfg.max_inner, budget)):
        iters += 1
        if u_prev is not None:
            du, dg = u - u_prev, g - g_prev
            sy = float(np.sum(du * dg))
            step = float(np.sum(du * du)) / sy if sy > 1e-16 else min(step * 2.0, 1e3)
            step = min(max(step, 1e-8), 1e3)
        accepted = False
        for _ in range(40):
            u_new = np.clip(u - step * g, lo, hi)
            f_new = prob.merit(u_new, lam, rho, with_grad=False)
            if f_new <= f + cfg.armijo_c * float(np.sum(g * (u_new - u))):
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            break
        moved = float(np.max(np.abs(u_new - u)))
        u_prev, g_prev = u, g
        u = u_new
        f_old = f
        f, g = prob.merit(u, lam, rho)
        if moved < 1e-9 or abs(f_old - f) <= 1e-12 * (1.0 + abs(f)):
            break
    return u, iters


def _lbfgsb(prob, u, lam, rho, lo, hi, cfg, budget):
    shape = u.shape

    def fun(x):
        f, g = prob.merit(x.reshape(shape), lam, rho)
        return f, g.ravel()

    res = minimize(fun, u.ravel(), jac=True, method="L-BFGS-B",
                   bounds=list(zip(np.tile(lo, len(u)), np.tile(hi, len(u)))),
                   options={"maxiter": min(cfg.max_inner, budget), "ftol": 1e-12, "gtol": 1e-9})
    return np.clip(res.x.reshape(shape), lo, hi), max(int(res.nit), 1)


INNER_SOLVERS = {"pgd": _projected_descent, "lbfgsb": _lbfgsb}


def _augmented_lagrangian(prob, u0, lo, hi, cfg, budget):
    """Outer multiplier loop; returns the iterate after every inner solve."""
    inner = INNER_SOLVERS[cfg.inner]
    u = np.clip(u0, lo, hi)
    lam = np.zeros(len(prob.phi))
    used = 0
    candidates = []
    rhos = list(cfg.rho_schedule)
    k = 0
    prev_viol = np.inf
    while used < budget:
        rho = rhos[min(k, len(rhos) - 1)]
        u, it = inner(prob, u, lam, rho, lo, hi, cfg, budget - used)
        used += it
        k += 1
        candidates.append(u.copy())
        if prob.n_obs == 0:
            break
        viol, c = prob.violation(u)
        active = np.isfinite(c)
        lam_new = np.where(active, np.maximum(lam + rho * np.where(active, c, 0.0), 0.0), 0.0)
        settled = float(np.max(np.abs(lam_new - lam))) <= 1e-3 * (1.0 + float(np.max(lam_new)))
        lam = lam_new
        if viol <= cfg.tol_feas and (settled or not np.any(lam > 0.0)):
            break
        # stalled far from feasibility: leave the budget to another start
        if k >= len(rhos) and viol > 0.9 * prev_viol and viol > 10 * cfg.tol_feas:
            break
        prev_viol = viol
    return candidates, used


def _screening_starts(warm, w_ref, bounds: ActionBounds, horizon: int):
    v_mid = 0.5 * (bounds.v_min + bounds.v_max)
    starts = [warm, np.tile([bounds.v_min, 0.0], (horizon, 1)), np.asarray(w_ref, dtype=float)]
    for v in (bounds.v_max, v_mid, bounds.v_min):
        for psi in (bounds.psi_min, bounds.psi_max, 0.0):
            if v == bounds.v_min and psi == 0.0:
                continue  # the brake start above
            starts.append(np.tile([v, psi], (horizon, 1)))
    return starts


def solve(s_t, warm_start, s_ref, w_ref, predictions, margins, params: TunableParams,
          bounds: ActionBounds = ActionBounds(), config: PlannerConfig = PlannerConfig()) -> PlanResult:
    """Minimise the tracking cost subject to margin constraints.

    The warm start is refined first. If it is infeasible, a handful of constant
    action sequences are screened by their violation and the most promising
    ones seed further solves, within one shared iteration budget. The result is
    the lowest-cost feasible iterate seen (projected warm start included); if
    none is feasible, the least-violating iterate with ``feasible=False``.
    """
    cfg = config
    warm = np.asarray(warm_start, dtype=float)
    if warm.shape != (cfg.horizon, 2):
        raise ValueError(f"warm start must have shape ({cfg.horizon}, 2), got {warm.shape}")
    margins = np.asarray(margins, dtype=float)
    prob = _ShootingProblem(s_t, s_ref, w_ref, predictions, margins, params.alpha, cfg)
    lo, hi = bounds.lower, bounds.upper
    warm = np.clip(warm, lo, hi)

    best = None

    def consider(u):
        nonlocal best
        viol = prob.violation(u)[0]
        key = (0.0, prob.objective(u)) if viol <= cfg.tol_feas else (viol, np.inf)
        if best is None or key < best[0]:
            best = (key, u)
        return viol

    starts = [warm]
    if consider(warm) > cfg.tol_feas:
        screened = [(prob.violation(np.clip(u, lo, hi))[0], i, np.clip(u, lo, hi))
                    for i, u in enumerate(_screening_starts(warm, w_ref, bounds, cfg.horizon))]
        screened.sort(key=lambda r: (r[0], r[1]))
        starts = [u for _, _, u in screened]

    used = 0
    restarts = 0
    for i, u0 in enumerate(starts):
        if used >= cfg.max_iters or (i > 0 and best[0][0] <= cfg.tol_feas):
            break
        restarts += i > 0
        consider(u0)
        cands, it = _augmented_lagrangian(prob, u0, lo, hi, cfg, cfg.max_iters - used)
        used += it
        for u in cands:
            consider(u)

    u = best[1]
    if best[0][0] <= cfg.tol_feas:
        u_pol, it = _polish(prob, u, lo, hi, cfg, cfg.max_inner)
        used += it
        consider(u_pol)
        u = best[1]
    states = rollout(s_t, u, cfg.dt)
    viol = plan_violation(states, predictions, margins, (cfg.ego_length, cfg.ego_width))
    return PlanResult(
        states=states,
        actions=u,
        cost=cost(states, u, s_ref, w_ref, params.alpha),
        feasible=viol <= cfg.tol_feas,
        max_violation=viol,
        iterations=used,
        restarts=restarts,
    )
