"""Fast-level proactive margins and slow-level gradient tuning of (alpha, beta)."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import D_MIN, box_pair_distance, closing_speed_batch, wrap_angle
from .planner import TunableParams
from .vehicle import planar_velocity


@dataclass(frozen=True)
class MarginConfig:
    phi_base: float = 0.2
    phi_max: float = 2.0
    d_min: float = D_MIN

    def __post_init__(self):
        if not 0.0 < self.phi_base < self.phi_max:
            raise ValueError("need 0 < phi_base < phi_max")


@dataclass(frozen=True)
class LossWeights:
    eta1: float = 1e-1
    eta2: float = 1e-1
    eta3: float = 1e-3
    T: int = 5
    epsilon: float = 1e-3
    alpha_box: tuple = (0.01, 0.99)
    beta_box: tuple = (0.0, 100.0)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if min(self.eta1, self.eta2, self.eta3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class RiskGrid:
    d_prox: np.ndarray  # (H-1, N)
    v_closing: np.ndarray  # (H-1, N)

    def __post_init__(self):
        self.d_prox = np.asarray(self.d_prox, dtype=float)
        self.v_closing = np.asarray(self.v_closing, dtype=float)
        if self.d_prox.shape != self.v_closing.shape or self.d_prox.ndim != 2:
            raise ValueError("d_prox and v_closing must be equal-shape 2D arrays")

    @property
    def shape(self):
        return self.d_prox.shape


class ExecutedHistory:
    """Ring buffer of the last T executed (s_k, w_{k-1}, s*_k, w*_{k-1}) tuples."""

    def __init__(self, T: int):
        self.T = T
        self._buf = deque(maxlen=T)

    def append(self, s, w, s_ref, w_ref):
        self._buf.append(tuple(np.asarray(a, dtype=float).copy() for a in (s, w, s_ref, w_ref)))

    def __len__(self):
        return len(self._buf)

    def errors(self):
        """Squared state and action errors per entry, angle differences wrapped."""
        if not self._buf:
            return np.zeros(0), np.zeros(0)
        s, w, s_ref, w_ref = (np.stack(c) for c in zip(*self._buf))
        ds = s - s_ref
        ds[:, 2] = wrap_angle(ds[:, 2])
        dw = w - w_ref
        return np.sum(ds * ds, axis=1), np.sum(dw * dw, axis=1)


# --- fast level -----------------------------------------------------------


def build_risk_grid(states, actions, predictions, ego_dims=(4.0, 2.0)) -> RiskGrid:
    """Proximity distances and closing speeds between the plan and predictions.

    The ego planar velocity at step h+1 is the planned speed of action h along
    the heading of state h+1.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    hm1 = len(states) - 1
    n = len(predictions)
    if n == 0:
        return RiskGrid(np.zeros((hm1, 0)), np.zeros((hm1, 0)))
    for p in predictions:
        if len(p.poses) != hm1:
            raise ValueError(f"prediction length {len(p.poses)} does not match horizon {hm1 + 1}")
    ego = states[:hm1]
    v_ego = planar_velocity(ego[:, 2], actions[:hm1, 0])
    obs_pose = np.stack([p.poses for p in predictions], axis=1)  # (H-1, N, 3)
    obs_vel = np.stack([p.velocities for p in predictions], axis=1)
    dims = np.array([[p.length, p.width] for p in predictions])
    ego_rep = np.repeat(ego, n, axis=0)
    d = box_pair_distance(ego_rep, ego_dims, obs_pose.reshape(-1, 3), np.tile(dims, (hm1, 1)))
    vc = closing_speed_batch(ego[:, None, :2], v_ego[:, None, :], obs_pose[..., :2], obs_vel)
    return RiskGrid(d.reshape(hm1, n), vc)


def _ratio(v_closing, d_prox, d_min):
    return np.maximum(np.asarray(v_closing, dtype=float), 0.0) / np.maximum(d_prox, d_min)


def _sech2(x):
    # 4 e^{-2|x|} / (1 + e^{-2|x|})^2, overflow-free
    e = np.exp(-2.0 * np.abs(x))
    return 4.0 * e / (1.0 + e) ** 2


def proactive_margin(v_closing, d_prox, beta: float, cfg: MarginConfig = MarginConfig()):
    """Full margin phi_base + (phi_max - phi_base) tanh(beta * ReLU(v/d))."""
    r = _ratio(v_closing, d_prox, cfg.d_min)
    phi = cfg.phi_base + (cfg.phi_max - cfg.phi_base) * np.tanh(beta * r)
    return float(phi) if np.ndim(phi) == 0 else phi


def margin_grid(risk: RiskGrid, beta: float, cfg: MarginConfig = MarginConfig()) -> np.ndarray:
    return np.asarray(proactive_margin(risk.v_closing, risk.d_prox, beta, cfg), dtype=float).reshape(risk.shape)


def base_margins(shape, cfg: MarginConfig = MarginConfig()) -> np.ndarray:
    return np.full(shape, cfg.phi_base)


# --- slow level -----------------------------------------------------------


def loss_L1(hist: ExecutedHistory, alpha: float) -> float:
    es, ew = hist.errors()
    return float(np.sum(alpha * es + (1.0 - alpha) * ew))


def loss_L2(risk: RiskGrid, beta: float, cfg: MarginConfig = MarginConfig()) -> float:
    phi = margin_grid(risk, beta, cfg)
    d = np.maximum(risk.d_prox, cfg.d_min)
    return float(-np.sum(np.maximum((phi - risk.d_prox) / d, 0.0)))


def loss_L3(risk: RiskGrid, beta: float, cfg: MarginConfig = MarginConfig()) -> float:
    return float(np.sum(np.abs(margin_grid(risk, beta, cfg))))


def total_loss(hist, risk, params: TunableParams, weights: LossWeights, cfg: MarginConfig = MarginConfig()):
    return (
        weights.eta1 * loss_L1(hist, params.alpha)
        + weights.eta2 * loss_L2(risk, params.beta, cfg)
        + weights.eta3 * loss_L3(risk, params.beta, cfg)
    )


def gradients(hist, risk, params: TunableParams, weights: LossWeights, cfg: MarginConfig = MarginConfig()):
    """Partials of the total loss w.r.t. alpha and beta.

    Trajectories and risk values are held fixed; the ReLU kinks take
    subgradient 0.
    """
    es, ew = hist.errors()
    d_alpha = weights.eta1 * float(np.sum(es - ew))
    r = _ratio(risk.v_closing, risk.d_prox, cfg.d_min)
    br = params.beta * r
    dphi = (cfg.phi_max - cfg.phi_base) * r * _sech2(br)
    phi = cfg.phi_base + (cfg.phi_max - cfg.phi_base) * np.tanh(br)
    violated = phi > risk.d_prox
    d = np.maximum(risk.d_prox, cfg.d_min)
    d_beta = -weights.eta2 * float(np.sum(np.where(violated, dphi / d, 0.0)))
    d_beta += weights.eta3 * float(np.sum(dphi))
    return d_alpha, d_beta


@dataclass
class UpdateStats:
    skipped: int = 0


def update_params(params: TunableParams, grads, epsilon: float, weights: LossWeights = LossWeights(),
                  stats: UpdateStats | None = None) -> TunableParams:
    g_alpha, g_beta = grads
    if not (math.isfinite(g_alpha) and math.isfinite(g_beta)):
        if stats is not None:
            stats.skipped += 1
        return params
    return TunableParams(params.alpha - epsilon * g_alpha, params.beta - epsilon * g_beta).projected(
        weights.alpha_box, weights.beta_box
    )


@dataclass
class ParamRecord:
    t: int
    alpha: float
    beta: float
    L1: float
    L2: float
    L3: float
    L: float

    FIELDS = ("t", "alpha", "beta", "L1", "L2", "L3", "L")

    def row(self):
        return [self.t, self.alpha, self.beta, self.L1, self.L2, self.L3, self.L]


@dataclass
class SlowTuner:
    """Owns (alpha, beta) and the executed history; updates every T steps."""

    params: TunableParams
    weights: LossWeights = field(default_factory=LossWeights)
    margin_cfg: MarginConfig = field(default_factory=MarginConfig)
    n_updates: int = 0
    stats: UpdateStats = field(default_factory=UpdateStats)

    def __post_init__(self):
        self.history = ExecutedHistory(self.weights.T)

    def record(self, s, w, s_ref, w_ref):
        self.history.append(s, w, s_ref, w_ref)

    def update(self, t: int, risk: RiskGrid) -> ParamRecord:
        p, wts, mc = self.params, self.weights, self.margin_cfg
        l1 = loss_L1(self.history, p.alpha)
        l2 = loss_L2(risk, p.beta, mc)
        l3 = loss_L3(risk, p.beta, mc)
        grads = gradients(self.history, risk, p, wts, mc)
        self.params = update_params(p, grads, wts.epsilon, wts, self.stats)
        self.n_updates += 1
        return ParamRecord(t, self.params.alpha, self.params.beta, l1, l2, l3,
                           wts.eta1 * l1 + wts.eta2 * l2 + wts.eta3 * l3)


# --- validation harness ---------------------------------------------------


def random_instance(rng, weights: LossWeights = LossWeights(), cfg: MarginConfig = MarginConfig(),
                    horizon: int = 15, max_obstacles: int = 4, kink_gap: float = 1e-3):
    """Random (history, risk grid, params) with every entry away from the ReLU kinks.

    Closing speeds are either non-positive (flat region) or put ``beta * ratio``
    in the unsaturated band, and no margin sits within ``kink_gap`` of its
    distance.
    """
    while True:
        hist = ExecutedHistory(weights.T)
        for _ in range(weights.T):
            hist.append(rng.normal(0, 1.0, 3), rng.normal(0, 1.0, 2), rng.normal(0, 1.0, 3), rng.normal(0, 1.0, 2))
        n = int(rng.integers(1, max_obstacles + 1))
        shape = (horizon - 1, n)
        d = rng.uniform(0.05, 4.0, shape)
        params = TunableParams(float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.1, 10.0)))
        # approaching entries keep beta * ratio in [0.05, 3], short of tanh saturation
        vc = rng.uniform(0.05, 3.0, shape) / params.beta * d
        vc = np.where(rng.random(shape) < 0.3, -rng.uniform(0.0, 8.0, shape), vc)
        risk = RiskGrid(d, vc)
        phi = margin_grid(risk, params.beta, cfg)
        if np.all(np.abs(phi - d) > kink_gap):
            return hist, risk, params


def gradient_check(n_samples: int, seed: int = 0, weights: LossWeights = LossWeights(),
                   cfg: MarginConfig = MarginConfig(), h: float = 1e-6):
    """Max relative error of the analytic partials against central differences.

    Returns ``(max_rel_err, rows)`` with one ``(alpha_err, beta_err)`` row per
    sample. The error scale is ``max(|analytic|, |numeric|, 1e-12)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_samples):
        hist, risk, p = random_instance(rng, weights, cfg)
        ga, gb = gradients(hist, risk, p, weights, cfg)

        def f(a, b):
            return total_loss(hist, risk, TunableParams(a, b), weights, cfg)

        na = (f(p.alpha + h, p.beta) - f(p.alpha - h, p.beta)) / (2 * h)
        nb = (f(p.alpha, p.beta + h) - f(p.alpha, p.beta - h)) / (2 * h)
        rows.append(tuple(abs(g - n) / max(abs(g), abs(n), 1e-12) for g, n in ((ga, na), (gb, nb))))
    return float(np.max(rows)), rows
