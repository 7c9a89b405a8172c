"""Hierarchical proactive tuning of MPC safety margins and tracking weights.

Modules: ``geometry`` (box distances), ``vehicle`` (unicycle kinematics and
references), ``planner`` (MPC solve), ``perception`` (Doppler LiDAR and
tracking), ``tuning`` (fast margins and slow gradient updates), ``sim``
(closed-loop episodes) and ``cli``.
"""
from .planner import PlannerConfig, PlanResult, TunableParams, solve
from .sim import EpisodeConfig, EpisodeResult, Outcome, Scenario, Strategy, run_episode

__version__ = "0.1.0"

__all__ = [
    "EpisodeConfig",
    "EpisodeResult",
    "Outcome",
    "PlanResult",
    "PlannerConfig",
    "Scenario",
    "Strategy",
    "TunableParams",
    "run_episode",
    "solve",
]
