"""ECN marking, DCQCN rate control and PFC pause/resume."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .topology import ConfigError


@dataclass(frozen=True)
class EcnConfig:
    k_min: int  # bytes
    k_max: int  # bytes
    p_max: float

    def __post_init__(self):
        if not 0 < self.k_min < self.k_max:
            raise ConfigError("ECN thresholds need 0 < k_min < k_max")
        if not 0 < self.p_max <= 1:
            raise ConfigError("ECN p_max must be in (0, 1]")


def ecn_mark_probability(queue_bytes: int, cfg: EcnConfig) -> float:
    if queue_bytes < cfg.k_min:
        return 0.0
    if queue_bytes >= cfg.k_max:
        return cfg.p_max
    return cfg.p_max * (queue_bytes - cfg.k_min) / (cfg.k_max - cfg.k_min)


@dataclass(frozen=True)
class DcqcnParams:
    g: float = 1 / 16
    alpha_timer: int = 55_000  # ns
    increase_timer: int = 55_000  # ns
    fast_recovery_stages: int = 5
    rate_ai: int = 40_000_000  # bps
    rate_hai: int = 400_000_000  # bps
    min_rate: int = 1_000_000  # bps
    cnp_interval: int = 50_000  # ns, receiver-side notification gap per QP
    # False keeps the pre-cut target across back-to-back cuts (no increase
    # stage in between), as common RNIC implementations do
    clamp_target: bool = True


class DcqcnState:
    """Reaction-point state of one QP.

    Rates are floats in bits per second; the pacing code rounds the resulting
    inter-packet gaps up to whole nanoseconds.
    """

    __slots__ = ("line_rate", "current_rate", "target_rate", "alpha",
                 "stage", "params", "cnp_seen", "generation", "timers_armed")

    def __init__(self, line_rate: float, params: DcqcnParams | None = None,
                 alpha: float = 1.0):
        self.params = params or DcqcnParams()
        self.line_rate = float(line_rate)
        self.current_rate = float(line_rate)
        self.target_rate = float(line_rate)
        self.alpha = alpha
        self.stage = 0
        self.cnp_seen = False  # a notification arrived in the current alpha period
        self.generation = 0  # bumps on every cut; stale increase timers compare it
        self.timers_armed = False

    def __repr__(self) -> str:
        return (f"DcqcnState(rate={self.current_rate:.4g}, target={self.target_rate:.4g}, "
                f"alpha={self.alpha:.4g}, stage={self.stage})")

    @property
    def at_line_rate(self) -> bool:
        return self.current_rate >= self.line_rate and self.target_rate >= self.line_rate


def on_congestion_notification(state: DcqcnState) -> None:
    p = state.params
    if p.clamp_target or state.stage > 0:
        state.target_rate = state.current_rate
    state.current_rate = max(p.min_rate, state.current_rate * (1 - state.alpha / 2))
    state.alpha = (1 - p.g) * state.alpha + p.g
    state.stage = 0
    state.cnp_seen = True
    state.generation += 1


def alpha_timer_tick(state: DcqcnState) -> None:
    """Alpha decays once per quiet period; a period with a notification resets the flag."""
    if state.cnp_seen:
        state.cnp_seen = False
    else:
        state.alpha = (1 - state.params.g) * state.alpha


def rate_increase_tick(state: DcqcnState) -> None:
    p = state.params
    state.stage += 1
    f = p.fast_recovery_stages
    if state.stage > 2 * f:
        state.target_rate += p.rate_hai
    elif state.stage > f:
        state.target_rate += p.rate_ai
    state.target_rate = min(state.target_rate, state.line_rate)
    state.current_rate = min(state.line_rate,
                             (state.current_rate + state.target_rate) / 2)


@dataclass(frozen=True)
class PfcConfig:
    pause_threshold: int = 512_000  # bytes per ingress
    resume_threshold: int = 384_000
    enabled: bool = True

    def __post_init__(self):
        if self.resume_threshold >= self.pause_threshold:
            raise ConfigError("PFC resume threshold must be below the pause threshold")


class PfcFrame(enum.Enum):
    PAUSE = "pause"
    RESUME = "resume"


def pfc_update(ingress_queue_bytes: int, cfg: PfcConfig,
               currently_paused: bool) -> PfcFrame | None:
    if not currently_paused and ingress_queue_bytes >= cfg.pause_threshold:
        return PfcFrame.PAUSE
    if currently_paused and ingress_queue_bytes <= cfg.resume_threshold:
        return PfcFrame.RESUME
    return None
