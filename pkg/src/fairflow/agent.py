"""State, action and reward blocks of the learned controller, plus an AIMD baseline.

Everything here is a pure function of its arguments except the small
per-flow bookkeeping classes (:class:`FlowAgent`, the controllers), which
are owned by a single simulator.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import astuple, dataclass
from typing import Iterable, Sequence

import numpy as np

from .units import EPS, MIN_CWND, MTP, PACKET_BITS, PACKET_SIZE, pacing_rate, safe_div

HISTORY = 5                 # w
ALPHA = 0.025               # action control coefficient
BETA = 0.2                  # latency deadband
COEFFS = (0.1, 0.02, 1.0, 0.02, 0.01)   # c0..c4
N_LOCAL = 8
N_GLOBAL = 12
THR_UNIT = 1e8              # bps per unit in network inputs
LAT_UNIT = 0.1              # seconds per unit in network inputs
ACTION_LIMIT = 1 - 1e-6

__all__ = [
    "LocalState", "StateHistory", "GlobalState", "RewardBreakdown", "FlowAgent",
    "assemble_local_state", "assemble_global_state", "map_action", "pacing_rate",
    "reward_throughput", "reward_loss", "reward_latency", "reward_fairness",
    "reward_stability", "avg_throughput", "total_reward", "jain_index", "controller_step",
    "aimd_step", "AimdController", "PolicyController", "FixedController", "OracleFairController",
]


# -- state block -------------------------------------------------------------

@dataclass(frozen=True)
class LocalState:
    thr_ratio: float
    thr_max: float          # bps
    lat_ratio: float
    lat_min: float          # seconds
    rel_cwnd: float
    loss_ratio: float
    inflight_ratio: float
    pacing_ratio: float

    def as_vector(self) -> np.ndarray:
        """Network input layout.

        The two raw extrema are rescaled to O(1) units; unbounded ratios go
        through ``log1p`` so a runaway window cannot swamp the other inputs.
        """
        return np.array([
            self.thr_ratio, self.thr_max / THR_UNIT, math.log1p(self.lat_ratio),
            self.lat_min / LAT_UNIT, math.log1p(self.rel_cwnd), self.loss_ratio,
            math.log1p(self.inflight_ratio), math.log1p(self.pacing_ratio),
        ])

    @classmethod
    def zero(cls, lat_min: float) -> "LocalState":
        return cls(0.0, 1.0, 0.0, lat_min, 0.0, 0.0, 0.0, 0.0)


class StateHistory:
    """Ring of the last ``w`` local states, most recent last, zero padded."""

    def __init__(self, w: int = HISTORY):
        self.w = w
        self._ring: deque = deque(maxlen=w)

    def push(self, state: LocalState) -> None:
        self._ring.append(state)

    def __len__(self) -> int:
        return self.w

    def states(self) -> list[LocalState | None]:
        pad = [None] * (self.w - len(self._ring))
        return pad + list(self._ring)

    def flatten(self) -> np.ndarray:
        out = np.zeros(self.w * N_LOCAL)
        offset = (self.w - len(self._ring)) * N_LOCAL
        for i, s in enumerate(self._ring):
            out[offset + i * N_LOCAL: offset + (i + 1) * N_LOCAL] = s.as_vector()
        return out


def assemble_local_state(stats, thr_max: float, lat_min: float,
                         last_lat: float | None = None) -> LocalState:
    """Encode one period's statistics relative to the flow's running extrema.

    ``thr_max`` and ``lat_min`` must already include ``stats``.  Before any ack
    has been seen (``thr_max`` still at its sentinel) the zero state is returned.
    ``last_lat`` stands in for the latency of a period without acks.
    """
    if thr_max <= 1.0:
        return LocalState.zero(lat_min)
    lat = stats.lat if stats.acks_received > 0 else (last_lat or lat_min)
    cwnd_bits = stats.cwnd * PACKET_BITS
    return LocalState(
        thr_ratio=safe_div(stats.thr, thr_max),
        thr_max=thr_max,
        lat_ratio=safe_div(lat, lat_min),
        lat_min=lat_min,
        rel_cwnd=safe_div(cwnd_bits, thr_max * lat_min),
        loss_ratio=min(safe_div(stats.loss, thr_max), 10.0),
        inflight_ratio=safe_div(stats.pkt_flight, stats.cwnd),
        pacing_ratio=safe_div(stats.p_rate, thr_max),
    )


@dataclass(frozen=True)
class GlobalState:
    ovr_thr: float
    min_thr: float
    max_thr: float
    avg_lat: float
    min_cwnd: float
    max_cwnd: float
    avg_cwnd: float
    loss_ratio: float
    num_flow: int
    d0: float               # base one-way delay of the link
    buf: float              # bytes
    c: float                # bps

    def as_vector(self) -> np.ndarray:
        """Critic input: rates relative to capacity, delays to base RTT, windows to BDP.

        Delay and window ratios are unbounded and enter as ``log1p``.
        """
        rtt0 = 2 * self.d0 if self.d0 > 0 else MTP
        bdp_pkts = self.c * rtt0 / PACKET_BITS
        lg = math.log1p
        return np.array([
            self.ovr_thr / self.c, self.min_thr / self.c, self.max_thr / self.c,
            lg(self.avg_lat / rtt0),
            lg(self.min_cwnd / bdp_pkts), lg(self.max_cwnd / bdp_pkts), lg(self.avg_cwnd / bdp_pkts),
            min(self.loss_ratio, 10.0), self.num_flow / 10.0,
            self.d0 / LAT_UNIT, lg(self.buf * 8 / (self.c * rtt0)), self.c / THR_UNIT,
        ])


def assemble_global_state(latest: Sequence, link) -> GlobalState:
    """Aggregate the most recent statistics of every active flow on ``link``."""
    if not latest:
        raise ValueError("need at least one active flow")
    thr = [s.thr for s in latest]
    lat = [s.lat for s in latest]
    cwnd = [s.cwnd for s in latest]
    n = len(latest)
    return GlobalState(
        ovr_thr=sum(thr), min_thr=min(thr), max_thr=max(thr),
        avg_lat=sum(lat) / n,
        min_cwnd=min(cwnd), max_cwnd=max(cwnd), avg_cwnd=sum(cwnd) / n,
        loss_ratio=sum(safe_div(s.loss, s.thr) for s in latest) / n,
        num_flow=n, d0=link.base_owd, buf=float(link.buffer_bytes), c=link.capacity,
    )


# -- action block ------------------------------------------------------------

def map_action(cwnd: float, a: float, alpha: float = ALPHA, floor: float | None = MIN_CWND) -> float:
    """Multiplicative window update; increases and decreases are exact inverses."""
    if a >= 0:
        nxt = cwnd * (1 + alpha * a)
    else:
        nxt = cwnd / (1 - alpha * a)
    if floor is not None and nxt < floor:
        return float(floor)
    return nxt


# -- reward block ------------------------------------------------------------

def reward_throughput(thr: Sequence[float], c: float) -> float:
    return sum(thr) / c if len(thr) else 0.0


def reward_loss(thr: Sequence[float], loss: Sequence[float]) -> float:
    if len(thr) != len(loss):
        raise ValueError("thr and loss lists differ in length")
    if not len(thr):
        return 0.0
    return sum(safe_div(l, t) for t, l in zip(thr, loss)) / len(thr)


def reward_latency(lat: Sequence[float], d0: float, beta: float = BETA, p_rate: float = 0.0,
                   c: float | None = None) -> float:
    """Queueing-delay penalty with a deadband of ``beta * d0``.

    Without ``c`` the raw value (seconds x bps) is returned; with ``c`` it is
    expressed relative to the base delay and the link rate.
    """
    if d0 <= 0:
        raise ValueError("d0 must be positive")
    if not len(lat):
        return 0.0
    excess = sum(lat) / len(lat) - (1 + beta) * d0
    if excess <= 0:
        return 0.0
    raw = excess * p_rate
    if c is None:
        return raw
    return raw / (c * d0)


def avg_throughput(history: Sequence[float], w: int | None = None) -> float:
    w = len(history) if w is None else w
    return sum(history) / w if w else 0.0


def reward_fairness(avg_thr: Sequence[float]) -> float:
    n = len(avg_thr)
    total = sum(avg_thr)
    if n <= 1 or total <= EPS or max(avg_thr) == min(avg_thr):
        return 0.0
    mean = total / n
    var = sum((x - mean) ** 2 for x in avg_thr)
    return math.sqrt(var / (n * total * total))


def reward_stability(histories: Sequence[Sequence[float]], avg_thr: Sequence[float] | None = None,
                     w: int | None = None) -> float:
    n = len(histories)
    if not n:
        return 0.0
    if avg_thr is None:
        avg_thr = [avg_throughput(h, w) for h in histories]
    acc = 0.0
    for hist, avg in zip(histories, avg_thr):
        if avg <= EPS or max(hist) == min(hist):
            continue
        ww = len(hist) if w is None else w
        acc += math.sqrt(sum((x - avg) ** 2 for x in hist) / (ww * avg * avg))
    return acc / n


@dataclass(frozen=True)
class RewardBreakdown:
    r_thr: float
    r_lat: float
    r_loss: float
    r_fair: float
    r_stab: float
    total_raw: float
    total_bounded: float

    def as_tuple(self) -> tuple:
        return astuple(self)


def total_reward(r_thr: float, r_lat: float, r_loss: float, r_fair: float, r_stab: float,
                 coeffs: Sequence[float] = COEFFS) -> RewardBreakdown:
    c0, c1, c2, c3, c4 = coeffs
    if min(coeffs) < 0:
        raise ValueError("reward coefficients must be non-negative")
    raw = c0 * r_thr - c1 * r_lat - c2 * r_loss - c3 * r_fair - c4 * r_stab
    bounded = 0.1 * min(1.0, max(-1.0, raw))
    return RewardBreakdown(r_thr, r_lat, r_loss, r_fair, r_stab, raw, bounded)


def jain_index(thr: Sequence[float]) -> float:
    n = len(thr)
    sq = sum(x * x for x in thr)
    if n == 0 or sq == 0:
        raise ValueError("Jain index undefined for an empty or all-zero allocation")
    if min(thr) < 0:
        raise ValueError("throughputs must be non-negative")
    return sum(thr) ** 2 / (n * sq)


# -- per-flow bookkeeping ------------------------------------------------------

class FlowAgent:
    """Running extrema, state history and throughput history of one flow."""

    def __init__(self, base_rtt: float, w: int = HISTORY):
        self.w = w
        self.base_rtt = base_rtt if base_rtt > 0 else MTP
        self.thr_max = 1.0
        self.lat_min = self.base_rtt
        self._lat_seen = False
        self.last_lat: float | None = None
        self.history = StateHistory(w)
        self.thr_hist: deque = deque([0.0] * w, maxlen=w)
        self.latest = None

    def observe(self, stats) -> LocalState:
        if stats.thr > self.thr_max:
            self.thr_max = stats.thr
        if stats.acks_received > 0:
            if not self._lat_seen or stats.lat < self.lat_min:
                self.lat_min = stats.lat
                self._lat_seen = True
        state = assemble_local_state(stats, self.thr_max, self.lat_min, self.last_lat)
        if stats.acks_received > 0:
            self.last_lat = stats.lat
        self.history.push(state)
        self.thr_hist.append(stats.thr)
        self.latest = stats
        return state

    def avg_thr(self) -> float:
        return avg_throughput(self.thr_hist, self.w)


def global_reward(agents: Iterable[FlowAgent], c: float, d0: float,
                  coeffs: Sequence[float] = COEFFS, beta: float = BETA) -> RewardBreakdown:
    """Shared reward over the latest statistics of ``agents``.

    ``d0`` is the base round-trip delay the mean latency is compared against.
    """
    agents = [a for a in agents if a.latest is not None]
    if not agents:
        return total_reward(0, 0, 0, 0, 0, coeffs)
    thr = [a.latest.thr for a in agents]
    lat = [a.latest.lat for a in agents if a.latest.acks_received > 0]
    loss = [a.latest.loss for a in agents]
    p_rate = sum(a.latest.p_rate for a in agents)
    avgs = [a.avg_thr() for a in agents]
    return total_reward(
        reward_throughput(thr, c),
        reward_latency(lat, d0, beta, p_rate, c),
        reward_loss(thr, loss),
        reward_fairness(avgs),
        reward_stability([list(a.thr_hist) for a in agents], avgs),
        coeffs,
    )


# -- controllers ---------------------------------------------------------------

def controller_step(history: StateHistory, policy, cwnd: float, alpha: float = ALPHA,
                    noise: float = 0.0) -> tuple[float, float]:
    """Run the actor on a flattened history and apply the resulting action."""
    from .neural import actor_forward

    a = actor_forward(policy, history.flatten()) + noise
    a = min(ACTION_LIMIT, max(-ACTION_LIMIT, a))
    return a, map_action(cwnd, a, alpha)


class PolicyController:
    """Deployed actor driving one flow from its local state only."""

    def __init__(self, policy, alpha: float = ALPHA, w: int = HISTORY):
        self.policy = policy
        self.alpha = alpha
        self.w = w
        self.agent: FlowAgent | None = None

    def attach(self, info) -> None:
        self.agent = FlowAgent(info.base_rtt, self.w)

    def on_mtp(self, stats) -> float:
        self.agent.observe(stats)
        _, cwnd = controller_step(self.agent.history, self.policy, stats.cwnd, self.alpha)
        return cwnd


class FixedController:
    def __init__(self, cwnd: float):
        self.cwnd = cwnd

    def on_mtp(self, stats) -> float:
        return self.cwnd


def aimd_step(loss: bool, cwnd: float, rtt_fraction: float = 1.0) -> float:
    """Additive increase of one packet per RTT, halving on loss, floor of 2 packets."""
    if loss:
        return max(float(MIN_CWND), cwnd / 2)
    return cwnd + rtt_fraction


class AimdController:
    """AIMD on MTP granularity, reducing at most once per smoothed RTT."""

    def __init__(self):
        self.srtt = None
        self.last_cut = -math.inf

    def attach(self, info) -> None:
        self.srtt = info.base_rtt if info.base_rtt > 0 else MTP

    def on_mtp(self, stats) -> float:
        if stats.acks_received:
            self.srtt = 0.875 * self.srtt + 0.125 * stats.lat
        if stats.loss > 0 and stats.time - self.last_cut >= self.srtt:
            self.last_cut = stats.time
            return aimd_step(True, stats.cwnd)
        if stats.loss > 0:
            return stats.cwnd
        return aimd_step(False, stats.cwnd, MTP / self.srtt)


class OracleFairController:
    """Sets each flow's window to its exact share of the bottleneck's BDP.

    All instances created from one :meth:`group` share the count of active flows.
    """

    def __init__(self, group: dict, capacity: float, headroom: float = 0.95):
        self.group = group
        self.capacity = capacity
        self.headroom = headroom
        self.flow_id = None
        self.base_rtt = None

    @classmethod
    def factory(cls, capacity: float, headroom: float = 0.95):
        group: dict = {}
        return lambda: cls(group, capacity, headroom)

    def attach(self, info) -> None:
        self.flow_id = info.flow_id
        self.base_rtt = info.base_rtt
        self.group[info.flow_id] = (info.start_time, info.start_time + info.duration)

    def on_mtp(self, stats) -> float:
        t = stats.time
        n = sum(1 for s, e in self.group.values() if s <= t < e or (s <= t and e == t))
        n = max(n, 1)
        share = self.capacity / n
        return max(float(MIN_CWND), self.headroom * share * self.base_rtt / PACKET_BITS)
