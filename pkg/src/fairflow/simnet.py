"""Packet-level discrete-event simulator for one or two tandem bottleneck links.

Every flow is window controlled and paced.  Once per monitoring period (MTP)
each flow summarizes the acks and losses it saw into an :class:`MtpStats`
record and hands it to its controller, which answers with the next window.

Link queues are evaluated lazily: a drop-tail FIFO served at a known rate
lets the departure time of a packet be computed when it is enqueued, so the
only scheduled events per packet are the ack (or loss notification) and,
when pacing holds it back, the send timer.
"""
from __future__ import annotations

import heapq
import random
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

from .units import INITIAL_CWND, MAX_CWND, MIN_CWND, MTP, PACKET_SIZE, pacing_rate

ACCESS_FACTOR = 2.0     # sender line rate as a multiple of the route bottleneck


class ConfigError(ValueError):
    """Invalid topology or scenario configuration."""


@dataclass(frozen=True)
class LinkSpec:
    capacity: float                 # bps
    base_owd: float                 # one-way propagation delay, seconds
    buffer_bytes: int
    random_loss_rate: float = 0.0
    bandwidth_trace: tuple[tuple[float, float], ...] | None = None

    def validate(self, name: str = "link") -> None:
        if not self.capacity > 0:
            raise ConfigError(f"{name}.capacity must be > 0 (got {self.capacity})")
        if self.base_owd < 0:
            raise ConfigError(f"{name}.base_owd must be >= 0")
        if self.buffer_bytes < PACKET_SIZE:
            raise ConfigError(f"{name}.buffer_bytes must hold at least one packet")
        if not 0 <= self.random_loss_rate <= 1:
            raise ConfigError(f"{name}.random_loss_rate must lie in [0, 1]")
        if self.bandwidth_trace is not None:
            trace = self.bandwidth_trace
            if not trace or trace[0][0] != 0:
                raise ConfigError(f"{name}.bandwidth_trace must start at time 0")
            for (t0, _), (t1, _) in zip(trace, trace[1:]):
                if not t1 > t0:
                    raise ConfigError(f"{name}.bandwidth_trace times must be strictly increasing")
            for _, cap in trace:
                if not cap > 0:
                    raise ConfigError(f"{name}.bandwidth_trace capacity must be > 0")

    @property
    def base_rtt(self) -> float:
        return 2 * self.base_owd


@dataclass(frozen=True)
class TopologySpec:
    links: tuple[LinkSpec, ...]
    routes: tuple[tuple[int, ...], ...] = ((0,),)

    def validate(self) -> None:
        if not 1 <= len(self.links) <= 2:
            raise ConfigError("links: topology needs 1 or 2 links")
        for i, link in enumerate(self.links):
            link.validate(f"links[{i}]")
        for i, route in enumerate(self.routes):
            check_route(route, len(self.links), f"routes[{i}]")

    def route_base_rtt(self, route: Sequence[int]) -> float:
        return 2 * sum(self.links[k].base_owd for k in route)


def check_route(route: Sequence[int], n_links: int, name: str = "route") -> None:
    if len(route) == 0:
        raise ConfigError(f"{name} must be non-empty")
    for k in route:
        if not 0 <= k < n_links:
            raise ConfigError(f"{name} references missing link {k}")
    if list(route) != sorted(set(route)):
        raise ConfigError(f"{name} must traverse links in tandem order without repeats")


class Packet:
    __slots__ = ("flow_id", "seq", "size", "sent_at", "delivered_at", "acked_at",
                 "dropped", "dropped_at")

    def __init__(self, flow_id, seq: int, size: int, sent_at: float):
        self.flow_id = flow_id
        self.seq = seq
        self.size = size
        self.sent_at = sent_at
        self.delivered_at: float | None = None
        self.acked_at: float | None = None
        self.dropped: str | None = None     # "queue" | "random"
        self.dropped_at: float | None = None

    def __repr__(self) -> str:
        return (f"Packet({self.flow_id!r}, seq={self.seq}, sent_at={self.sent_at:.6f}, "
                f"delivered_at={self.delivered_at}, dropped={self.dropped})")


@dataclass(frozen=True)
class MtpStats:
    flow_id: Any
    mtp_index: int
    time: float             # end of the monitoring period
    thr: float              # bps acked during the period
    lat: float              # mean RTT of those acks (0 when none)
    loss: float             # bps reported lost during the period
    pkt_flight: int
    p_rate: float
    cwnd: float
    acks_received: int
    last: bool = False      # final period before the flow stops


class Controller(Protocol):
    def on_mtp(self, stats: MtpStats) -> float:
        """Return the window (packets) to use from now on."""


@dataclass
class FlowCounters:
    sent: int = 0
    delivered: int = 0
    dropped_queue: int = 0
    dropped_random: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_queue + self.dropped_random


@dataclass
class ConservationReport:
    time: float
    per_flow: dict = field(default_factory=dict)   # flow_id -> (sent, delivered, dropped, in_flight)

    @property
    def ok(self) -> bool:
        return all(s == d + x + f for s, d, x, f in self.per_flow.values())

    @property
    def totals(self) -> tuple[int, int, int, int]:
        cols = list(zip(*self.per_flow.values())) or [(), (), (), ()]
        return tuple(sum(c) for c in cols)


@dataclass(frozen=True)
class FlowInfo:
    """What a controller may know about its flow when it is attached."""
    flow_id: Any
    route: tuple[int, ...]
    start_time: float
    duration: float
    extra_delay: float
    base_rtt: float


class _Link:
    __slots__ = ("spec", "queue", "queued_bytes", "last_dep", "times", "caps", "log")

    def __init__(self, spec: LinkSpec, record: bool):
        self.spec = spec
        self.queue: deque = deque()
        self.queued_bytes = 0
        self.last_dep = 0.0
        if spec.bandwidth_trace:
            self.times = [t for t, _ in spec.bandwidth_trace]
            self.caps = [c for _, c in spec.bandwidth_trace]
        else:
            self.times = None
            self.caps = None
        self.log = [] if record else None

    def max_queue_delay(self) -> float:
        slowest = min(self.caps) if self.caps else self.spec.capacity
        return self.spec.buffer_bytes * 8 / slowest

    def capacity_at(self, t: float) -> float:
        if self.times is None:
            return self.spec.capacity
        return self.caps[bisect_right(self.times, t) - 1]

    def enqueue(self, t: float, size: int) -> float | None:
        """Admit a packet arriving at ``t``; return its departure time or None on overflow."""
        q = self.queue
        while q and q[0][0] <= t:
            self.queued_bytes -= q.popleft()[1]
        if self.queued_bytes + size > self.spec.buffer_bytes:
            return None
        start = t if t > self.last_dep else self.last_dep
        dep = start + size * 8 / self.capacity_at(start)
        self.last_dep = dep
        q.append((dep, size))
        self.queued_bytes += size
        return dep


class _Flow:
    __slots__ = ("flow_id", "idx", "route", "controller", "start", "duration", "extra_delay",
                 "fwd_after", "hop_owd", "rev_delay", "base_rtt", "cwnd", "srtt", "p_rate",
                 "next_send", "timer_pending", "sending", "inflight", "seq", "n_mtp",
                 "mtp_index", "acked_bytes", "lost_bytes", "rtt_sum", "n_acks", "counters",
                 "started", "finished", "rtt_seen", "rate_cap", "cwnd_cap")


# event kinds
_START, _STOP, _MTP, _SEND, _ACK, _LOSS, _ARRIVE = range(7)
# transit outcomes
_DELIVER, _RDROP = 0, 1


class Simulator:
    """Single-threaded event loop over a :class:`TopologySpec`.

    Use :func:`build_topology` to construct one.
    """

    def __init__(self, spec: TopologySpec, seed: int, record: bool = False,
                 access_factor: float = ACCESS_FACTOR):
        spec.validate()
        if not access_factor >= 1:
            raise ConfigError("access_factor must be >= 1")
        self.access_factor = access_factor
        self.spec = spec
        self.seed = seed
        self.now = 0.0
        self.rng = random.Random(seed)
        self.record = record
        self.links = [_Link(l, record) for l in spec.links]
        self.flows: dict[Any, _Flow] = {}
        self._flow_list: list[_Flow] = []
        self._events: list = []
        self._transit: list = []
        self._counter = 0
        self.packets: list[Packet] = []
        self._out: list = []

    # -- setup ---------------------------------------------------------------
    def add_flow(self, flow_id, route: Sequence[int], start_time: float, duration: float,
                 extra_delay: float, controller: Controller) -> FlowInfo:
        if flow_id in self.flows:
            raise ConfigError(f"duplicate flow_id {flow_id!r}")
        route = tuple(route)
        check_route(route, len(self.links))
        if start_time < self.now:
            raise ConfigError("start_time lies in the past")
        if duration < 0 or extra_delay < 0:
            raise ConfigError("duration and extra_delay must be non-negative")
        f = _Flow()
        f.flow_id = flow_id
        f.idx = len(self._flow_list)
        f.route = route
        f.controller = controller
        f.start = start_time
        f.duration = duration
        f.extra_delay = extra_delay
        f.hop_owd = [self.links[k].spec.base_owd for k in route]
        f.fwd_after = [sum(f.hop_owd[h:]) + extra_delay for h in range(len(route))]
        f.rev_delay = sum(f.hop_owd) + extra_delay
        f.base_rtt = 2 * f.rev_delay
        f.cwnd = INITIAL_CWND
        f.srtt = f.base_rtt if f.base_rtt > 0 else MTP
        f.rate_cap = self.access_factor * min(self.links[k].spec.capacity for k in route)
        # The sender can never have more outstanding than its line rate fills
        # over the worst-case RTT, so larger windows are clamped to that.
        worst_rtt = f.base_rtt + sum(self.links[k].max_queue_delay() for k in route)
        f.cwnd_cap = min(MAX_CWND, max(float(MIN_CWND), f.rate_cap * worst_rtt / (PACKET_SIZE * 8)))
        f.p_rate = min(pacing_rate(f.cwnd, f.srtt), f.rate_cap)
        f.next_send = start_time
        f.timer_pending = False
        f.sending = False
        f.inflight = 0
        f.seq = 0
        f.n_mtp = int(duration / MTP + 1e-9)
        f.mtp_index = 0
        f.acked_bytes = f.lost_bytes = 0
        f.rtt_sum = 0.0
        f.n_acks = 0
        f.counters = FlowCounters()
        f.started = f.finished = f.rtt_seen = False
        self.flows[flow_id] = f
        self._flow_list.append(f)
        info = FlowInfo(flow_id, route, start_time, duration, extra_delay, f.base_rtt)
        attach = getattr(controller, "attach", None)
        if attach is not None:
            attach(info)
        self._push(start_time, _START, f, None)
        return info

    # -- event plumbing ------------------------------------------------------
    def _push(self, t, kind, flow, payload):
        self._counter += 1
        heapq.heappush(self._events, (t, self._counter, kind, flow, payload))

    def _settle(self, t: float) -> None:
        tr = self._transit
        flows = self._flow_list
        while tr and tr[0][0] <= t:
            _, _, idx, outcome = heapq.heappop(tr)
            if outcome == _DELIVER:
                flows[idx].counters.delivered += 1
            else:
                flows[idx].counters.dropped_random += 1

    def _transit_push(self, t, f, outcome, pkt):
        self._counter += 1
        heapq.heappush(self._transit, (t, self._counter, f.idx, outcome))
        if self.record:
            if outcome == _DELIVER:
                pkt.delivered_at = t
            else:
                pkt.dropped = "random"
                pkt.dropped_at = t

    # -- packet path ---------------------------------------------------------
    def _try_send(self, f: _Flow, now: float) -> None:
        if not f.sending or f.inflight >= max(MIN_CWND, int(f.cwnd)):
            return
        if f.next_send > now:
            if not f.timer_pending:
                f.timer_pending = True
                self._push(f.next_send, _SEND, f, None)
            return
        pkt = Packet(f.flow_id, f.seq, PACKET_SIZE, now)
        f.seq += 1
        f.inflight += 1
        f.counters.sent += 1
        if self.record:
            self.packets.append(pkt)
        f.p_rate = min(pacing_rate(f.cwnd, f.srtt), f.rate_cap)
        f.next_send = now + PACKET_SIZE * 8 / f.p_rate
        self._enter_link(f, pkt, 0, now)
        if f.inflight < max(MIN_CWND, int(f.cwnd)) and not f.timer_pending:
            f.timer_pending = True
            self._push(f.next_send, _SEND, f, None)

    def _enter_link(self, f: _Flow, pkt: Packet, hop: int, t: float) -> None:
        link = self.links[f.route[hop]]
        dep = link.enqueue(t, pkt.size)
        if dep is None:
            f.counters.dropped_queue += 1
            if self.record:
                pkt.dropped = "queue"
                pkt.dropped_at = t
            self._push(t + f.fwd_after[hop] + f.rev_delay, _LOSS, f, pkt)
            return
        if link.log is not None:
            link.log.append((t, dep, f.flow_id, pkt.seq))
        p = link.spec.random_loss_rate
        if p > 0 and self.rng.random() < p:
            self._transit_push(dep, f, _RDROP, pkt)
            self._push(dep + f.fwd_after[hop] + f.rev_delay, _LOSS, f, pkt)
        elif hop == len(f.route) - 1:
            arrive = dep + f.fwd_after[hop]
            self._transit_push(arrive, f, _DELIVER, pkt)
            self._push(arrive + f.rev_delay, _ACK, f, pkt)
        else:
            self._push(dep + f.hop_owd[hop], _ARRIVE, f, (pkt, hop + 1))

    # -- main loop -----------------------------------------------------------
    def run_until(self, t_end: float) -> list[tuple[Any, MtpStats]]:
        """Advance to ``t_end``; return the (flow_id, MtpStats) emitted on the way."""
        if t_end < self.now:
            raise ValueError("t_end lies in the past")
        self._out = out = []
        events = self._events
        pop = heapq.heappop
        while events and events[0][0] <= t_end:
            t, _, kind, f, payload = pop(events)
            self.now = t
            if kind == _ACK:
                f.inflight -= 1
                rtt = t - payload.sent_at
                if self.record:
                    payload.acked_at = t
                if f.rtt_seen:
                    f.srtt = 0.875 * f.srtt + 0.125 * rtt
                else:
                    f.srtt = rtt
                    f.rtt_seen = True
                f.acked_bytes += payload.size
                f.rtt_sum += rtt
                f.n_acks += 1
                self._try_send(f, t)
            elif kind == _SEND:
                f.timer_pending = False
                self._try_send(f, t)
            elif kind == _ARRIVE:
                pkt, hop = payload
                self._enter_link(f, pkt, hop, t)
            elif kind == _LOSS:
                f.inflight -= 1
                f.lost_bytes += payload.size
                self._try_send(f, t)
            elif kind == _MTP:
                self._on_mtp(f, t)
            elif kind == _START:
                f.started = True
                if f.n_mtp > 0:
                    f.sending = True
                    self._push(t + MTP, _MTP, f, None)
                    self._push(t + f.duration, _STOP, f, None)
                    self._try_send(f, t)
                else:
                    f.finished = True
            elif kind == _STOP:
                f.sending = False
        self.now = t_end
        self._settle(t_end)
        return out

    def _on_mtp(self, f: _Flow, t: float) -> None:
        f.mtp_index += 1
        last = f.mtp_index >= f.n_mtp
        stats = MtpStats(
            flow_id=f.flow_id,
            mtp_index=f.mtp_index,
            time=t,
            thr=f.acked_bytes * 8 / MTP,
            lat=f.rtt_sum / f.n_acks if f.n_acks else 0.0,
            loss=f.lost_bytes * 8 / MTP,
            pkt_flight=f.inflight,
            p_rate=f.p_rate,
            cwnd=f.cwnd,
            acks_received=f.n_acks,
            last=last,
        )
        f.acked_bytes = f.lost_bytes = 0
        f.rtt_sum = 0.0
        f.n_acks = 0
        new_cwnd = f.controller.on_mtp(stats)
        f.cwnd = min(f.cwnd_cap, max(float(MIN_CWND), float(new_cwnd)))
        f.p_rate = min(pacing_rate(f.cwnd, f.srtt), f.rate_cap)
        self._out.append((f.flow_id, stats))
        if last:
            f.sending = False
            f.finished = True
        else:
            self._push(t + MTP, _MTP, f, None)
            self._try_send(f, t)

    # -- introspection -------------------------------------------------------
    def active_flows(self) -> list:
        return [f.flow_id for f in self._flow_list if f.started and not f.finished]

    def counters(self, flow_id) -> FlowCounters:
        self._settle(self.now)
        return self.flows[flow_id].counters

    def in_flight_count(self, flow_id) -> int:
        """Packets of a flow sitting in a queue or on a wire, counted from pending state."""
        self._settle(self.now)
        f = self.flows[flow_id]
        n = sum(1 for e in self._transit if e[2] == f.idx)
        n += sum(1 for e in self._events if e[2] == _ARRIVE and e[3] is f)
        return n


def build_topology(spec: TopologySpec, seed: int, record: bool = False,
                   access_factor: float = ACCESS_FACTOR) -> Simulator:
    """Validate ``spec`` and return a simulator at time 0.

    With ``record`` set, every packet and every link admission is logged for
    offline auditing (``sim.packets`` and ``sim.links[k].log``).
    """
    return Simulator(spec, seed, record=record, access_factor=access_factor)


def conservation_audit(sim: Simulator) -> ConservationReport:
    """Check sent = delivered + dropped + in-flight for every flow at ``sim.now``."""
    report = ConservationReport(time=sim.now)
    for fid in sim.flows:
        c = sim.counters(fid)
        report.per_flow[fid] = (c.sent, c.delivered, c.dropped, sim.in_flight_count(fid))
    return report
