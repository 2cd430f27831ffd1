"""Evaluation scenarios and convergence metrics.

Traces are per-MTP rows per flow.  Metrics work on traces alone, so any
congestion controller's logs in the same CSV layout can be analyzed.
"""
from __future__ import annotations

import csv
import math
import random
from decimal import Context
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import agent as ag
from .flowgen import Deterministic, FlowSpec, ScenarioSpec, expand_arrivals, materialize, staggered
from .neural import MlpParams, actor_forward
from .simnet import LinkSpec, TopologySpec, build_topology
from .units import MTP, PACKET_BITS, bdp_bytes

TRACE_FIELDS = ("time_s", "flow_id", "thr_bps", "lat_s", "loss_bps", "cwnd_pkts",
                "r_thr", "r_lat", "r_loss", "r_fair", "r_stab", "r_total")
REPORT_FIELDS = ("event_time_s", "event_type", "convergence_s", "stability_bps", "mean_jain")
PROBE_FIELDS = ("thr_bps", "lat_s", "action")

BAND = 0.10
SMOOTH = 5
HOLD = 10


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRow:
    time: float
    flow_id: str
    thr: float
    lat: float
    loss: float
    cwnd: float
    r_thr: float | None = None
    r_lat: float | None = None
    r_loss: float | None = None
    r_fair: float | None = None
    r_stab: float | None = None
    r_total: float | None = None

    def values(self) -> tuple:
        return (self.time, self.flow_id, self.thr, self.lat, self.loss, self.cwnd, self.r_thr,
                self.r_lat, self.r_loss, self.r_fair, self.r_stab, self.r_total)


@dataclass(frozen=True)
class ProbePoint:
    thr: float
    lat: float
    action: float


@dataclass(frozen=True)
class Event:
    time: float
    kind: str           # "arrival" | "departure"
    flow_id: str


@dataclass
class EventReport:
    event_time: float
    event_type: str
    convergence: float | None
    stability: float | None
    mean_jain: float | None

    def values(self) -> tuple:
        return (self.event_time, self.event_type, self.convergence, self.stability, self.mean_jain)


@dataclass
class ConvergenceReport:
    events: list[EventReport]
    jain_series: list[tuple[float, float]]
    mean_jain: float | None


# Metrics use exact rational sums and round once, so any correct
# recomputation of the same quantity yields the same float.
_DEC = Context(prec=60)


def exact_mean(xs: Sequence[float]) -> float:
    return float(sum(map(Fraction, xs), Fraction(0)) / len(xs))


def exact_pstdev(xs: Sequence[float]) -> float:
    fr = [Fraction(x) for x in xs]
    mu = sum(fr, Fraction(0)) / len(fr)
    var = sum(((x - mu) ** 2 for x in fr), Fraction(0)) / len(fr)
    root = _DEC.sqrt(_DEC.divide(_DEC.create_decimal(var.numerator),
                                 _DEC.create_decimal(var.denominator)))
    return float(root)


def exact_jain(xs: Sequence[float]) -> float:
    fr = [Fraction(x) for x in xs]
    s = sum(fr, Fraction(0))
    q = sum((x * x for x in fr), Fraction(0))
    if q == 0:
        raise ValueError("Jain index undefined for an all-zero allocation")
    return float(s * s / (len(fr) * q))


def by_flow(rows: Iterable[TraceRow]) -> dict[str, list[TraceRow]]:
    out: dict[str, list[TraceRow]] = {}
    for r in rows:
        out.setdefault(r.flow_id, []).append(r)
    for v in out.values():
        v.sort(key=lambda r: r.time)
    return out


def slot_of(t: float, mtp: float = MTP) -> int:
    return int(math.floor(t / mtp + 1e-6))


# -- metrics -------------------------------------------------------------------------

def jain_over_time(rows: Iterable[TraceRow], min_active: int = 2,
                   shares: dict | None = None) -> list[tuple[float, float]]:
    """Jain index per timeslot over the flows that delivered data in it.

    With ``shares`` each throughput is divided by the flow's ideal share first.
    Returns ``(slot_start_time, jain)`` for slots with at least ``min_active`` flows.
    """
    slots: dict[int, list[float]] = {}
    for r in rows:
        if r.thr > 0:
            x = r.thr / shares[r.flow_id] if shares else r.thr
            slots.setdefault(slot_of(r.time), []).append(x)
    return [(k * MTP, exact_jain(v)) for k, v in sorted(slots.items()) if len(v) >= min_active]


def _trailing_means(values: Sequence[float], window: int) -> list[Fraction]:
    fr = [Fraction(v) for v in values]
    return [sum(fr[max(0, i - window + 1):i + 1], Fraction(0)) / (i + 1 - max(0, i - window + 1))
            for i in range(len(fr))]


def smoothed(values: Sequence[float], window: int = SMOOTH) -> list[float]:
    """Trailing mean over up to ``window`` samples."""
    return [float(m) for m in _trailing_means(values, window)]


def convergence_time(flow_rows: Sequence[TraceRow], event_time: float, fair_share: float,
                     end_time: float = math.inf, band: float = BAND, smooth: int = SMOOTH,
                     hold: int = HOLD) -> float | None:
    """Delay from ``event_time`` until the smoothed rate stays within the band.

    The smoothed rate must sit in ``fair_share * (1 +- band)`` for ``hold``
    consecutive periods, all before ``end_time``.  None if that never happens.
    The band test is exact, with ``band`` read as the decimal it prints as.
    """
    width = Fraction(repr(band))
    lo = Fraction(fair_share) * (1 - width)
    hi = Fraction(fair_share) * (1 + width)
    sm = _trailing_means([r.thr for r in flow_rows], smooth)
    times = [r.time for r in flow_rows]
    run = 0
    for i, (t, v) in enumerate(zip(times, sm)):
        if t < event_time - 1e-9:
            continue
        if t >= end_time:
            break
        if lo <= v <= hi:
            run += 1
            if run >= hold:
                return round(max(0.0, times[i - hold + 1] - event_time), 9)
        else:
            run = 0
    return None


def stability_metric(flow_rows: Sequence[TraceRow], start: float, end: float = math.inf) -> float:
    """Population standard deviation of per-MTP throughput in [start, end)."""
    xs = [r.thr for r in flow_rows if start - 1e-9 <= r.time < end]
    if len(xs) < 2:
        raise ValueError("stability window holds fewer than 2 samples")
    return exact_pstdev(xs)


def infer_events(rows: Iterable[TraceRow], mtp: float = MTP) -> list[Event]:
    """Arrivals one period before a flow's first row, departures at its last row."""
    events = []
    for fid, fr in by_flow(rows).items():
        events.append(Event(round(fr[0].time - mtp, 9), "arrival", fid))
        events.append(Event(round(fr[-1].time, 9), "departure", fid))
    events.sort(key=lambda e: (e.time, e.kind != "departure", e.flow_id))
    return events


def analyze(rows: Sequence[TraceRow], capacity: float | None, shares: dict | None = None,
            mtp: float = MTP) -> ConvergenceReport:
    """Convergence, stability and Jain metrics for a complete multi-flow trace.

    The fair share after an event is ``capacity`` over the flows active then,
    unless per-flow ``shares`` are given.  Arrival events track the new flow;
    departure events track every remaining flow and report the slowest.
    """
    flows = by_flow(rows)
    events = infer_events(rows, mtp)
    spans = {fid: (round(fr[0].time - mtp, 9), round(fr[-1].time, 9)) for fid, fr in flows.items()}
    series = jain_over_time(rows, 2, shares)
    mean_jain = exact_mean([j for _, j in series]) if series else None
    times = sorted({e.time for e in events})
    reports = []
    for ev in events:
        later = [t for t in times if t > ev.time]
        seg_end = later[0] if later else math.inf
        active = [f for f, (s, e) in spans.items() if s <= ev.time < e]
        if ev.kind == "arrival":
            tracked = [ev.flow_id]
        else:
            tracked = active
        conv = None
        stab = None
        if tracked and (capacity or shares):
            results = []
            for fid in tracked:
                share = shares[fid] if shares else capacity / len(active)
                results.append(convergence_time(flows[fid], ev.time, share, seg_end))
            if all(r is not None for r in results):
                conv = max(results)
            if ev.kind == "arrival" and conv is not None:
                end = min(seg_end, spans[ev.flow_id][1] + 1e-9)
                try:
                    stab = stability_metric(flows[ev.flow_id], ev.time + conv, end)
                except ValueError:
                    stab = None
        reports.append(EventReport(ev.time, ev.kind, conv, stab, mean_jain))
    return ConvergenceReport(reports, series, mean_jain)


def utilization(rows: Iterable[TraceRow], capacity: float, start: float = 0.0,
                end: float = math.inf) -> tuple[float, float]:
    """Mean aggregate throughput over ``capacity`` and mean RTT in [start, end)."""
    slots: dict[int, float] = {}
    lats = []
    for r in rows:
        if start - 1e-9 <= r.time < end:
            slots[slot_of(r.time)] = slots.get(slot_of(r.time), 0.0) + r.thr
            if r.thr > 0:
                lats.append(r.lat)
    if not slots:
        raise ValueError("no samples in the utilization window")
    return float(np.mean(list(slots.values()))) / capacity, float(np.mean(lats)) if lats else math.nan


def max_min_shares(capacities: Sequence[float], routes: Sequence[Sequence[int]]) -> list[float]:
    """Max-min fair rates by progressive filling."""
    n = len(routes)
    shares = [0.0] * n
    frozen = [False] * n
    remaining = list(capacities)
    while not all(frozen):
        best = None
        for k, cap in enumerate(remaining):
            users = [i for i in range(n) if not frozen[i] and k in routes[i]]
            if users:
                share = cap / len(users)
                if best is None or share < best[0] - 1e-12:
                    best = (share, k, users)
        if best is None:
            break
        share, k, users = best
        for i in users:
            shares[i] = share
            frozen[i] = True
            for j in routes[i]:
                remaining[j] -= share
    return shares


# -- scenarios ------------------------------------------------------------------------

SCENARIOS = ("homogeneous3", "rtt_fairness5", "multi_bottleneck", "flow_count_sweep",
             "single_flow_util", "trace_replay")


@dataclass
class ScenarioSetup:
    spec: ScenarioSpec
    capacity: float | None
    shares: dict | None = None


def synthetic_trace(seed: int, horizon: float, step: float = 1.0,
                    lo: float = 5e6, hi: float = 50e6) -> tuple[tuple[float, float], ...]:
    rng = random.Random(seed)
    n = max(1, int(math.ceil(horizon / step)))
    return tuple((round(i * step, 9), rng.uniform(lo, hi)) for i in range(n))


def build_scenario(name: str, seed: int = 0, time_scale: float = 1.0,
                   params: dict | None = None) -> ScenarioSetup:
    """Topology and flow schedule of a named evaluation scenario."""
    p = params or {}
    ts = time_scale
    if name == "homogeneous3":
        cap, rtt = 100e6, 0.030
        link = LinkSpec(cap, rtt / 2, bdp_bytes(cap, rtt))
        arr = staggered(3, 40 * ts, 120 * ts)
        return ScenarioSetup(ScenarioSpec(TopologySpec((link,)), arr, (3, 3), seed), cap)
    if name == "rtt_fairness5":
        cap = 100e6
        link = LinkSpec(cap, 0.020, bdp_bytes(cap, 0.200))
        extra = [(r - 0.040) / 2 for r in np.linspace(0.040, 0.200, 5)]
        arr = Deterministic(tuple(FlowSpec(0.0, 60 * ts, float(e)) for e in extra))
        return ScenarioSetup(ScenarioSpec(TopologySpec((link,)), arr, (5, 5), seed), cap)
    if name == "multi_bottleneck":
        n1 = int(p.get("fs1", 4))
        n2 = int(p.get("fs2", 2))
        rtt = 0.030
        l1 = LinkSpec(100e6, rtt / 2, bdp_bytes(100e6, 2 * rtt))
        l2 = LinkSpec(20e6, rtt / 2, bdp_bytes(20e6, 2 * rtt))
        topo = TopologySpec((l1, l2), ((0,), (0, 1)))
        flows = [FlowSpec(0.0, 60 * ts, 0.0, 0)] * n1 + [FlowSpec(0.0, 60 * ts, 0.0, 1)] * n2
        ideal = max_min_shares([100e6, 20e6], [(0,)] * n1 + [(0, 1)] * n2)
        shares = {f"f{i}": s for i, s in enumerate(ideal)}
        return ScenarioSetup(ScenarioSpec(topo, Deterministic(tuple(flows)), (n1 + n2,) * 2, seed),
                             None, shares)
    if name == "flow_count_sweep":
        n = int(p.get("flows", 10))
        cap, rtt = 600e6, 0.020
        link = LinkSpec(cap, rtt / 2, bdp_bytes(cap, rtt))
        arr = Deterministic(tuple(FlowSpec(0.0, 30 * ts) for _ in range(n)))
        return ScenarioSetup(ScenarioSpec(TopologySpec((link,)), arr, (n, n), seed), cap)
    if name == "single_flow_util":
        cap, rtt = float(p.get("capacity", 40e6)), float(p.get("rtt", 0.020))
        link = LinkSpec(cap, rtt / 2, bdp_bytes(cap, rtt, float(p.get("buffer_bdp", 2.0))))
        arr = Deterministic((FlowSpec(0.0, 30 * ts),))
        return ScenarioSetup(ScenarioSpec(TopologySpec((link,)), arr, (1, 1), seed), cap)
    if name == "trace_replay":
        horizon = 60 * ts
        trace = p.get("trace") or synthetic_trace(seed, horizon)
        trace = tuple((float(t), float(c)) for t, c in trace)
        peak = max(c for _, c in trace)
        link = LinkSpec(peak, 0.020, bdp_bytes(peak, 0.040, 10), bandwidth_trace=trace)
        arr = Deterministic((FlowSpec(0.0, horizon),))
        return ScenarioSetup(ScenarioSpec(TopologySpec((link,)), arr, (1, 1), seed), None)
    raise ValueError(f"unknown scenario {name!r}; valid names: {', '.join(SCENARIOS)}")


class _Recorder:
    """Wraps a controller and logs a trace row, with the shared reward, per period."""

    def __init__(self, book: "_RewardBook", inner):
        self.book = book
        self.inner = inner
        self.flow_id = None

    def attach(self, info) -> None:
        self.flow_id = info.flow_id
        self.book.register(info)
        attach = getattr(self.inner, "attach", None)
        if attach is not None:
            attach(info)

    def on_mtp(self, stats) -> float:
        self.book.record(self.flow_id, stats)
        return self.inner.on_mtp(stats)


class _RewardBook:
    def __init__(self, link: LinkSpec, monitored_routes: set | None = None):
        self.link = link
        self.agents: dict = {}
        self.base_rtt: dict = {}
        self.done: set = set()
        self.rows: list[TraceRow] = []

    def register(self, info) -> None:
        self.agents[info.flow_id] = ag.FlowAgent(info.base_rtt)
        self.base_rtt[info.flow_id] = info.base_rtt

    def record(self, fid, stats) -> None:
        self.agents[fid].observe(stats)
        active = [f for f, a in self.agents.items() if a.latest is not None and f not in self.done]
        d0 = sum(self.base_rtt[f] for f in active) / len(active)
        rb = ag.global_reward([self.agents[f] for f in active], self.link.capacity, d0)
        if stats.last:
            self.done.add(fid)
        self.rows.append(TraceRow(stats.time, fid, stats.thr, stats.lat, stats.loss, stats.cwnd,
                                  rb.r_thr, rb.r_lat, rb.r_loss, rb.r_fair, rb.r_stab,
                                  rb.total_bounded))


@dataclass
class RunResult:
    seed: int
    rows: list[TraceRow]
    report: ConvergenceReport


@dataclass
class ScenarioResult:
    name: str
    runs: list[RunResult] = field(default_factory=list)

    def summary(self) -> dict:
        jains = [r.report.mean_jain for r in self.runs if r.report.mean_jain is not None]
        convs = [e.convergence for r in self.runs for e in r.report.events
                 if e.convergence is not None]
        stabs = [e.stability for r in self.runs for e in r.report.events
                 if e.stability is not None]
        mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
        return {"mean_jain": mean(jains), "mean_convergence_s": mean(convs),
                "mean_stability_bps": mean(stabs)}


def controller_factory(kind: str, setup: ScenarioSetup, policy: MlpParams | None = None):
    if kind == "policy":
        if policy is None:
            raise ValueError("policy controller needs a checkpoint")
        return lambda: ag.PolicyController(policy)
    if kind == "aimd":
        return ag.AimdController
    if kind == "oracle-fair":
        link = setup.spec.topology.links[setup.spec.monitor_link]
        return ag.OracleFairController.factory(link.capacity)
    raise ValueError(f"unknown controller {kind!r}")


def run_once(setup: ScenarioSetup, make_controller: Callable[[], object], seed: int) -> RunResult:
    spec = setup.spec
    sim = build_topology(spec.topology, seed)
    book = _RewardBook(spec.topology.links[spec.monitor_link])
    materialize(spec, sim, lambda: _Recorder(book, make_controller()))
    sim.run_until(spec.horizon + MTP)
    rows = sorted(book.rows, key=lambda r: (r.time, r.flow_id))
    return RunResult(seed, rows, analyze(rows, setup.capacity, setup.shares))


def run_scenario(name: str, policy: MlpParams | None = None, seed: int = 0, reps: int = 1,
                 controller: str = "policy", time_scale: float = 1.0,
                 params: dict | None = None) -> ScenarioResult:
    """Run ``reps`` repetitions of a named scenario with seeds ``seed, seed+1, ...``."""
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; valid names: {', '.join(SCENARIOS)}")
    result = ScenarioResult(name)
    for k in range(reps):
        setup = build_scenario(name, seed + k, time_scale, params)
        factory = controller_factory(controller, setup, policy)
        result.runs.append(run_once(setup, factory, seed + k))
    return result


# -- policy probe ---------------------------------------------------------------------

def probe_state(thr: float, lat: float, thr_max: float = 200e6, lat_min: float = 0.040,
                w: int = ag.HISTORY) -> np.ndarray:
    """History of ``w`` identical periods observing ``thr`` at RTT ``lat``.

    The window is the one that sustains ``thr`` at ``lat``; pacing matches it
    and there is no loss.
    """
    cwnd_pkts = thr * lat / PACKET_BITS
    stats = _ProbeStats(thr=thr, lat=lat, loss=0.0, pkt_flight=cwnd_pkts, p_rate=thr,
                        cwnd=cwnd_pkts, acks_received=1)
    one = ag.assemble_local_state(stats, thr_max, lat_min).as_vector()
    return np.tile(one, w)


@dataclass(frozen=True)
class _ProbeStats:
    thr: float
    lat: float
    loss: float
    pkt_flight: float
    p_rate: float
    cwnd: float
    acks_received: int


def probe_policy(policy: MlpParams, thr_range=(10e6, 200e6), lat_range=(0.040, 0.200),
                 n_thr: int = 50, n_lat: int = 50, thr_max: float = 200e6,
                 lat_min: float = 0.040) -> list[ProbePoint]:
    """Actor output over a throughput x delay grid with fixed running extrema."""
    if not all(map(math.isfinite, (*thr_range, *lat_range))):
        raise ValueError("sweep ranges must be finite")
    thrs = np.linspace(thr_range[0], thr_range[1], n_thr)
    lats = np.linspace(lat_range[0], lat_range[1], n_lat)
    states = np.array([probe_state(t, l, thr_max, lat_min) for t in thrs for l in lats])
    actions = actor_forward(policy, states)
    pts = []
    i = 0
    for t in thrs:
        for l in lats:
            pts.append(ProbePoint(float(t), float(l), float(actions[i])))
            i += 1
    return pts


# -- CSV ----------------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def export_csv(items, path) -> None:
    """Write trace rows, event reports or probe points with their fixed header."""
    items = list(items.events if isinstance(items, ConvergenceReport) else items)
    kind = type(items[0]) if items else None
    header = {TraceRow: TRACE_FIELDS, EventReport: REPORT_FIELDS, ProbePoint: PROBE_FIELDS}
    if kind is None:
        cols = TRACE_FIELDS
    elif kind in header:
        cols = header[kind]
    else:
        raise TypeError(f"cannot export {kind.__name__}")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for it in items:
                vals = it.values() if kind is not ProbePoint else (it.thr, it.lat, it.action)
                w.writerow([_fmt(v) for v in vals])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _opt_float(s: str) -> float | None:
    return None if s == "" else float(s)


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for c in TRACE_FIELDS[:6]:
            if c not in cols:
                raise SchemaError(f"{path}: missing column {c}")
        rows = []
        for rec in reader:
            rows.append(TraceRow(
                float(rec["time_s"]), rec["flow_id"], float(rec["thr_bps"]), float(rec["lat_s"]),
                float(rec["loss_bps"]), float(rec["cwnd_pkts"]),
                *(_opt_float(rec.get(c, "") or "") for c in TRACE_FIELDS[6:])))
    return rows


def read_report_csv(path) -> list[EventReport]:
    with open(path, newline="") as fh:
        return [EventReport(float(r["event_time_s"]), r["event_type"], _opt_float(r["convergence_s"]),
                            _opt_float(r["stability_bps"]), _opt_float(r["mean_jain"]))
                for r in csv.DictReader(fh)]
