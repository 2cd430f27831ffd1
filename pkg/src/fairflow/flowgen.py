"""Flow populations and arrival schedules for training and evaluation."""
from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from .simnet import ConfigError, LinkSpec, Simulator, TopologySpec
from .units import PACKET_SIZE, bdp_bytes

MAX_FLOWS = 64


@dataclass(frozen=True)
class FlowSpec:
    start: float
    duration: float
    extra_delay: float = 0.0
    route: int = 0          # index into TopologySpec.routes


@dataclass(frozen=True)
class Deterministic:
    flows: tuple[FlowSpec, ...]


@dataclass(frozen=True)
class Poisson:
    rate: float                             # flows per second
    duration_range: tuple[float, float]     # uniform, seconds
    horizon: float                          # arrivals drawn in [0, horizon)
    extra_delay: float = 0.0
    route: int = 0


@dataclass(frozen=True)
class ScenarioSpec:
    topology: TopologySpec
    arrival: Deterministic | Poisson
    flow_count_range: tuple[int, int] = (1, MAX_FLOWS)
    seed: int = 0
    monitor_link: int = 0

    def validate(self) -> None:
        self.topology.validate()
        lo, hi = self.flow_count_range
        if not 1 <= lo <= hi <= MAX_FLOWS:
            raise ConfigError(f"flow_count_range must lie within [1, {MAX_FLOWS}]")
        if isinstance(self.arrival, Poisson):
            if not self.arrival.rate > 0:
                raise ConfigError("arrival.rate must be > 0")
            a, b = self.arrival.duration_range
            if not 0 <= a <= b:
                raise ConfigError("arrival.duration_range must satisfy 0 <= min <= max")
        else:
            for i, f in enumerate(self.arrival.flows):
                if f.start < 0:
                    raise ConfigError(f"arrival.flows[{i}].start must be non-negative")

    @property
    def horizon(self) -> float:
        return max((f.start + f.duration for f in expand_arrivals(self)), default=0.0)


@dataclass(frozen=True)
class EnvSampler:
    bandwidth_range: tuple[float, float] = (40e6, 160e6)
    rtt_range: tuple[float, float] = (0.010, 0.140)
    buffer_factor_range: tuple[float, float] = (0.1, 16.0)
    flow_count_range: tuple[int, int] = (2, 5)
    horizon: float = 30.0
    heterogeneous_rtt: bool = True
    seed: int = 0


def expand_arrivals(spec: ScenarioSpec) -> list[FlowSpec]:
    """Concrete flow list; Poisson arrivals are drawn from ``spec.seed``.

    Inter-arrival gaps use the inverse CDF of the exponential distribution,
    ``-ln(1 - u) / rate``.  The count is clipped to ``flow_count_range``:
    arrivals beyond the maximum are dropped and, if fewer than the minimum
    fall inside the horizon, the sequence continues past it.
    """
    arr = spec.arrival
    if isinstance(arr, Deterministic):
        return list(arr.flows)
    rng = random.Random(spec.seed)
    lo, hi = spec.flow_count_range
    flows: list[FlowSpec] = []
    t = 0.0
    while len(flows) < hi:
        t += -math.log(1.0 - rng.random()) / arr.rate
        if t >= arr.horizon and len(flows) >= lo:
            break
        dur = rng.uniform(*arr.duration_range)
        flows.append(FlowSpec(t, dur, arr.extra_delay, arr.route))
    return flows


def sample_training_episode(sampler: EnvSampler, seed=None) -> ScenarioSpec:
    """Draw one training scenario: link, buffer, flow count and per-flow RTTs.

    The first flow starts at 0; the others start uniformly in the first half
    of the horizon.  All flows run until the horizon.
    """
    rng = random.Random(sampler.seed if seed is None else repr(seed))
    bw = rng.uniform(*sampler.bandwidth_range)
    rtt = rng.uniform(*sampler.rtt_range)
    factor = rng.uniform(*sampler.buffer_factor_range)
    n = rng.randint(*sampler.flow_count_range)
    link = LinkSpec(bw, rtt / 2, max(PACKET_SIZE, bdp_bytes(bw, rtt, factor)))
    flows = []
    for i in range(n):
        start = 0.0 if i == 0 else round(rng.uniform(0, sampler.horizon / 2), 3)
        extra = 0.0
        if sampler.heterogeneous_rtt and i > 0:
            target = rng.uniform(rtt, sampler.rtt_range[1])
            extra = (target - rtt) / 2
        flows.append(FlowSpec(start, sampler.horizon - start, extra))
    return ScenarioSpec(TopologySpec((link,)), Deterministic(tuple(flows)), (n, n),
                        seed=rng.randrange(2**31))


def materialize(spec: ScenarioSpec, sim: Simulator, controllers: Callable[[], object],
                id_prefix: str = "f") -> list:
    """Register every flow of ``spec`` on ``sim``; returns the flow ids."""
    spec.validate()
    if sim.spec != spec.topology:
        raise ConfigError("simulator topology differs from scenario topology")
    flows = expand_arrivals(spec)
    ids = []
    for i, f in enumerate(flows):
        if not 0 <= f.route < len(spec.topology.routes):
            raise ConfigError(f"flow {i} uses route {f.route}, topology defines "
                              f"{len(spec.topology.routes)}")
        fid = f"{id_prefix}{i}"
        sim.add_flow(fid, spec.topology.routes[f.route], f.start, f.duration, f.extra_delay,
                     controllers())
        ids.append(fid)
    return ids


def staggered(n: int, interval: float, duration: float, extra_delays: Sequence[float] | None = None,
              routes: Sequence[int] | None = None) -> Deterministic:
    extra_delays = extra_delays or [0.0] * n
    routes = routes or [0] * n
    return Deterministic(tuple(FlowSpec(i * interval, duration, extra_delays[i], routes[i])
                               for i in range(n)))


def overlap_ok(flows: Sequence[FlowSpec]) -> bool:
    """Every consecutive pair (by start) overlaps for at least half the later flow."""
    order = sorted(flows, key=lambda f: f.start)
    for a, b in zip(order, order[1:]):
        overlap = min(a.start + a.duration, b.start + b.duration) - b.start
        if overlap < b.duration / 2:
            return False
    return True


# -- (de)serialization --------------------------------------------------------

def link_to_dict(link: LinkSpec) -> dict:
    d = asdict(link)
    if d["bandwidth_trace"] is not None:
        d["bandwidth_trace"] = [list(p) for p in d["bandwidth_trace"]]
    return d


def link_from_dict(d: dict) -> LinkSpec:
    _reject_unknown(d, {"capacity", "base_owd", "buffer_bytes", "random_loss_rate",
                        "bandwidth_trace"}, "link")
    trace = d.get("bandwidth_trace")
    return LinkSpec(float(d["capacity"]), float(d["base_owd"]), int(d["buffer_bytes"]),
                    float(d.get("random_loss_rate", 0.0)),
                    tuple((float(t), float(c)) for t, c in trace) if trace else None)


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    if isinstance(spec.arrival, Poisson):
        arrival = {"poisson": asdict(spec.arrival)}
        arrival["poisson"]["duration_range"] = list(spec.arrival.duration_range)
    else:
        arrival = {"flows": [asdict(f) for f in spec.arrival.flows]}
    return {
        "links": [link_to_dict(l) for l in spec.topology.links],
        "routes": [list(r) for r in spec.topology.routes],
        "arrival": arrival,
        "flow_count_range": list(spec.flow_count_range),
        "seed": spec.seed,
        "monitor_link": spec.monitor_link,
    }


def scenario_from_dict(d: dict) -> ScenarioSpec:
    _reject_unknown(d, {"links", "routes", "arrival", "flow_count_range", "seed", "monitor_link"},
                    "scenario")
    topo = TopologySpec(tuple(link_from_dict(l) for l in d["links"]),
                        tuple(tuple(r) for r in d.get("routes", [[0]])))
    arr = d["arrival"]
    _reject_unknown(arr, {"flows", "poisson"}, "scenario.arrival")
    if "poisson" in arr:
        p = dict(arr["poisson"])
        _reject_unknown(p, {"rate", "duration_range", "horizon", "extra_delay", "route"},
                        "scenario.arrival.poisson")
        p["duration_range"] = tuple(p["duration_range"])
        arrival = Poisson(**p)
    else:
        flows = []
        for i, f in enumerate(arr["flows"]):
            _reject_unknown(f, {"start", "duration", "extra_delay", "route"},
                            f"scenario.arrival.flows[{i}]")
            flows.append(FlowSpec(**f))
        arrival = Deterministic(tuple(flows))
    spec = ScenarioSpec(topo, arrival, tuple(d.get("flow_count_range", (1, MAX_FLOWS))),
                        int(d.get("seed", 0)), int(d.get("monitor_link", 0)))
    spec.validate()
    return spec


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown key {where}.{extra[0]}")
