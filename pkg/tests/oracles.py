"""Constructed per-packet logs and brute-force metric recomputation.

Throughput here is counted in whole packets per period, so every quantity
reduces to integer arithmetic, independent of the rational code in evalkit.
"""
import random
from fractions import Fraction
from math import isqrt

from fairflow.evalkit import TraceRow
from fairflow.units import MTP, PACKET_BITS

PKT_RATE = PACKET_BITS / MTP        # bps carried by one packet per period (400 kbps)


def slot_time(k: int) -> float:
    return round(k * MTP, 9)


def constructed_log(seed: int, share_pkts: int = 30):
    """Per-packet delivery log for 2-4 staggered flows on one link.

    Each flow ramps towards the equal share of the active flows with seeded
    noise; a few flows oscillate and never settle.  Returns
    ``(packets, spans, capacity)`` with ``packets`` a list of
    ``(flow_id, delivery_time)`` and ``spans[fid] = (first_slot, last_slot)``.
    """
    rng = random.Random(seed)
    n = rng.randint(2, 4)
    capacity = share_pkts * PKT_RATE
    spans = {}
    for i in range(n):
        first = 1 + i * rng.randint(40, 80)
        spans[f"f{i}"] = (first, first + rng.randint(150, 300))
    packets = []
    level = {f: 0.0 for f in spans}
    wobble = {f: rng.random() < 0.2 for f in spans}
    last = max(e for _, e in spans.values())
    for k in range(1, last + 1):
        active = [f for f, (a, b) in spans.items() if a <= k <= b]
        for f in active:
            target = share_pkts / len(active)
            level[f] += (target - level[f]) * rng.uniform(0.05, 0.4)
            count = level[f] + rng.uniform(-1.5, 1.5)
            if wobble[f]:
                count *= 1.5 if k % 14 < 7 else 0.5
            for _ in range(max(0, int(round(count)))):
                t = (k - 1) * MTP + rng.uniform(0.0, MTP * 0.999)
                packets.append((f, t))
    return packets, spans, capacity


def slot_counts(packets, spans):
    """{fid: [(slot, packets delivered in that slot)]} over each flow's span."""
    counts = {f: {k: 0 for k in range(a, b + 1)} for f, (a, b) in spans.items()}
    for f, t in packets:
        k = int(t // MTP) + 1
        counts[f][k] += 1
    return {f: sorted(c.items()) for f, c in counts.items()}


def rows_from_log(packets, spans) -> list:
    rows = []
    for f, series in slot_counts(packets, spans).items():
        for k, c in series:
            rows.append(TraceRow(slot_time(k), f, c * PKT_RATE, 0.04, 0.0, 10.0))
    return sorted(rows, key=lambda r: (r.time, r.flow_id))


def brute_jain_series(packets, spans, min_active=2):
    out = []
    counts = slot_counts(packets, spans)
    slots = sorted({k for s in counts.values() for k, _ in s})
    table = {f: dict(s) for f, s in counts.items()}
    for k in slots:
        xs = [table[f][k] for f in table if table[f].get(k, 0) > 0]
        if len(xs) >= min_active:
            s = sum(xs)
            q = sum(x * x for x in xs)
            out.append((k * MTP, float(Fraction(s * s, len(xs) * q))))
    return out


def brute_convergence(series, event_time, share, end_time, band_tenths=1, smooth=5, hold=10):
    """``series`` = [(slot, packets)]; band given in tenths of the share."""
    share = Fraction(share)
    run = 0
    for i, (k, _) in enumerate(series):
        t = slot_time(k)
        if t < event_time - 1e-9:
            continue
        if t >= end_time:
            break
        window = [c for _, c in series[max(0, i - smooth + 1):i + 1]]
        mean_bps = Fraction(sum(window)) * Fraction(PKT_RATE) / len(window)
        if share * (10 - band_tenths) <= 10 * mean_bps <= share * (10 + band_tenths):
            run += 1
            if run >= hold:
                return round(max(0.0, slot_time(series[i - hold + 1][0]) - event_time), 9)
        else:
            run = 0
    return None


def brute_pstdev(counts) -> float:
    """Population std in bps of packet counts, via an integer square root."""
    n = len(counts)
    a = n * sum(c * c for c in counts) - sum(counts) ** 2
    shift = 256
    root = isqrt(a << (2 * shift))
    return float(Fraction(root) * Fraction(PKT_RATE) / (n << shift))


def compare_metrics(seed: int):
    """Check evalkit against brute force on one constructed log.

    Returns ``(mismatches, stability_checks)``; an empty mismatch list means
    every metric matched exactly.
    """
    import math

    from fairflow import evalkit as ek

    packets, spans, cap = constructed_log(seed)
    rows = rows_from_log(packets, spans)
    bad = []
    if ek.jain_over_time(rows) != brute_jain_series(packets, spans):
        bad.append("jain")
    counts = slot_counts(packets, spans)
    per_flow = ek.by_flow(rows)
    checked = 0
    bounds = sorted({slot_time(x - 1) for x, _ in spans.values()} |
                    {slot_time(y) for _, y in spans.values()})
    for fid, (a, _) in spans.items():
        ev_time = slot_time(a - 1)
        share = cap / sum(1 for x, y in spans.values() if x <= a <= y)
        seg_end = next((t for t in bounds if t > ev_time), math.inf)
        got = ek.convergence_time(per_flow[fid], ev_time, share, seg_end)
        if got != brute_convergence(counts[fid], ev_time, share, seg_end):
            bad.append(("convergence", fid))
        start = ev_time + (got or 0.0)
        window = [c for k, c in counts[fid] if start - 1e-9 <= slot_time(k) < seg_end]
        if len(window) >= 2:
            if ek.stability_metric(per_flow[fid], start, seg_end) != brute_pstdev(window):
                bad.append(("stability", fid))
            checked += 1
    return bad, checked


def closed_form_tandem(n1, n2, c1=100e6, c2=20e6):
    """Long flows are capped by the smaller of their Link-2 share and the common share."""
    long_share = min(c2 / n2, c1 / (n1 + n2))
    short_share = (c1 - n2 * long_share) / n1
    return [short_share] * n1 + [long_share] * n2
