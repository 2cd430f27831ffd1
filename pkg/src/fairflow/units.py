"""Shared constants and small numeric helpers."""

PACKET_SIZE = 1500          # bytes
PACKET_BITS = PACKET_SIZE * 8
MTP = 0.030                 # seconds
INITIAL_CWND = 10.0         # packets
MIN_CWND = 2                # packets
MAX_CWND = 1e6              # packets
EPS = 1e-9


def safe_div(num: float, den: float) -> float:
    """``num / den``, or 0 when the denominator is not meaningfully positive."""
    if den <= EPS:
        return 0.0
    return num / den


def pacing_rate(cwnd: float, srtt: float, pkt_size: int = PACKET_SIZE) -> float:
    """Pacing rate in bps for a window of ``cwnd`` packets spread over ``srtt``."""
    if srtt <= 0:
        raise ValueError("srtt must be positive")
    return cwnd * pkt_size * 8 / srtt


def bdp_bytes(capacity: float, rtt: float, factor: float = 1.0) -> int:
    """Buffer of ``factor`` bandwidth-delay products, in bytes."""
    return int(round(capacity * rtt / 8 * factor))
