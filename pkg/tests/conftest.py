import pytest

from fairflow.simnet import MtpStats

_CRITERIA: dict = {}


def make_stats(thr=0.0, lat=0.0, loss=0.0, cwnd=10.0, p_rate=0.0, pkt_flight=0, acks=1,
               time=0.03, flow_id="f0", mtp_index=1, last=False) -> MtpStats:
    return MtpStats(flow_id=flow_id, mtp_index=mtp_index, time=time, thr=thr, lat=lat, loss=loss,
                    pkt_flight=pkt_flight, p_rate=p_rate, cwnd=cwnd, acks_received=acks, last=last)


@pytest.fixture
def stats_factory():
    return make_stats


def two_state_td(steps: int = 1500, gamma: float = 0.9, tau: float = 0.05):
    """Fit both critics on a deterministic A -> B -> A cycle; return errors against Q*.

    Rewards are 0.1 leaving A and -0.05 leaving B, the single action is 0,
    so Q*(A) = (rA + gamma rB) / (1 - gamma^2) and symmetrically for B.
    """
    import numpy as np

    from fairflow.agent import N_GLOBAL
    from fairflow.neural import (OptimizerState, apply_update, critic_forward, init_params,
                                 soft_update)
    from fairflow.trainer import CRITIC_DIM, LOCAL_DIM, Batch, critic_loss

    ra, rb = 0.1, -0.05
    qa = (ra + gamma * rb) / (1 - gamma ** 2)
    qb = (rb + gamma * ra) / (1 - gamma ** 2)
    sa, sb = np.zeros(LOCAL_DIM), np.zeros(LOCAL_DIM)
    sa[0] = sb[1] = 1.0
    g = np.zeros((2, N_GLOBAL))
    batch = Batch(g, np.array([sa, sb]), np.zeros(2), g, np.array([sb, sa]),
                  np.array([ra, rb]), np.zeros(2))
    actor = init_params(LOCAL_DIM, 0, out="tanh").zeros_like()
    c1, c2 = init_params(CRITIC_DIM, 1), init_params(CRITIC_DIM, 2)
    t1, t2 = c1.copy(), c2.copy()
    o1, o2 = OptimizerState.for_params(c1), OptimizerState.for_params(c2)
    for _ in range(steps):
        _, (g1, g2), _ = critic_loss(batch, c1, c2, actor, t1, t2, gamma, None, 0.0)
        apply_update(c1, o1, g1)
        apply_update(c2, o2, g2)
        soft_update(t1, c1, tau)
        soft_update(t2, c2, tau)
    return [abs(critic_forward(c, g[0], s, 0.0) - q)
            for c in (c1, c2) for s, q in ((sa, qa), (sb, qb))]


def pytest_runtest_logreport(report):
    """Collect the outcome of each numbered acceptance test."""
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    mark = _CRITERIA.get(report.nodeid)
    if mark is not None:
        mark["outcome"] = "PASS" if report.passed else "FAIL"


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA[item.nodeid] = {"n": m.args[0], "title": m.args[1], "outcome": "NOT RUN"}


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(_CRITERIA.values(), key=lambda c: c["n"]):
        terminalreporter.write_line(f"criterion {c['n']:>2} {c['outcome']:<7} {c['title']}")


def pytest_deselected(items):
    for item in items:
        _CRITERIA.pop(item.nodeid, None)
