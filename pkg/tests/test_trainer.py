import numpy as np
import pytest

from fairflow import agent as ag
from fairflow.flowgen import Deterministic, FlowSpec, ScenarioSpec, staggered
from fairflow.neural import MlpParams, critic_forward, forward, init_params, load_checkpoint
from fairflow.simnet import LinkSpec, TopologySpec
from fairflow.trainer import (CRITIC_DIM, LOCAL_DIM, Batch, Experience, Nets, ReplayBuffer,
                              TrainerConfig, TrainingEnv, actor_gradient, collect_rollout,
                              critic_loss, run_training, train_step)
from fairflow.units import bdp_bytes

from conftest import two_state_td

SMALL = dict(hidden=(16, 8), batch=16, update_steps=4, update_interval=1.0, env_instances=1)
LINK = LinkSpec(40e6, 0.010, bdp_bytes(40e6, 0.020, 2))
TOPO = TopologySpec((LINK,))


def one_flow(seconds=3.0):
    return lambda ep, k: ScenarioSpec(TOPO, Deterministic((FlowSpec(0, seconds),)), (1, 1))


def random_batch(n, rng, done=None):
    return Batch(rng.normal(size=(n, ag.N_GLOBAL)), rng.normal(size=(n, LOCAL_DIM)),
                 rng.uniform(-1, 1, n), rng.normal(size=(n, ag.N_GLOBAL)),
                 rng.normal(size=(n, LOCAL_DIM)), rng.uniform(-0.1, 0.1, n),
                 np.zeros(n) if done is None else np.asarray(done, float))


def small_nets(seed=0):
    return Nets.create(TrainerConfig(seed=seed, hidden=(6, 5)))


def test_config_defaults_and_validation():
    c = TrainerConfig()
    assert (c.lr_actor, c.lr_critic, c.gamma, c.batch, c.w) == (0.001, 0.001, 0.98, 192, 5)
    assert (c.update_interval, c.update_steps, c.alpha, c.mtp) == (5.0, 20, 0.025, 0.030)
    assert c.coeffs == (0.1, 0.02, 1.0, 0.02, 0.01) and c.env_instances == 4
    for bad in (dict(gamma=1.0), dict(gamma=0.0), dict(batch=0), dict(lr_actor=-1),
                dict(noise_correlation=1.0), dict(tau=0)):
        with pytest.raises(ValueError):
            TrainerConfig(**bad).validate()


# -- critic loss ---------------------------------------------------------------

def test_critic_loss_matches_hand_evaluated_targets():
    rng = np.random.default_rng(0)
    nets = small_nets()
    b = random_batch(3, rng, done=[0, 1, 0])
    gamma = 0.98
    loss, _, info = critic_loss(b, nets.critic1, nets.critic2, nets.actor_t, nets.critic1_t,
                                nets.critic2_t, gamma)
    expected = 0.0
    targets = []
    for i in range(3):
        a2 = float(np.tanh(forward(nets.actor_t, b.s2[i:i + 1])[0][0]))
        a2 = float(np.clip(np.asarray(forward(nets.actor_t, b.s2[i:i + 1])[0])[0], -1, 1))
        q1 = critic_forward(nets.critic1_t, b.g2[i], b.s2[i], a2)
        q2 = critic_forward(nets.critic2_t, b.g2[i], b.s2[i], a2)
        targets.append(b.r[i] + gamma * (1 - b.done[i]) * min(q1, q2))
    for critic in (nets.critic1, nets.critic2):
        errs = [critic_forward(critic, b.g[i], b.s[i], b.a[i]) - targets[i] for i in range(3)]
        expected += sum(e * e for e in errs) / 3
    assert np.allclose(info["target"], targets, rtol=0, atol=1e-12)
    assert loss == pytest.approx(expected, abs=1e-12)


def test_exact_fit_gives_zero_loss():
    def const(v):
        return MlpParams([np.zeros((CRITIC_DIM, 1))], [np.array([v])])
    rng = np.random.default_rng(1)
    b = random_batch(4, rng)
    b.r[:] = 0.05
    nets = small_nets()
    loss, grads, _ = critic_loss(b, const(0.05), const(0.05), nets.actor_t, const(9.0),
                                 const(9.0), gamma=1e-300)
    assert loss == pytest.approx(0.0, abs=1e-20)
    assert all(np.all(np.abs(t) < 1e-15) for g in grads for t in g.tensors())


def test_done_cuts_bootstrap():
    rng = np.random.default_rng(2)
    nets = small_nets()
    b = random_batch(5, rng, done=[1, 1, 1, 1, 1])
    _, _, info = critic_loss(b, nets.critic1, nets.critic2, nets.actor_t, nets.critic1_t,
                             nets.critic2_t, 0.98, np.random.default_rng(0))
    assert np.array_equal(info["target"], b.r)


def test_reward_scale_multiplies_target():
    rng = np.random.default_rng(3)
    nets = small_nets()
    b = random_batch(4, rng, done=[1, 1, 1, 1])
    _, _, info = critic_loss(b, nets.critic1, nets.critic2, nets.actor_t, nets.critic1_t,
                             nets.critic2_t, 0.98, reward_scale=10.0)
    assert np.allclose(info["target"], 10 * b.r, rtol=0, atol=1e-15)


def test_td_two_state_mdp_converges():
    assert max(two_state_td()) < 1e-2


# -- actor gradient ------------------------------------------------------------

def test_actor_gradient_zero_when_critic_ignores_action():
    nets = small_nets()
    nets.critic1.weights[0][-1, :] = 0.0
    grad, _ = actor_gradient(random_batch(8, np.random.default_rng(0)), nets.actor, nets.critic1)
    assert all(np.all(t == 0) for t in grad.tensors())


def test_actor_gradient_linear_critic_closed_form():
    wq = np.zeros((CRITIC_DIM, 1))
    wq[-1, 0] = 2.0
    critic = MlpParams([wq], [np.zeros(1)])           # Q = 2a
    rng = np.random.default_rng(4)
    actor = MlpParams([rng.normal(0, 0.01, (LOCAL_DIM, 1))], [np.zeros(1)], out="linear")
    b = random_batch(1, rng)
    grad, obj = actor_gradient(b, actor, critic)
    assert np.allclose(grad.weights[0][:, 0], 2 * b.s[0], rtol=0, atol=1e-12)
    assert grad.biases[0][0] == pytest.approx(2.0, abs=1e-12)
    assert obj == pytest.approx(2 * float(b.s[0] @ actor.weights[0][:, 0]), abs=1e-12)


@pytest.mark.parametrize("pre_limit", [None, 0.05])
def test_actor_gradient_matches_finite_differences(pre_limit):
    rng = np.random.default_rng(5)
    actor = init_params(LOCAL_DIM, 1, widths=(5, 4), out="tanh")
    critic = init_params(CRITIC_DIM, 2, widths=(6, 5))
    for w in actor.weights:
        w *= 3.0                                      # push some outputs past the soft bound
    b = random_batch(4, rng)
    grad, _ = actor_gradient(b, actor, critic, pre_limit)

    def objective():
        return actor_gradient(b, actor, critic, pre_limit)[1]

    h = 1e-6
    worst = 0.0
    for t, g in zip(actor.tensors(), grad.tensors()):
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + h
            up = objective()
            t[idx] = old - h
            down = objective()
            t[idx] = old
            num = (up - down) / (2 * h)
            if max(abs(num), abs(g[idx])) > 1e-7:
                worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx])))
    assert worst < 1e-4


# -- train_step ------------------------------------------------------------------

def filled_buffer(n=64, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(1000)
    b = random_batch(n, rng)
    for i in range(n):
        buf.add(Experience(b.g[i], b.s[i], b.a[i], b.g2[i], b.s2[i], b.r[i], False))
    return buf


def test_insufficient_buffer_skips():
    cfg = TrainerConfig(batch=16, hidden=(6, 5))
    assert train_step(filled_buffer(8), Nets.create(cfg), cfg, 0, np.random.default_rng(0)) is None


def test_policy_delay_schedule():
    cfg = TrainerConfig(batch=16, hidden=(6, 5), policy_delay=2)
    nets = Nets.create(cfg)
    buf = filled_buffer()
    rng = np.random.default_rng(0)
    flags = []
    for step in range(6):
        before = nets.actor.copy()
        m = train_step(buf, nets, cfg, step, rng)
        changed = not all(np.array_equal(x, y) for x, y in zip(before.tensors(), nets.actor.tensors()))
        flags.append((m["actor_updated"], changed))
    assert flags == [(True, True), (False, False)] * 3


def test_tau_one_copies_online_into_targets():
    cfg = TrainerConfig(batch=16, hidden=(6, 5), tau=1.0)
    nets = Nets.create(cfg)
    train_step(filled_buffer(), nets, cfg, 0, np.random.default_rng(0))
    for online, target in ((nets.actor, nets.actor_t), (nets.critic1, nets.critic1_t),
                           (nets.critic2, nets.critic2_t)):
        assert all(np.array_equal(x, y) for x, y in zip(online.tensors(), target.tensors()))


def test_train_step_deterministic():
    def run():
        cfg = TrainerConfig(batch=16, hidden=(6, 5))
        nets = Nets.create(cfg)
        buf, rng = filled_buffer(), np.random.default_rng(3)
        return [train_step(buf, nets, cfg, s, rng) for s in range(5)]
    assert run() == run()


# -- replay buffer ---------------------------------------------------------------------

def test_replay_buffer_fifo_and_bounds():
    buf = ReplayBuffer(3)
    z = np.zeros
    for i in range(5):
        buf.add(Experience(z(ag.N_GLOBAL), z(LOCAL_DIM), 0.0, z(ag.N_GLOBAL), z(LOCAL_DIM),
                           i / 100, False))
    assert len(buf) == 3
    assert sorted(buf.r[:3]) == [0.02, 0.03, 0.04]
    s1 = buf.sample(10, np.random.default_rng(1))
    s2 = buf.sample(10, np.random.default_rng(1))
    assert np.array_equal(s1.r, s2.r) and set(s1.r) <= {0.02, 0.03, 0.04}
    with pytest.raises(ValueError):
        buf.add(Experience(z(ag.N_GLOBAL), z(LOCAL_DIM), 0.0, z(ag.N_GLOBAL), z(LOCAL_DIM),
                           0.2, False))


# -- rollouts -------------------------------------------------------------------------

def rollout(scenario, noise=0.0, seed=0, seconds=10.0):
    cfg = TrainerConfig(exploration_noise=noise, hidden=(16, 8))
    env = TrainingEnv(scenario, cfg, 7, np.random.default_rng(seed))
    return env, collect_rollout(env, Nets.create(cfg).actor, seconds)


def test_two_flows_ten_seconds_experience_count():
    scen = ScenarioSpec(TOPO, staggered(2, 0.0, 10.0), (2, 2))
    _, exps = rollout(scen)
    # 333 MTPs per flow; the first boundary has no earlier action to close
    assert 2 * 331 <= len(exps) <= 2 * 333
    assert all(-0.1 <= e.r <= 0.1 for e in exps)
    assert sum(e.done for e in exps) == 2


def test_rollout_deterministic_without_noise():
    scen = ScenarioSpec(TOPO, staggered(2, 1.0, 4.0), (2, 2))
    a = rollout(scen, 0.0, seed=1)[1]
    b = rollout(scen, 0.0, seed=2)[1]
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.a == y.a and x.r == y.r and np.array_equal(x.s2, y.s2) and np.array_equal(x.g2, y.g2)


def test_single_flow_has_no_fairness_term():
    env, exps = rollout(ScenarioSpec(TOPO, Deterministic((FlowSpec(0, 3.0),)), (1, 1)), 0.1)
    assert exps and all(rb.r_fair == 0.0 for rb in env.coord.rewards)


def test_correlated_noise_keeps_marginal_scale():
    cfg = TrainerConfig(exploration_noise=0.2, noise_correlation=0.9, hidden=(16, 8))
    scen = ScenarioSpec(TOPO, Deterministic((FlowSpec(0, 60.0),)), (1, 1))
    env = TrainingEnv(scen, cfg, 7, np.random.default_rng(0))
    actor = Nets.create(cfg).actor.zeros_like()
    exps = collect_rollout(env, actor, 60.0)
    a = np.array([e.a for e in exps])
    assert 0.15 < a.std() < 0.25
    assert np.corrcoef(a[:-1], a[1:])[0, 1] > 0.8


# -- training loop ----------------------------------------------------------------------

def test_zero_episodes_returns_initial_nets(tmp_path):
    cfg = TrainerConfig(episodes=0, seed=3, **SMALL)
    res = run_training(cfg, one_flow(), out_dir=tmp_path)
    fresh = Nets.create(cfg)
    assert res.step == 0 and res.metrics == [] and res.episodes == []
    ck = load_checkpoint(tmp_path / "checkpoint.bin")
    assert all(np.array_equal(x, y) for x, y in zip(ck.nets["actor"].tensors(), fresh.actor.tensors()))


def test_episode_logs_consistent(tmp_path):
    cfg = TrainerConfig(episodes=2, seed=1, **SMALL)
    scen = lambda ep, k: ScenarioSpec(TOPO, staggered(2, 0.5, 2.0), (2, 2))
    res = run_training(cfg, scen)
    assert [e.episode for e in res.episodes] == [0, 1]
    for e in res.episodes:
        assert set(e.flow_returns) == {"f0", "f1"}
        assert e.final_jain is None or 0 < e.final_jain <= 1
        assert all(abs(v) <= 0.1 * e.n_experiences for v in e.flow_returns.values())


def test_resume_continues_identically(tmp_path):
    cfg = TrainerConfig(episodes=3, seed=5, **SMALL)
    full = run_training(cfg, one_flow(), out_dir=tmp_path / "full")
    run_training(cfg, one_flow(), out_dir=tmp_path / "part", stop_after_episodes=1)
    rest = run_training(cfg, one_flow(), out_dir=tmp_path / "part2", resume=tmp_path / "part")
    head = run_training(TrainerConfig(episodes=1, seed=5, **SMALL), one_flow()).metrics
    assert head + rest.metrics == full.metrics
    assert ((tmp_path / "full" / "checkpoint.bin").read_bytes()
            == (tmp_path / "part2" / "checkpoint.bin").read_bytes())


def test_training_metrics_csv(tmp_path):
    cfg = TrainerConfig(episodes=1, seed=0, **SMALL)
    run_training(cfg, one_flow(), out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,critic_loss,actor_objective,buffer_size,episode_reward"
    assert len(lines) > 1


@pytest.mark.slow
def test_single_flow_reward_improves():
    """Seeded run: late episodes earn more than early ones on the fixed single flow."""
    cfg = TrainerConfig(episodes=20, seed=0, env_instances=1)
    res = run_training(cfg, one_flow(30.0))
    returns = [sum(e.flow_returns.values()) for e in res.episodes]
    k = len(returns) // 5
    assert np.mean(returns[-k:]) > np.mean(returns[:k]), returns
