"""Multi-agent actor-critic training with a centralized critic.

All flows of all environment instances act with one shared actor and feed
one replay buffer.  The critics see the aggregated global state in addition
to the flow's own local history; the actor only ever sees the latter.
Twin critics, target networks, target-policy smoothing and delayed actor
updates keep the value estimates in check.
"""
from __future__ import annotations

import csv
import json
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import agent as ag
from .flowgen import EnvSampler, ScenarioSpec, materialize, sample_training_episode, scenario_to_dict
from .neural import (Checkpoint, MlpParams, OptimizerState, actor_forward, apply_update, backward,
                     critic_input, forward, init_params, load_checkpoint, save_checkpoint,
                     soft_update)
from .simnet import build_topology
from .units import MTP

LOCAL_DIM = ag.N_LOCAL * ag.HISTORY
CRITIC_DIM = ag.N_GLOBAL + LOCAL_DIM + 1


@dataclass(frozen=True)
class TrainerConfig:
    lr_actor: float = 0.001
    lr_critic: float = 0.001
    gamma: float = 0.98
    batch: int = 192
    w: int = ag.HISTORY
    update_interval: float = 5.0
    update_steps: int = 20
    alpha: float = ag.ALPHA
    mtp: float = MTP
    coeffs: tuple = ag.COEFFS
    beta: float = ag.BETA
    episodes: int = 10
    env_instances: int = 4
    seed: int = 0
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    exploration_noise: float = 0.1
    noise_correlation: float = 0.0  # AR(1) coefficient of the exploration noise, in [0, 1)
    tau: float = 0.005
    pre_limit: float = 2.5          # soft bound on the actor's pre-tanh output
    reward_scale: float = 1.0       # multiplies rewards in the critic target
    buffer_capacity: int = 100_000
    hidden: tuple = (256, 128, 64)
    checkpoint_every: int = 0

    def validate(self) -> None:
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("coeffs", "hidden", "seed", "episodes", "checkpoint_every",
                          "noise_correlation"):
                continue
            if f.name in ("exploration_noise", "target_noise", "noise_clip", "beta"):
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif not v > 0:
                raise ValueError(f"{f.name} must be positive")
        if not 0 <= self.noise_correlation < 1:
            raise ValueError("noise_correlation must lie in [0, 1)")
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")
        if self.w != ag.HISTORY or abs(self.mtp - MTP) > 1e-12:
            raise ValueError("w and mtp are fixed by the network input layout")


@dataclass(frozen=True)
class Experience:
    g: np.ndarray
    s: np.ndarray
    a: float
    g2: np.ndarray
    s2: np.ndarray
    r: float
    done: bool


@dataclass
class Batch:
    g: np.ndarray
    s: np.ndarray
    a: np.ndarray
    g2: np.ndarray
    s2: np.ndarray
    r: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.r)


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling."""

    def __init__(self, capacity: int = 100_000, g_dim: int = ag.N_GLOBAL, s_dim: int = LOCAL_DIM):
        self.capacity = capacity
        self.g = np.zeros((capacity, g_dim))
        self.s = np.zeros((capacity, s_dim))
        self.a = np.zeros(capacity)
        self.g2 = np.zeros((capacity, g_dim))
        self.s2 = np.zeros((capacity, s_dim))
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.size = 0
        self.head = 0
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def add(self, e: Experience) -> None:
        if not -0.1 <= e.r <= 0.1:
            raise ValueError(f"reward {e.r} outside [-0.1, 0.1]")
        with self.lock:
            i = self.head
            self.g[i], self.s[i], self.a[i] = e.g, e.s, e.a
            self.g2[i], self.s2[i], self.r[i], self.done[i] = e.g2, e.s2, e.r, float(e.done)
            self.head = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def extend(self, exps: Iterable[Experience]) -> None:
        for e in exps:
            self.add(e)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, self.size, size=n)
        return Batch(self.g[idx], self.s[idx], self.a[idx], self.g2[idx], self.s2[idx],
                     self.r[idx], self.done[idx])

    def state_arrays(self) -> dict:
        n = self.size
        return {"g": self.g[:n], "s": self.s[:n], "a": self.a[:n], "g2": self.g2[:n],
                "s2": self.s2[:n], "r": self.r[:n], "done": self.done[:n],
                "meta": np.array([self.capacity, self.size, self.head])}

    @classmethod
    def from_arrays(cls, arrs) -> "ReplayBuffer":
        capacity, size, head = (int(x) for x in arrs["meta"])
        buf = cls(capacity)
        for k in ("g", "s", "a", "g2", "s2", "r", "done"):
            getattr(buf, k)[:size] = arrs[k]
        buf.size, buf.head = size, head
        return buf


# -- networks ------------------------------------------------------------------

@dataclass
class Nets:
    actor: MlpParams
    critic1: MlpParams
    critic2: MlpParams
    actor_t: MlpParams
    critic1_t: MlpParams
    critic2_t: MlpParams
    opt_actor: OptimizerState
    opt_critic1: OptimizerState
    opt_critic2: OptimizerState

    @classmethod
    def create(cls, config: TrainerConfig) -> "Nets":
        ss = np.random.SeedSequence(config.seed).spawn(3)
        actor = init_params(LOCAL_DIM, ss[0], config.hidden, out="tanh")
        c1 = init_params(CRITIC_DIM, ss[1], config.hidden)
        c2 = init_params(CRITIC_DIM, ss[2], config.hidden)
        return cls(actor, c1, c2, actor.copy(), c1.copy(), c2.copy(),
                   OptimizerState.for_params(actor, config.lr_actor),
                   OptimizerState.for_params(c1, config.lr_critic),
                   OptimizerState.for_params(c2, config.lr_critic))

    _NAMES = ("actor", "critic1", "critic2", "actor_t", "critic1_t", "critic2_t")

    def to_checkpoint(self, meta: dict) -> Checkpoint:
        nets = {n: getattr(self, n) for n in self._NAMES}
        opts = {"actor": self.opt_actor, "critic1": self.opt_critic1, "critic2": self.opt_critic2}
        return Checkpoint(nets, meta, opts)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Nets":
        n = ckpt.nets
        o = ckpt.optimizers
        return cls(n["actor"], n["critic1"], n["critic2"], n["actor_t"], n["critic1_t"],
                   n["critic2_t"], o["actor"], o["critic1"], o["critic2"])


def critic_loss(batch: Batch, critic1: MlpParams, critic2: MlpParams, actor_t: MlpParams,
                critic1_t: MlpParams, critic2_t: MlpParams, gamma: float,
                rng: np.random.Generator | None = None, target_noise: float = 0.2,
                noise_clip: float = 0.5, reward_scale: float = 1.0):
    """Clipped double-Q temporal-difference loss for both critics.

    Returns ``(loss, (grad1, grad2), info)`` where loss is the sum of the two
    critics' mean squared errors.
    """
    a2 = actor_forward(actor_t, batch.s2)
    if target_noise > 0 and rng is not None:
        a2 = a2 + np.clip(rng.normal(0.0, target_noise, size=a2.shape), -noise_clip, noise_clip)
    a2 = np.clip(a2, -ag.ACTION_LIMIT, ag.ACTION_LIMIT)
    x2 = critic_input(batch.g2, batch.s2, a2)
    q1t, _ = forward(critic1_t, x2)
    q2t, _ = forward(critic2_t, x2)
    y = reward_scale * batch.r + gamma * (1.0 - batch.done) * np.minimum(q1t, q2t)
    x = critic_input(batch.g, batch.s, batch.a)
    n = len(batch)
    loss = 0.0
    grads = []
    qs = []
    for critic in (critic1, critic2):
        q, cache = forward(critic, x)
        err = q - y
        loss += float(np.mean(err ** 2))
        grads.append(backward(critic, cache, 2.0 * err / n)[0])
        qs.append(q)
    return loss, tuple(grads), {"target": y, "q1": qs[0], "q2": qs[1]}


def actor_gradient(batch: Batch, actor: MlpParams, critic1: MlpParams, pre_limit: float | None = None,
                   pre_weight: float = 1.0):
    """Deterministic policy gradient of mean Q1(g, s, actor(s)) (ascent direction).

    With ``pre_limit`` the objective also subtracts
    ``pre_weight * mean(max(0, |z| - pre_limit)^2)`` for the actor's
    pre-tanh output ``z``, which keeps the output off the flat ends of tanh.
    Returns ``(gradient, objective)``.
    """
    n = len(batch)
    a, acache = forward(actor, batch.s)
    q, ccache = forward(critic1, critic_input(batch.g, batch.s, a))
    _, dx = backward(critic1, ccache, np.full(n, 1.0 / n))
    dq_da = dx[:, -1]
    objective = float(np.mean(q))
    if pre_limit is None or actor.out != "tanh":
        grad, _ = backward(actor, acache, dq_da)
        return grad, objective
    z = acache[1][-1][:, 0]
    over = np.maximum(np.abs(z) - pre_limit, 0.0)
    objective -= pre_weight * float(np.mean(over ** 2))
    dz = dq_da * (1.0 - a ** 2) - pre_weight * 2.0 * over * np.sign(z) / n
    linear = MlpParams(actor.weights, actor.biases, actor.hidden, "linear")
    grad, _ = backward(linear, acache, dz)
    grad.out = actor.out
    return grad, objective


def _negate(g: MlpParams) -> MlpParams:
    return MlpParams([-w for w in g.weights], [-b for b in g.biases], g.hidden, g.out)


def train_step(buffer: ReplayBuffer, nets: Nets, config: TrainerConfig, step_index: int,
               rng: np.random.Generator) -> dict | None:
    """One learner update; None when the buffer cannot fill a batch yet."""
    if len(buffer) < config.batch:
        return None
    batch = buffer.sample(config.batch, rng)
    loss, (g1, g2), _ = critic_loss(batch, nets.critic1, nets.critic2, nets.actor_t,
                                    nets.critic1_t, nets.critic2_t, config.gamma, rng,
                                    config.target_noise, config.noise_clip, config.reward_scale)
    apply_update(nets.critic1, nets.opt_critic1, g1)
    apply_update(nets.critic2, nets.opt_critic2, g2)
    objective = None
    if step_index % config.policy_delay == 0:
        grad, objective = actor_gradient(batch, nets.actor, nets.critic1, config.pre_limit)
        apply_update(nets.actor, nets.opt_actor, _negate(grad))
        soft_update(nets.actor_t, nets.actor, config.tau)
        soft_update(nets.critic1_t, nets.critic1, config.tau)
        soft_update(nets.critic2_t, nets.critic2, config.tau)
    return {"step": step_index, "critic_loss": loss, "actor_objective": objective,
            "actor_updated": objective is not None}


# -- rollouts ----------------------------------------------------------------------

class _FlowHandle:
    def __init__(self, coord: "Coordinator"):
        self.coord = coord
        self.flow_id = None

    def attach(self, info) -> None:
        self.flow_id = info.flow_id
        self.coord.register(info)

    def on_mtp(self, stats) -> float:
        return self.coord.step(self.flow_id, stats)


class Coordinator:
    """Observer/enforcer for one environment: assembles states, reward and transitions."""

    def __init__(self, link, config: TrainerConfig, noise_rng: np.random.Generator | None,
                 policy: MlpParams | None = None):
        self.link = link
        self.config = config
        self.noise_rng = noise_rng
        self.policy = policy
        self.agents: dict = {}
        self.base_rtt: dict = {}
        self.done: set = set()
        self.pending: dict = {}
        self.sink: list[Experience] = []
        self.rewards: list[ag.RewardBreakdown] = []
        self.flow_return: dict = {}
        self.noise: dict = {}
        self.record_rewards = False

    def make_controller(self) -> _FlowHandle:
        return _FlowHandle(self)

    def register(self, info) -> None:
        self.agents[info.flow_id] = ag.FlowAgent(info.base_rtt, self.config.w)
        self.base_rtt[info.flow_id] = info.base_rtt
        self.flow_return[info.flow_id] = 0.0
        self.noise[info.flow_id] = None

    def active(self) -> list:
        return [fid for fid, a in self.agents.items() if a.latest is not None and fid not in self.done]

    def step(self, fid, stats) -> float:
        agent = self.agents[fid]
        agent.observe(stats)
        s2 = agent.history.flatten()
        active = self.active()
        agents = [self.agents[f] for f in active]
        g2 = ag.assemble_global_state([a.latest for a in agents], self.link).as_vector()
        d0 = sum(self.base_rtt[f] for f in active) / len(active)
        rb = ag.global_reward(agents, self.link.capacity, d0, self.config.coeffs, self.config.beta)
        if self.record_rewards:
            self.rewards.append(rb)
        prev = self.pending.pop(fid, None)
        if prev is not None:
            g, s, a = prev
            self.sink.append(Experience(g, s, a, g2, s2, rb.total_bounded, stats.last))
            self.flow_return[fid] += rb.total_bounded
        if stats.last:
            self.done.add(fid)
            return stats.cwnd
        a = actor_forward(self.policy, s2)
        if self.noise_rng is not None and self.config.exploration_noise > 0:
            # stationary AR(1): the marginal std stays exploration_noise for any correlation
            rho = self.config.noise_correlation
            eps = self.noise_rng.normal(0.0, self.config.exploration_noise)
            prev_n = self.noise[fid]
            n = eps if prev_n is None else rho * prev_n + np.sqrt(1.0 - rho * rho) * eps
            self.noise[fid] = n
            a += n
        a = min(ag.ACTION_LIMIT, max(-ag.ACTION_LIMIT, a))
        self.pending[fid] = (g2, s2, a)
        return ag.map_action(stats.cwnd, a, self.config.alpha)


class TrainingEnv:
    """One simulator instance running a scenario under a coordinator."""

    def __init__(self, scenario: ScenarioSpec, config: TrainerConfig, sim_seed: int,
                 noise_rng: np.random.Generator | None):
        self.scenario = scenario
        self.sim = build_topology(scenario.topology, sim_seed)
        self.coord = Coordinator(scenario.topology.links[scenario.monitor_link], config, noise_rng)
        self.coord.record_rewards = True
        self.flow_ids = materialize(scenario, self.sim, self.coord.make_controller)
        self.horizon = scenario.horizon + MTP
        self.jain_last = None

    @property
    def done(self) -> bool:
        return self.sim.now >= self.horizon

    def run(self, duration: float, policy: MlpParams) -> list[Experience]:
        self.coord.policy = policy
        self.coord.sink = []
        out = self.sim.run_until(min(self.sim.now + duration, self.horizon))
        if out:
            by_slot = {}
            for fid, st in out:
                by_slot[fid] = st.thr
            thr = [v for v in by_slot.values() if v > 0]
            if len(thr) >= 1:
                self.jain_last = ag.jain_index(thr)
        return self.coord.sink


def collect_rollout(env: TrainingEnv, policy: MlpParams, duration: float) -> list[Experience]:
    return env.run(duration, policy)


# -- training loop -------------------------------------------------------------------

@dataclass
class EpisodeLog:
    episode: int
    env: int
    scenario: dict
    flow_returns: dict
    mean_reward: dict
    final_jain: float | None
    n_experiences: int


@dataclass
class TrainingResult:
    nets: Nets
    episodes: list[EpisodeLog] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    step: int = 0


METRIC_FIELDS = ("step", "critic_loss", "actor_objective", "buffer_size", "episode_reward")


def _mean_breakdown(rbs: list[ag.RewardBreakdown]) -> dict:
    if not rbs:
        return {}
    arr = np.array([r.as_tuple() for r in rbs])
    names = [f.name for f in fields(ag.RewardBreakdown)]
    return dict(zip(names, (float(x) for x in arr.mean(axis=0))))


def default_scenarios(sampler: EnvSampler, seed: int) -> Callable[[int, int], ScenarioSpec]:
    return lambda ep, k: sample_training_episode(sampler, (seed, ep, k))


def config_to_dict(config: TrainerConfig) -> dict:
    d = asdict(config)
    d["coeffs"] = list(config.coeffs)
    d["hidden"] = list(config.hidden)
    return d


def run_training(config: TrainerConfig, scenarios: Callable[[int, int], ScenarioSpec] | None = None,
                 out_dir=None, resume=None, on_metric: Callable[[dict], None] | None = None,
                 stop_after_episodes: int | None = None) -> TrainingResult:
    """Collect-then-learn loop over ``config.episodes`` episodes.

    Every round, each environment advances ``update_interval`` simulated
    seconds, then ``update_steps`` learner steps run and a fresh actor
    snapshot is published.  ``scenarios(episode, env_index)`` supplies the
    scenario of each environment (defaults to the training sampler).
    ``resume`` is a directory holding ``checkpoint.bin``/``resume.npz``.
    """
    config.validate()
    scenarios = scenarios or default_scenarios(EnvSampler(), config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        nets, buffer, rng, start_ep, step = _load_resume(Path(resume))
    else:
        nets = Nets.create(config)
        buffer = ReplayBuffer(config.buffer_capacity)
        rng = np.random.default_rng([config.seed, 1])
        start_ep, step = 0, 0
    result = TrainingResult(nets, step=step)
    last_ep = config.episodes if stop_after_episodes is None else min(config.episodes,
                                                                      stop_after_episodes)
    for ep in range(start_ep, last_ep):
        envs = []
        for k in range(config.env_instances):
            scen = scenarios(ep, k)
            noise = np.random.default_rng([config.seed, 2, ep, k])
            envs.append(TrainingEnv(scen, config, hash_seed(config.seed, ep, k), noise))
        snapshot = nets.actor.copy()
        ep_rewards: list[float] = []
        while not all(e.done for e in envs):
            for env in envs:
                if env.done:
                    continue
                exps = collect_rollout(env, snapshot, config.update_interval)
                buffer.extend(exps)
                ep_rewards.extend(e.r for e in exps)
            ep_reward = float(np.mean(ep_rewards)) if ep_rewards else 0.0
            for _ in range(config.update_steps):
                m = train_step(buffer, nets, config, step, rng)
                if m is None:
                    break
                row = {"step": step, "critic_loss": m["critic_loss"],
                       "actor_objective": m["actor_objective"], "buffer_size": len(buffer),
                       "episode_reward": ep_reward}
                result.metrics.append(row)
                if on_metric:
                    on_metric(row)
                step += 1
            snapshot = nets.actor.copy()
        for k, env in enumerate(envs):
            rbs = env.coord.rewards
            result.episodes.append(EpisodeLog(
                ep, k, scenario_to_dict(env.scenario), dict(env.coord.flow_return),
                _mean_breakdown(rbs), env.jain_last, sum(1 for _ in rbs)))
        result.step = step
        if out is not None and config.checkpoint_every and (ep + 1) % config.checkpoint_every == 0:
            _save_resume(out, nets, buffer, rng, ep + 1, step, config)
    result.step = step
    if out is not None:
        _save_resume(out, nets, buffer, rng, last_ep, step, config)
        write_metrics(out / "metrics.csv", result.metrics)
        with open(out / "episodes.json", "w") as fh:
            json.dump([asdict(e) for e in result.episodes], fh, indent=1, sort_keys=True)
    return result


def hash_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _save_resume(out: Path, nets: Nets, buffer: ReplayBuffer, rng, episode: int, step: int,
                 config: TrainerConfig) -> None:
    meta = {"episode": episode, "step": step, "config": config_to_dict(config),
            "w": config.w, "coeffs": list(config.coeffs), "alpha": config.alpha,
            "rng_state": rng.bit_generator.state}
    save_checkpoint(out / "checkpoint.bin", nets.to_checkpoint(meta))
    np.savez(out / "resume.npz", **buffer.state_arrays())


def _load_resume(path: Path):
    ckpt = load_checkpoint(path / "checkpoint.bin")
    nets = Nets.from_checkpoint(ckpt)
    with np.load(path / "resume.npz") as arrs:
        buffer = ReplayBuffer.from_arrays(arrs)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.meta["rng_state"]
    return nets, buffer, rng, ckpt.meta["episode"], ckpt.meta["step"]


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow(["" if r[k] is None else repr(r[k]) for k in METRIC_FIELDS])
