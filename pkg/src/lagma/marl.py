"""Cooperative value-factorization learner.

Per-agent recurrent Q-networks share one parameter set and read the local
observation joined with a previous-action one-hot and an agent-id one-hot.
A monotonic mixer built from state-conditioned hypernetworks combines the
chosen-action values into a joint value. Training samples whole episodes
from a FIFO replay buffer, attaches quantized latent codes and intrinsic
bonuses, and regresses the mixed value onto a bootstrapped target computed
by frozen copies of both networks.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import intrinsic as intr
from . import vq as vqlat
from .autodiff import ShapeError, Tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# agent network

@dataclass(frozen=True)
class AgentSpec:
    obs_dim: int
    n_actions: int
    n_agents: int
    hidden: int = 64

    def __post_init__(self):
        if min(self.obs_dim, self.n_actions, self.n_agents, self.hidden) < 1:
            raise ValueError("agent dimensions must be at least 1")

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.n_actions + self.n_agents


def init_agent_params(spec: AgentSpec, params: ad.ParamSet,
                      rng: np.random.Generator) -> None:
    """Add the shared recurrent Q-network parameters under the agent prefix."""
    i, h, a = spec.input_dim, spec.hidden, spec.n_actions
    params.add("agent.w_in", ad.uniform_fan_in(rng, i, (i, h)))
    params.add("agent.b_in", np.zeros(h))
    params.add("agent.w_gx", ad.uniform_fan_in(rng, h, (h, 3 * h)))
    params.add("agent.b_gx", np.zeros(3 * h))
    params.add("agent.w_gh", ad.uniform_fan_in(rng, h, (h, 3 * h)))
    params.add("agent.w_out", ad.uniform_fan_in(rng, h, (h, a)))
    params.add("agent.b_out", np.zeros(a))


def agent_q(spec: AgentSpec, params: ad.ParamSet, inputs, hidden: Tensor,
            tape=None) -> tuple[Tensor, Tensor]:
    """One recurrent step: assembled inputs [N, I] and hidden [N, H] in,
    action values [N, A] and the next hidden state out."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"agent_q: expected [N, {spec.input_dim}], got {x.shape}")
    if hidden.data.shape != (x.shape[0], spec.hidden):
        raise ShapeError(f"agent_q: hidden {hidden.data.shape} does not match "
                         f"({x.shape[0]}, {spec.hidden})")
    h1 = ad.relu(tape, ad.add(tape, ad.matmul(tape, Tensor(x), params["agent.w_in"]),
                              params["agent.b_in"]))
    gx = ad.add(tape, ad.matmul(tape, h1, params["agent.w_gx"]), params["agent.b_gx"])
    gh = ad.matmul(tape, hidden, params["agent.w_gh"])
    h2 = ad.gru_cell(tape, gx, gh, hidden)
    q = ad.add(tape, ad.matmul(tape, h2, params["agent.w_out"]), params["agent.b_out"])
    return q, h2


def init_hidden(spec: AgentSpec, n_rows: int) -> Tensor:
    return Tensor(np.zeros((n_rows, spec.hidden)))


def unroll_agent_q(spec: AgentSpec, params: ad.ParamSet, inputs, tape=None) -> Tensor:
    """Run the recurrent network over [T, N, I] inputs from a zero hidden
    state; returns action values as one [T*N, A] tensor in t-major order.

    The input embedding and the input-side gate preactivations for all
    timesteps go through single large matmuls; only the hidden-side matmul
    and the cell itself run per step.
    """
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != spec.input_dim:
        raise ShapeError(f"unroll_agent_q: expected [T, N, {spec.input_dim}], "
                         f"got {arr.shape}")
    t_steps, n_rows = arr.shape[0], arr.shape[1]
    flat = Tensor(arr.reshape(t_steps * n_rows, spec.input_dim))
    h1 = ad.relu(tape, ad.add(tape, ad.matmul(tape, flat, params["agent.w_in"]),
                              params["agent.b_in"]))
    gx_all = ad.add(tape, ad.matmul(tape, h1, params["agent.w_gx"]),
                    params["agent.b_gx"])
    h = init_hidden(spec, n_rows)
    hs = []
    for gx in ad.split_rows(tape, gx_all, t_steps):
        gh = ad.matmul(tape, h, params["agent.w_gh"])
        h = ad.gru_cell(tape, gx, gh, h)
        hs.append(h)
    h_all = ad.concat_rows(tape, hs)
    return ad.add(tape, ad.matmul(tape, h_all, params["agent.w_out"]),
                  params["agent.b_out"])


def agent_inputs(spec: AgentSpec, obs, prev_actions=None) -> np.ndarray:
    """[n_agents, obs_dim] observations to [n_agents, I] network inputs.

    prev_actions is None at episode start (zero one-hot); entries below zero
    also mean no previous action.
    """
    obs = np.asarray(obs, dtype=np.float64)
    n = spec.n_agents
    if obs.shape != (n, spec.obs_dim):
        raise ShapeError(f"agent_inputs: expected ({n}, {spec.obs_dim}), "
                         f"got {obs.shape}")
    out = np.zeros((n, spec.input_dim))
    out[:, : spec.obs_dim] = obs
    if prev_actions is not None:
        prev = np.asarray(prev_actions, dtype=np.int64)
        for i in range(n):
            if prev[i] >= 0:
                out[i, spec.obs_dim + prev[i]] = 1.0
    out[:, spec.obs_dim + spec.n_actions :] = np.eye(n)
    return out


def batch_agent_inputs(spec: AgentSpec, obs, actions) -> np.ndarray:
    """[B, Ts, n, obs_dim] observations plus [B, Tt, n] actions to t-major
    [Ts, B*n, I] unroll inputs; slot t>0 carries the action taken at t-1."""
    obs = np.asarray(obs, dtype=np.float64)
    acts = np.asarray(actions, dtype=np.int64)
    b, ts, n, od = obs.shape
    if od != spec.obs_dim or n != spec.n_agents:
        raise ShapeError(f"batch_agent_inputs: got obs {obs.shape} for spec "
                         f"({spec.n_agents} agents, obs_dim {spec.obs_dim})")
    out = np.zeros((ts, b, n, spec.input_dim))
    out[..., :od] = obs.transpose(1, 0, 2, 3)
    for t in range(1, min(ts, acts.shape[1] + 1)):
        prev = acts[:, t - 1, :]
        bb, nn = np.nonzero(prev >= 0)
        out[t, bb, nn, od + prev[bb, nn]] = 1.0
    out[..., od + spec.n_actions :] = np.eye(n)
    return out.reshape(ts, b * n, spec.input_dim)


# ---------------------------------------------------------------------------
# monotonic mixer

@dataclass(frozen=True)
class MixerSpec:
    state_dim: int
    n_agents: int
    mixing_width: int = 32
    hyper_hidden: int = 64

    def __post_init__(self):
        if min(self.state_dim, self.n_agents, self.mixing_width,
               self.hyper_hidden) < 1:
            raise ValueError("mixer dimensions must be at least 1")


def init_mixer_params(spec: MixerSpec, params: ad.ParamSet,
                      rng: np.random.Generator) -> None:
    """Add the hypernetwork parameters under the mix prefix.

    Two-layer hypernetworks produce both mixing weight matrices and the
    final scalar bias; the inner bias comes from a single linear map.
    """
    s, hh, w, n = spec.state_dim, spec.hyper_hidden, spec.mixing_width, spec.n_agents
    for prefix, d_out in (("mix.hw1", n * w), ("mix.hw2", w), ("mix.hv", 1)):
        params.add(f"{prefix}.w1", ad.uniform_fan_in(rng, s, (s, hh)))
        params.add(f"{prefix}.b1", np.zeros(hh))
        params.add(f"{prefix}.w2", ad.uniform_fan_in(rng, hh, (hh, d_out)))
        params.add(f"{prefix}.b2", np.zeros(d_out))
    params.add("mix.hb1.w", ad.uniform_fan_in(rng, s, (s, w)))
    params.add("mix.hb1.b", np.zeros(w))


def _hyper2(params: ad.ParamSet, prefix: str, s: Tensor, tape) -> Tensor:
    h = ad.relu(tape, ad.add(tape, ad.matmul(tape, s, params[f"{prefix}.w1"]),
                             params[f"{prefix}.b1"]))
    return ad.add(tape, ad.matmul(tape, h, params[f"{prefix}.w2"]),
                  params[f"{prefix}.b2"])


def mix(spec: MixerSpec, params: ad.ParamSet, qs, states, tape=None) -> Tensor:
    """Monotone two-layer mix of per-agent values under state-conditioned
    weights; qs [M, n_agents] (Tensor or array), states [M, state_dim].
    Returns joint values as an [M] tensor."""
    q_rows = qs if isinstance(qs, Tensor) else Tensor(np.asarray(qs, dtype=np.float64))
    s = np.asarray(states, dtype=np.float64)
    m = q_rows.data.shape[0]
    if q_rows.data.shape != (m, spec.n_agents):
        raise ShapeError(f"mix: expected qs [M, {spec.n_agents}], "
                         f"got {q_rows.data.shape}")
    if s.shape != (m, spec.state_dim):
        raise ShapeError(f"mix: expected states [{m}, {spec.state_dim}], "
                         f"got {s.shape}")
    st = Tensor(s)
    w = spec.mixing_width
    w1 = ad.abs_(tape, _hyper2(params, "mix.hw1", st, tape))
    b1 = ad.add(tape, ad.matmul(tape, st, params["mix.hb1.w"]), params["mix.hb1.b"])
    w2 = ad.abs_(tape, _hyper2(params, "mix.hw2", st, tape))
    v = _hyper2(params, "mix.hv", st, tape)

    q3 = ad.reshape(tape, q_rows, (m, 1, spec.n_agents))
    w1_3 = ad.reshape(tape, w1, (m, spec.n_agents, w))
    hidden = ad.elu(tape, ad.add(
        tape, ad.reshape(tape, ad.bmm(tape, q3, w1_3), (m, w)), b1))
    h3 = ad.reshape(tape, hidden, (m, 1, w))
    w2_3 = ad.reshape(tape, w2, (m, w, 1))
    out = ad.add(tape, ad.reshape(tape, ad.bmm(tape, h3, w2_3), (m, 1)), v)
    return ad.reshape(tape, out, (m,))


def set_sum_mode(spec: MixerSpec, params: ad.ParamSet) -> None:
    """Degenerate the mixer to a plain sum: unit mixing weights, zero biases.

    Requires mixing width 1 so the single pass-through unit carries the sum;
    the structural ELU is the identity on the non-negative sums this mode is
    used with.
    """
    if spec.mixing_width != 1:
        raise ValueError("sum mode needs mixing_width 1")
    for name in params.names():
        if name.startswith("mix."):
            params[name].data[...] = 0.0
    params["mix.hw1.b2"].data[...] = 1.0
    params["mix.hw2.b2"].data[...] = 1.0


def sum_mixer(state_dim: int, n_agents: int) -> tuple[MixerSpec, ad.ParamSet]:
    """A standalone sum-mode mixer (for hand-checkable targets)."""
    spec = MixerSpec(state_dim, n_agents, mixing_width=1, hyper_hidden=1)
    params = ad.ParamSet()
    init_mixer_params(spec, params, np.random.default_rng(0))
    set_sum_mode(spec, params)
    return spec, params


# ---------------------------------------------------------------------------
# action selection

def epsilon(step: int, anneal_steps: int, start: float = 1.0,
            end: float = 0.05) -> float:
    """Linear decay from start at step 0 to end at anneal_steps, flat after."""
    if anneal_steps < 1:
        raise ValueError("anneal_steps must be at least 1")
    if step >= anneal_steps:
        return end
    return start - (start - end) * (max(step, 0) / anneal_steps)


def select_actions(spec: AgentSpec, params: ad.ParamSet, obs, prev_actions,
                   avail, hidden: Tensor, eps: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, Tensor]:
    """One joint ε-greedy action; returns (actions [n_agents], hidden').

    Per agent independently: with probability eps a uniform draw over the
    available actions, otherwise the argmax of the Q row with unavailable
    entries masked to -inf (lowest index on ties).
    """
    avail = np.asarray(avail, dtype=bool)
    if avail.shape != (spec.n_agents, spec.n_actions):
        raise ShapeError(f"select_actions: expected avail "
                         f"({spec.n_agents}, {spec.n_actions}), got {avail.shape}")
    inputs = agent_inputs(spec, obs, prev_actions)
    q, h2 = agent_q(spec, params, inputs, hidden, None)
    actions = np.zeros(spec.n_agents, dtype=np.int64)
    for i in range(spec.n_agents):
        options = np.flatnonzero(avail[i])
        if options.size == 0:
            raise ValueError(f"agent {i} has no available action")
        if rng.random() < eps:
            actions[i] = options[rng.integers(options.size)]
        else:
            masked = np.where(avail[i], q.data[i], -np.inf)
            actions[i] = int(np.argmax(masked))
    return actions, h2


# ---------------------------------------------------------------------------
# episodes, replay, batches

@dataclass(eq=False)
class Episode:
    """One complete rollout.

    state/obs/avail carry T+1 slots (every visited state including the
    final one); actions/reward/terminated carry the T transitions. A
    recording cut short may carry only T state slots, in which case the
    final transition can only enter the loss if it terminated.
    """

    state: np.ndarray
    obs: np.ndarray
    avail: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.terminated = np.asarray(self.terminated, dtype=np.float64)
        t = len(self.reward)
        if t < 1:
            raise ValueError("an episode needs at least one transition")
        n_states = self.state.shape[0]
        if n_states not in (t, t + 1):
            raise ValueError(f"{n_states} state slots do not fit {t} transitions")
        if self.obs.shape[0] != n_states or self.avail.shape[0] != n_states:
            raise ValueError("state, obs, and avail slot counts differ")
        if self.actions.shape[0] != t or self.terminated.shape[0] != t:
            raise ValueError("actions and terminated must match reward length")

    @property
    def length(self) -> int:
        return len(self.reward)


class ReplayBuffer:
    """FIFO store of complete episodes with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._episodes: deque[Episode] = deque(maxlen=capacity)
        self.total_added = 0

    def add(self, episode: Episode) -> None:
        self._episodes.append(episode)
        self.total_added += 1

    def __len__(self) -> int:
        return len(self._episodes)

    def sample(self, rng: np.random.Generator, batch_size: int) -> list[Episode]:
        if len(self._episodes) < batch_size:
            raise ValueError(f"replay holds {len(self._episodes)} episodes, "
                             f"need {batch_size}")
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return [self._episodes[int(i)] for i in idx]

    def episodes(self) -> list[Episode]:
        return list(self._episodes)

    def load(self, episodes, total_added: int) -> None:
        self._episodes = deque(episodes, maxlen=self.capacity)
        self.total_added = total_added


@dataclass(eq=False)
class Batch:
    """Zero-padded stack of episodes plus attached training annotations.

    filled marks valid transitions, state_filled valid state slots; both are
    prefixes per row. codes and r_int start empty and are attached by
    train_step (codes stay None for the plain baseline).
    """

    state: np.ndarray
    obs: np.ndarray
    avail: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    filled: np.ndarray
    state_filled: np.ndarray
    lengths: np.ndarray
    r_int: np.ndarray = field(default=None)
    codes: np.ndarray | None = None

    def __post_init__(self):
        if self.r_int is None:
            self.r_int = np.zeros_like(self.reward)

    @property
    def n_episodes(self) -> int:
        return self.state.shape[0]


def build_batch(episodes: list[Episode]) -> Batch:
    if not episodes:
        raise ValueError("cannot batch zero episodes")
    b = len(episodes)
    lengths = np.array([e.length for e in episodes], dtype=np.int64)
    tt = int(lengths.max())
    ts = max(e.state.shape[0] for e in episodes)
    n, od = episodes[0].obs.shape[1:]
    a = episodes[0].avail.shape[2]
    s = episodes[0].state.shape[1]

    state = np.zeros((b, ts, s))
    obs = np.zeros((b, ts, n, od))
    avail = np.zeros((b, ts, n, a), dtype=bool)
    actions = np.zeros((b, tt, n), dtype=np.int64)
    reward = np.zeros((b, tt))
    terminated = np.zeros((b, tt))
    filled = np.zeros((b, tt))
    state_filled = np.zeros((b, ts), dtype=bool)
    for i, e in enumerate(episodes):
        ns, t = e.state.shape[0], e.length
        state[i, :ns] = e.state
        obs[i, :ns] = e.obs
        avail[i, :ns] = e.avail
        actions[i, :t] = e.actions
        reward[i, :t] = e.reward
        terminated[i, :t] = e.terminated
        filled[i, :t] = 1.0
        state_filled[i, :ns] = True
    return Batch(state, obs, avail, actions, reward, terminated, filled,
                 state_filled, lengths)


def discounted_returns(reward: np.ndarray, filled: np.ndarray,
                       gamma: float) -> np.ndarray:
    """Per-state-slot discounted return-to-go, [B, Tt] rewards to [B, Tt+1]
    values with zero at and beyond each episode's final slot."""
    b, tt = reward.shape
    out = np.zeros((b, tt + 1))
    for t in range(tt - 1, -1, -1):
        out[:, t] = filled[:, t] * (reward[:, t] + gamma * out[:, t + 1])
    return out


# ---------------------------------------------------------------------------
# TD loss

def _masked_target_max(q_data: np.ndarray, avail_t: np.ndarray,
                       argmax_from: np.ndarray | None = None) -> np.ndarray:
    """Per-agent greedy target values [Ts, B, n] with unavailable actions
    excluded; rows with nothing available (padding) give zero. When
    argmax_from is given its greedy actions are evaluated under q_data."""
    has_any = avail_t.any(axis=-1)
    if argmax_from is None:
        vals = np.where(avail_t, q_data, -np.inf).max(axis=-1)
    else:
        picks = np.where(avail_t, argmax_from, -np.inf).argmax(axis=-1)
        vals = np.take_along_axis(q_data, picks[..., None], axis=-1)[..., 0]
    return np.where(has_any, vals, 0.0)


def bootstrap_values(agent_spec: AgentSpec, mixer_spec: MixerSpec,
                     online: ad.ParamSet, target: ad.ParamSet, batch: Batch,
                     double_q: bool = False) -> np.ndarray:
    """Mixed greedy target value for every state slot, as [Ts, B].

    Padded slots give whatever the networks produce on zero inputs; callers
    mask them. With double_q the greedy action comes from the online network
    and is evaluated by the target network.
    """
    b, ts = batch.state.shape[:2]
    n = agent_spec.n_agents
    inputs = batch_agent_inputs(agent_spec, batch.obs, batch.actions)
    q_tgt = unroll_agent_q(agent_spec, target, inputs, None).data.reshape(
        ts, b, n, agent_spec.n_actions)
    avail_t = np.asarray(batch.avail, dtype=bool).transpose(1, 0, 2, 3)
    if double_q:
        q_on = unroll_agent_q(agent_spec, online, inputs, None).data.reshape(
            ts, b, n, agent_spec.n_actions)
        t_max = _masked_target_max(q_tgt, avail_t, argmax_from=q_on)
    else:
        t_max = _masked_target_max(q_tgt, avail_t)
    states_flat = batch.state.transpose(1, 0, 2).reshape(ts * b, -1)
    mixed = mix(mixer_spec, target, t_max.reshape(ts * b, n), states_flat, None)
    return mixed.data.reshape(ts, b)


def td_loss(agent_spec: AgentSpec, mixer_spec: MixerSpec, online: ad.ParamSet,
            target: ad.ParamSet, batch: Batch, gamma: float, tape=None,
            double_q: bool = False,
            boot: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Masked mean squared TD error over a batch.

    Per valid transition t the target is
    reward + intrinsic + gamma * (1 - terminated) * mixed greedy target value
    at t+1, held constant; the prediction is the online mix of the
    chosen-action values at t. A final transition without a recorded next
    state stays in the loss only if it terminated. boot can carry a
    precomputed bootstrap_values result to avoid a second target pass.
    """
    b, ts = batch.state.shape[:2]
    tt = batch.actions.shape[1]
    n = agent_spec.n_agents

    inputs = batch_agent_inputs(agent_spec, batch.obs, batch.actions)
    q_all = unroll_agent_q(agent_spec, online, inputs, tape)
    q_trans = ad.take_rows(tape, q_all, np.arange(tt * b * n))
    act_flat = batch.actions.transpose(1, 0, 2).reshape(tt * b * n)
    q_taken = ad.gather_last(tape, q_trans, act_flat)
    states_flat = batch.state.transpose(1, 0, 2).reshape(ts * b, -1)
    q_tot = mix(mixer_spec, online, ad.reshape(tape, q_taken, (tt * b, n)),
                states_flat[: tt * b], tape)

    if boot is None:
        boot = bootstrap_values(agent_spec, mixer_spec, online, target, batch,
                                double_q)
    n_boot = ts - 1
    boot_next = np.zeros((tt, b))
    boot_next[:n_boot] = boot[1 : tt + 1]

    reward_t = batch.reward.T
    r_int_t = batch.r_int.T
    term_t = batch.terminated.T
    filled_t = batch.filled.T
    y = reward_t + r_int_t + gamma * (1.0 - term_t) * boot_next
    boot_ok = (np.arange(tt)[:, None] < n_boot) | (term_t > 0.0)
    mask = (filled_t * boot_ok).reshape(tt * b)
    n_valid = float(mask.sum())
    if n_valid == 0:
        raise ValueError("td_loss: no valid transitions in batch")

    diff = ad.sub(tape, q_tot, Tensor(y.reshape(tt * b)))
    loss = ad.cmul(tape, ad.sqsum(tape, ad.cmul(tape, diff, mask)), 1.0 / n_valid)
    stats = {
        "td_loss": loss.item(),
        "q_taken_mean": float((q_tot.data * mask).sum() / n_valid),
        "target_mean": float((y.reshape(tt * b) * mask).sum() / n_valid),
    }
    return loss, stats


# ---------------------------------------------------------------------------
# learner

@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.99
    lr: float = 5e-4
    batch_size: int = 32
    replay_capacity: int = 5000
    target_sync_interval: int = 200
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 120_000
    grad_clip: float = 10.0
    agent_hidden: int = 32
    mixing_width: int = 32
    hyper_hidden: int = 64
    double_q: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if min(self.batch_size, self.replay_capacity, self.target_sync_interval,
               self.epsilon_anneal_steps) < 1:
            raise ValueError("counts and intervals must be at least 1")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")


class Learner:
    """Online and target parameters, optimizer, and replay for one task."""

    def __init__(self, obs_dim: int, state_dim: int, n_actions: int,
                 n_agents: int, config: LearnerConfig, rng: np.random.Generator):
        self.config = config
        self.agent_spec = AgentSpec(obs_dim, n_actions, n_agents,
                                    config.agent_hidden)
        self.mixer_spec = MixerSpec(state_dim, n_agents, config.mixing_width,
                                    config.hyper_hidden)
        params = ad.ParamSet()
        init_agent_params(self.agent_spec, params, rng)
        init_mixer_params(self.mixer_spec, params, rng)
        self.params = params
        self.target_params = params.clone()
        self.optimizer = ad.Adam(lr=config.lr)
        self.replay = ReplayBuffer(config.replay_capacity)
        self.train_steps = 0
        self.env_steps = 0
        self.episodes_seen = 0

    def sync_target(self) -> None:
        self.target_params.copy_from(self.params)

    def current_epsilon(self) -> float:
        return epsilon(self.env_steps, self.config.epsilon_anneal_steps,
                       self.config.epsilon_start, self.config.epsilon_end)

    def observe_episode(self, episode: Episode) -> None:
        """Record a finished rollout: replay insert plus counters."""
        self.replay.add(episode)
        self.episodes_seen += 1
        self.env_steps += episode.length


def target_state_values(learner: Learner, batch: Batch,
                        boot: np.ndarray | None = None) -> np.ndarray:
    """Bootstrap value per state slot as [B, Ts]: the mixed greedy target
    value, zero at padded slots and at terminal-entering final states."""
    if boot is None:
        boot = bootstrap_values(learner.agent_spec, learner.mixer_spec,
                                learner.params, learner.target_params, batch,
                                learner.config.double_q)
    vals = boot.T * batch.state_filled
    for i, length in enumerate(batch.lengths):
        t = int(length)
        if batch.terminated[i, t - 1] > 0.0 and t < vals.shape[1]:
            vals[i, t] = 0.0
    return vals


def train_step(learner: Learner, replay: ReplayBuffer, rng: np.random.Generator,
               vq_model: vqlat.VqModel | None = None,
               vq_optimizer: ad.Adam | None = None,
               value_table=None, seq_buffer=None,
               intrinsic_config: intr.IntrinsicConfig | None = None,
               vq_mode: str = "cvr", n_freq_vq: int = 10, n_freq_cd: int = 40,
               use_intrinsic: bool = True) -> dict | None:
    """One training step: sample, annotate, descend.

    Samples batch_size episodes, quantizes their states when a latent model
    is present, generates intrinsic rewards when configured, applies one
    clipped optimizer step on the TD loss, syncs the target copy on its
    interval, and hands the same batch to the cadenced latent training step.
    Returns a stats dict, or None (no change at all) while replay is
    underfull. With use_intrinsic False the intrinsic pass is skipped
    entirely so the step consumes the same random draws as the plain
    baseline.
    """
    cfg = learner.config
    if len(replay) < cfg.batch_size:
        return None
    episodes = replay.sample(rng, cfg.batch_size)
    batch = build_batch(episodes)
    stats: dict = {}

    boot = bootstrap_values(learner.agent_spec, learner.mixer_spec,
                            learner.params, learner.target_params, batch,
                            cfg.double_q)
    rtg = None
    if vq_model is not None:
        flat = batch.state[batch.state_filled]
        z, _ = vqlat.quantize(vq_model, vqlat.encode(vq_model, flat).data)
        codes = np.full(batch.state.shape[:2], -1, dtype=np.int64)
        codes[batch.state_filled] = z
        batch.codes = codes
        stats["codes_seen"] = np.unique(z)
        rtg = discounted_returns(batch.reward, batch.filled, cfg.gamma)
        rtg = rtg[:, : batch.state.shape[1]]

        if use_intrinsic and intrinsic_config is not None:
            if abs(intrinsic_config.gamma - cfg.gamma) > 1e-12:
                raise ValueError("intrinsic gamma differs from learner gamma")
            tv = target_state_values(learner, batch, boot)
            coded = []
            for i, length in enumerate(batch.lengths):
                t = int(length)
                coded.append(intr.CodedEpisode(
                    codes[i, : t + 1], rtg[i, : t + 1],
                    float(batch.reward[i, :t].sum())))
            traces = intr.generate_intrinsic(
                coded, seq_buffer, value_table,
                lambda e, t: float(tv[e, t]), intrinsic_config, rng)
            for i, trace in enumerate(traces):
                batch.r_int[i, : int(batch.lengths[i])] = trace.rewards
            mean_ri, nonzero = intr.intrinsic_stats(traces)
            stats["r_int_mean"] = mean_ri
            stats["r_int_nonzero"] = nonzero

    learner.params.zero_grad()
    tape = ad.Tape()
    loss, td_stats = td_loss(learner.agent_spec, learner.mixer_spec,
                             learner.params, learner.target_params, batch,
                             cfg.gamma, tape, cfg.double_q, boot)
    ad.backward(tape, loss)
    stats["grad_norm"] = ad.clip_grad_norm(learner.params, cfg.grad_clip)
    learner.optimizer.step(learner.params)
    learner.train_steps += 1
    if learner.train_steps % cfg.target_sync_interval == 0:
        learner.sync_target()
    stats.update(td_stats)

    if vq_model is not None and vq_optimizer is not None:
        vq_stats = vqlat.train_vqvae_step(
            vq_model, batch.state, rtg, batch.state_filled,
            learner.episodes_seen, n_freq_vq, n_freq_cd, value_table,
            vq_optimizer, vq_mode, cfg.grad_clip)
        stats["vq_l_tot"] = vq_stats["l_tot"]
        stats["vq_l_cvr"] = vq_stats["l_cvr"]
        stats["vq_updated"] = vq_stats["updated"]
    return stats
