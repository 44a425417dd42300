"""Cooperative gridworld Dec-POMDPs at desk scale.

One engine drives two layouts. Capture scatters agents and static targets on
a small grid; a target is captured only when enough agents stand adjacent and
one of them plays the capture action, rewarding coordinated convergence under
sparse rewards. Corridor is a deterministic single-file chain used as an
exhaustively enumerable oracle environment: both agents start at cell 0 and
must jointly capture a target at the far end.

All transitions are pure functions of (spec, state, joint action); the only
randomness lives in Capture's seeded reset placement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ACTIONS = ("up", "down", "left", "right", "stay", "capture")
N_ACTIONS = len(ACTIONS)
CAPTURE = 5
_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0), (0, 0))

Cell = tuple[int, int]


@dataclass(frozen=True)
class EnvSpec:
    layout: str = "capture"
    width: int = 7
    height: int = 7
    n_agents: int = 2
    n_targets: int = 2
    obs_radius: int = 2
    episode_limit: int = 50
    capture_reward: float = 10.0
    win_reward: float = 200.0
    penalty: float = -5.0
    capture_agents_required: int = 2
    auto_capture: bool = False
    allow_overlap: bool = False
    hazard_cells: tuple[Cell, ...] = ()

    def __post_init__(self):
        if self.layout not in ("capture", "corridor"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.n_agents < 1 or self.n_targets < 1:
            raise ValueError("need at least one agent and one target")
        if self.episode_limit < 1:
            raise ValueError("episode_limit must be at least 1")
        if self.obs_radius < 1:
            raise ValueError("obs_radius must be at least 1")
        for value in (self.capture_reward, self.win_reward, self.penalty):
            if not np.isfinite(value):
                raise ValueError("reward constants must be finite")
        cells = self.width * self.height
        if self.n_agents + self.n_targets > cells:
            raise ValueError(
                f"{self.n_agents} agents + {self.n_targets} targets exceed "
                f"{cells} cells"
            )


@dataclass(frozen=True)
class EnvState:
    agents: tuple[Cell, ...]
    targets: tuple[Cell, ...]
    alive: tuple[bool, ...]
    t: int
    cum_reward: float
    terminated: bool
    won: bool


def corridor_spec(length: int = 6, episode_limit: int = 20) -> EnvSpec:
    return EnvSpec(
        layout="corridor",
        width=length,
        height=1,
        n_agents=2,
        n_targets=1,
        obs_radius=2,
        episode_limit=episode_limit,
        allow_overlap=True,
    )


def n_actions(spec: EnvSpec) -> int:
    return N_ACTIONS


def state_dim(spec: EnvSpec) -> int:
    return 2 * spec.n_agents + 3 * spec.n_targets + 1


def obs_dim(spec: EnvSpec) -> int:
    window = 2 * spec.obs_radius + 1
    return 3 * window * window + 3


def r_max(spec: EnvSpec) -> float:
    return spec.n_targets * spec.capture_reward + spec.win_reward


def reset(spec: EnvSpec, seed: int) -> tuple[EnvState, np.ndarray]:
    if spec.layout == "corridor":
        agents = tuple((0, 0) for _ in range(spec.n_agents))
        targets = tuple((0, spec.width - 1 - i) for i in range(spec.n_targets))
    else:
        rng = np.random.default_rng(seed)
        free = [
            (r, c)
            for r in range(spec.height)
            for c in range(spec.width)
            if (r, c) not in spec.hazard_cells
        ]
        if len(free) < spec.n_agents + spec.n_targets:
            raise ValueError("not enough non-hazard cells to place entities")
        picks = rng.choice(len(free), size=spec.n_agents + spec.n_targets,
                           replace=False)
        cells = [free[i] for i in picks]
        agents = tuple(cells[: spec.n_agents])
        targets = tuple(cells[spec.n_agents:])
    state = EnvState(
        agents=agents,
        targets=targets,
        alive=tuple(True for _ in range(spec.n_targets)),
        t=0,
        cum_reward=0.0,
        terminated=False,
        won=False,
    )
    return state, observations(spec, state)


def _in_bounds(spec: EnvSpec, cell: Cell) -> bool:
    return 0 <= cell[0] < spec.height and 0 <= cell[1] < spec.width


def _adjacent(a: Cell, b: Cell) -> bool:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1])) <= 1


def step(
    spec: EnvSpec, state: EnvState, actions
) -> tuple[EnvState, np.ndarray, float, bool, bool]:
    """Advance one timestep; returns (state', obs', reward, terminated, won).

    Moves are simultaneous and order-free: a move is cancelled when it leaves
    the grid, enters a live target's cell, enters any agent's current cell
    (unless the layout allows overlap), or collides with another agent's
    proposal for the same cell.
    """
    if state.terminated:
        raise ValueError("cannot step a terminated episode")
    actions = [int(a) for a in actions]
    if len(actions) != spec.n_agents:
        raise ValueError(f"expected {spec.n_agents} actions, got {len(actions)}")
    for a in actions:
        if not 0 <= a < N_ACTIONS:
            raise ValueError(f"action index {a} out of range")

    live_cells = {c for c, alive in zip(state.targets, state.alive) if alive}
    proposals = []
    for pos, action in zip(state.agents, actions):
        dr, dc = _DELTAS[action]
        nxt = (pos[0] + dr, pos[1] + dc)
        if not _in_bounds(spec, nxt) or nxt in live_cells:
            nxt = pos
        elif not spec.allow_overlap and nxt != pos and nxt in state.agents:
            nxt = pos
        proposals.append(nxt)
    if not spec.allow_overlap:
        counts = {}
        for cell in proposals:
            counts[cell] = counts.get(cell, 0) + 1
        proposals = [
            cell if counts[cell] == 1 or cell == old else old
            for cell, old in zip(proposals, state.agents)
        ]
    new_agents = tuple(proposals)

    reward = 0.0
    new_alive = list(state.alive)
    for j, (cell, alive) in enumerate(zip(state.targets, state.alive)):
        if not alive:
            continue
        adjacent = [i for i, pos in enumerate(new_agents) if _adjacent(pos, cell)]
        if len(adjacent) < spec.capture_agents_required:
            continue
        if spec.auto_capture or any(actions[i] == CAPTURE for i in adjacent):
            new_alive[j] = False
            reward += spec.capture_reward

    won_now = not any(new_alive)
    if won_now and not state.won:
        reward += spec.win_reward

    if spec.hazard_cells:
        for pos in new_agents:
            if pos in spec.hazard_cells:
                reward += spec.penalty

    t_next = state.t + 1
    terminated = won_now or t_next >= spec.episode_limit
    new_state = EnvState(
        agents=new_agents,
        targets=state.targets,
        alive=tuple(new_alive),
        t=t_next,
        cum_reward=state.cum_reward + reward,
        terminated=terminated,
        won=won_now,
    )
    return new_state, observations(spec, new_state), reward, terminated, won_now


def avail_actions(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """[n_agents, n_actions] mask; capture needs an adjacent live target."""
    mask = np.ones((spec.n_agents, N_ACTIONS), dtype=bool)
    for i, pos in enumerate(state.agents):
        near_target = any(
            alive and _adjacent(pos, cell)
            for cell, alive in zip(state.targets, state.alive)
        )
        mask[i, CAPTURE] = near_target
    return mask


def global_state(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Normalized positions of everything plus episode progress."""
    parts = []
    for r, c in state.agents:
        parts.extend((r / spec.height, c / spec.width))
    for (r, c), alive in zip(state.targets, state.alive):
        parts.extend((r / spec.height, c / spec.width, float(alive)))
    parts.append(state.t / spec.episode_limit)
    return np.array(parts)


def observations(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Per-agent egocentric windows: ally, live-target, out-of-bounds channels
    plus own normalized position and episode progress."""
    radius = spec.obs_radius
    window = 2 * radius + 1
    out = np.zeros((spec.n_agents, obs_dim(spec)))
    for i, (r, c) in enumerate(state.agents):
        channels = np.zeros((3, window, window))
        for j, pos in enumerate(state.agents):
            if j == i:
                continue
            dr, dc = pos[0] - r, pos[1] - c
            if abs(dr) <= radius and abs(dc) <= radius:
                channels[0, dr + radius, dc + radius] = 1.0
        for cell, alive in zip(state.targets, state.alive):
            if not alive:
                continue
            dr, dc = cell[0] - r, cell[1] - c
            if abs(dr) <= radius and abs(dc) <= radius:
                channels[1, dr + radius, dc + radius] = 1.0
        rows = np.arange(r - radius, r + radius + 1)
        cols = np.arange(c - radius, c + radius + 1)
        oob_r = (rows < 0) | (rows >= spec.height)
        oob_c = (cols < 0) | (cols >= spec.width)
        channels[2] = (oob_r[:, None] | oob_c[None, :]).astype(float)
        out[i, : 3 * window * window] = channels.ravel()
        out[i, -3:] = (r / spec.height, c / spec.width, state.t / spec.episode_limit)
    return out


def goal_reached(episode_rewards, spec: EnvSpec) -> bool:
    """True when the undiscounted reward sum attains the map maximum."""
    total = 0.0
    for r in episode_rewards:
        total += float(r)
    return total == r_max(spec)
