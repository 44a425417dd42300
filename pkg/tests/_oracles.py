"""Independent reference implementations the tests check the library against.

Nothing in here imports from lagma's internals beyond public call signatures,
and nothing in lagma imports from here. Oracles favor the dumbest correct
formulation: explicit loops, sorted lists, exhaustive enumeration.
"""

from __future__ import annotations

import numpy as np


def fd_probe(fn, arrays, analytic, rng, n_probes=64, step=1e-5):
    """Central finite differences against precomputed analytic gradients.

    fn: no-argument callable returning a float, reading `arrays` in place.
    arrays: list of ndarrays to perturb. analytic: matching gradient arrays.
    Returns the max relative error over probed coordinates.
    """
    sizes = [a.size for a in arrays]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    coords = rng.choice(total, size=min(n_probes, total), replace=False)
    worst = 0.0
    for flat in coords:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        off = int(flat - offsets[k])
        arr = arrays[k]
        orig = arr.flat[off]
        arr.flat[off] = orig + step
        f_plus = fn()
        arr.flat[off] = orig - step
        f_minus = fn()
        arr.flat[off] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[k].flat[off]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst


class TopKOracle:
    """Online top-k replay with a plain sorted list of keys.

    Mirrors the accept rule (push while under capacity, replace the minimum
    only when the new key is strictly greater) without any heap machinery.
    """

    def __init__(self, k: int):
        self.k = k
        self.keys: list[float] = []

    def update(self, key: float) -> None:
        if len(self.keys) < self.k:
            self.keys.append(key)
            self.keys.sort()
        elif key > self.keys[0]:
            self.keys[0] = key
            self.keys.sort()


class FifoMeanOracle:
    """Sliding-window mean recomputed from an explicit list every time."""

    def __init__(self, m: int):
        self.m = m
        self.items: list[float] = []
        self.count = 0

    def update(self, value: float) -> None:
        self.items.append(value)
        if len(self.items) > self.m:
            self.items.pop(0)
        self.count += 1

    def mean(self) -> float:
        return sum(self.items) / len(self.items)


def enumerate_states(initial, step_fn, joint_actions):
    """BFS over a deterministic MDP given a functional step.

    initial: hashable-keyed start state. step_fn(state, joint) must return
    (next_state, reward, terminated). Returns (reachable non-terminal states,
    transition dict {(state, joint): (next, reward, terminated)}).
    """
    seen = {initial}
    frontier = [initial]
    transitions = {}
    nonterminal = [initial]
    while frontier:
        state = frontier.pop()
        for joint in joint_actions:
            nxt, reward, terminated = step_fn(state, joint)
            transitions[(state, joint)] = (nxt, reward, terminated)
            if not terminated and nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
                nonterminal.append(nxt)
    return nonterminal, transitions


def value_iteration(states, transitions, joint_actions, gamma, tol=1e-13):
    """Exhaustive value iteration; terminal successors contribute 0."""
    values = {s: 0.0 for s in states}
    while True:
        delta = 0.0
        for s in states:
            best = -np.inf
            for joint in joint_actions:
                nxt, reward, terminated = transitions[(s, joint)]
                v_next = 0.0 if terminated else values[nxt]
                best = max(best, reward + gamma * v_next)
            delta = max(delta, abs(best - values[s]))
            values[s] = best
        if delta < tol:
            return values


def greedy_policy(states, transitions, joint_actions, values, gamma):
    """Deterministic greedy policy from a value table, lowest index wins ties."""
    policy = {}
    for s in states:
        best_joint, best_val = None, -np.inf
        for joint in joint_actions:
            nxt, reward, terminated = transitions[(s, joint)]
            v_next = 0.0 if terminated else values[nxt]
            val = reward + gamma * v_next
            if val > best_val + 1e-12:
                best_val = val
                best_joint = joint
        policy[s] = best_joint
    return policy
