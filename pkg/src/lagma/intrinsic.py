"""Latent goal-guided intrinsic rewards.

Episodes arrive as quantized code sequences with per-state discounted
returns. On a fixed cadence the generator stores the current code-sequence
suffix into the per-code trajectory memory and resamples a reference
trajectory from the current code's heap; between cadence points, stepping
onto a code that lies on the reference (and differs from the previous code)
earns the transition a bonus proportional to how much the code's learned
value exceeds the bootstrap value already present in the TD target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .codebook import CodeValueTable, SequenceBuffer

logger = logging.getLogger(__name__)

INTRINSIC_MODES = ("cqt", "cq0", "cqt_no_upd")


@dataclass(frozen=True)
class IntrinsicConfig:
    n_freq: int = 5
    gamma: float = 0.99
    clamp: bool = True
    mode: str = "cqt"

    def __post_init__(self):
        if self.n_freq < 1:
            raise ValueError("n_freq must be at least 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.mode not in INTRINSIC_MODES:
            raise ValueError(f"mode must be one of {INTRINSIC_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class CodedEpisode:
    """One episode's quantization record.

    codes: [T+1] code index per state; returns: [T+1] discounted return-to-go
    per state (zero at the final slot); reward_sum: undiscounted episode total.
    """

    codes: np.ndarray
    returns: np.ndarray
    reward_sum: float


@dataclass
class IntrinsicTrace:
    """Per-episode output; rewards[i] pairs with the state-indexed flags at i+1."""

    rewards: np.ndarray
    on_reference: np.ndarray
    code_changed: np.ndarray
    resampled: np.ndarray


def generate_intrinsic(
    episodes: Sequence[CodedEpisode],
    seq_buffer: SequenceBuffer,
    value_table: CodeValueTable,
    target_value: Callable[[int, int], float],
    config: IntrinsicConfig,
    rng: np.random.Generator,
) -> list[IntrinsicTrace]:
    """Run the cadenced reference-tracking pass over a batch of episodes.

    target_value(episode_index, t) must return the bootstrap value the TD
    target uses at state t, i.e. zero at terminal states and the target-net
    max elsewhere. Buffer updates and resampling happen on multiples of
    n_freq; rewards are only emitted between them, attached to the incoming
    transition (index t - 1 when inspecting the state at t).
    """
    traces = []
    missing_value_logged = False
    for e_idx, episode in enumerate(episodes):
        codes = np.asarray(episode.codes, dtype=np.int64)
        returns = np.asarray(episode.returns, dtype=np.float64)
        n_states = len(codes)
        rewards = np.zeros(max(n_states - 1, 0))
        on_reference = np.zeros(n_states, dtype=bool)
        code_changed = np.zeros(n_states, dtype=bool)
        resampled = np.zeros(n_states, dtype=bool)
        reference: set[int] | None = None

        for t in range(n_states):
            z = int(codes[t])
            if t % config.n_freq == 0:
                skip = config.mode == "cqt_no_upd" and t > 0
                if not skip:
                    if config.mode == "cq0":
                        key = episode.reward_sum
                    else:
                        key = float(returns[t])
                    seq_buffer.update(key, codes[t:])
                    drawn = seq_buffer.sample(z, rng)
                    reference = set(drawn) if drawn is not None else None
                    resampled[t] = drawn is not None
                if reference is not None:
                    on_reference[t] = z in reference
                code_changed[t] = t > 0 and z != int(codes[t - 1])
                continue

            changed = z != int(codes[t - 1])
            on_ref = reference is not None and z in reference
            on_reference[t] = on_ref
            code_changed[t] = changed
            if on_ref and changed:
                c = value_table.value(z)
                if c is None:
                    if not missing_value_logged:
                        logger.debug(
                            "on-reference code %d has no value yet; treating as 0", z
                        )
                        missing_value_logged = True
                    c = 0.0
                bonus = config.gamma * (c - target_value(e_idx, t))
                if config.clamp:
                    bonus = max(bonus, 0.0)
                rewards[t - 1] = bonus

        traces.append(IntrinsicTrace(rewards, on_reference, code_changed, resampled))
    return traces


def proposition1_target(reward: float, c_next: float, gamma: float) -> float:
    """The TD target after the unclamped bonus cancels the bootstrap term."""
    return reward + gamma * c_next


def intrinsic_stats(traces: Sequence[IntrinsicTrace]) -> tuple[float, float]:
    """(mean reward, nonzero fraction) over all transition slots in a batch."""
    total = 0
    total_sum = 0.0
    nonzero = 0
    for trace in traces:
        total += trace.rewards.size
        total_sum += float(trace.rewards.sum())
        nonzero += int(np.count_nonzero(trace.rewards))
    if total == 0:
        return 0.0, 0.0
    return total_sum / total, nonzero / total
