"""Code-value FIFOs and top-k trajectory heaps against brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lagma import envs
from lagma.codebook import CodeValueTable, SequenceBuffer, traj_value_cq0
from _oracles import FifoMeanOracle, TopKOracle


class TestCodeValueTable:
    def test_fifo_mean_of_last_three(self):
        table = CodeValueTable(n_codes=2, capacity=3)
        for r in (1.0, 2.0, 3.0, 4.0):
            table.update(0, r)
        assert table.value(0) == 3.0

    def test_first_update(self):
        table = CodeValueTable(4)
        assert table.update(1, 5.0) == 5.0
        assert table.value(1) == 5.0
        assert table.visits(1) == 1

    def test_default_capacity(self):
        assert CodeValueTable(4).capacity == 100

    def test_constant_stream_stays_exact(self):
        table = CodeValueTable(2, capacity=5)
        for _ in range(6):
            table.update(0, 0.1)
        assert table.value(0) == 0.1

    def test_never_visited_is_absent(self):
        assert CodeValueTable(3).value(2) is None

    def test_nonfinite_rejected_unchanged(self):
        table = CodeValueTable(2, capacity=3)
        table.update(0, 1.0)
        with pytest.raises(ValueError, match="non-finite"):
            table.update(0, float("nan"))
        with pytest.raises(ValueError, match="non-finite"):
            table.update(0, float("inf"))
        assert table.value(0) == 1.0
        assert table.visits(0) == 1

    def test_out_of_range_rejected(self):
        table = CodeValueTable(2)
        with pytest.raises(IndexError):
            table.update(2, 1.0)
        with pytest.raises(IndexError):
            table.value(-1)

    def test_visit_count_exceeds_capacity(self):
        table = CodeValueTable(1, capacity=2)
        for r in range(5):
            table.update(0, float(r))
        assert table.visits(0) == 5
        assert table.value(0) == 3.5

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.lists(
        st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60))
    def test_mean_matches_oracle_bitwise(self, capacity, stream):
        table = CodeValueTable(1, capacity=capacity)
        oracle = FifoMeanOracle(capacity)
        for r in stream:
            table.update(0, r)
            oracle.update(r)
            assert table.value(0) == oracle.mean()
            assert table.visits(0) == oracle.count

    def test_state_roundtrip(self):
        table = CodeValueTable(3, capacity=2)
        for z, r in ((0, 1.0), (0, 2.0), (0, 3.0), (2, -1.0)):
            table.update(z, r)
        clone = CodeValueTable(3, capacity=2)
        clone.load_state(table.state(), [table.visits(z) for z in range(3)])
        for z in range(3):
            assert clone.value(z) == table.value(z)
            assert clone.visits(z) == table.visits(z)


class TestSequenceBuffer:
    def test_replacement_evicts_minimum(self):
        buf = SequenceBuffer(n_codes=1, k=2)
        buf.update(5.0, (0, 1))
        buf.update(7.0, (0, 2))
        buf.update(6.0, (0, 3))
        assert buf.keys(0) == [6.0, 7.0]
        stored = [t for _, t in buf.entries(0)]
        assert (0, 1) not in stored

    def test_under_capacity_accepts_anything_finite(self):
        buf = SequenceBuffer(1, k=3)
        buf.update(-1e9, (0,))
        buf.update(1e9, (0, 5))
        assert buf.size(0) == 2

    def test_key_at_or_below_minimum_rejected(self):
        buf = SequenceBuffer(1, k=2)
        buf.update(6.0, (0, 1))
        buf.update(7.0, (0, 2))
        buf.update(4.0, (0, 3))
        assert buf.keys(0) == [6.0, 7.0]
        buf.update(6.0, (0, 9))
        assert (0, 9) not in [t for _, t in buf.entries(0)]

    def test_nonfinite_key_rejected(self):
        buf = SequenceBuffer(1, k=2)
        with pytest.raises(ValueError, match="non-finite"):
            buf.update(float("nan"), (0,))
        assert buf.size(0) == 0

    def test_empty_trajectory_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            SequenceBuffer(1, k=2).update(1.0, ())

    def test_first_index_selects_heap(self):
        buf = SequenceBuffer(4, k=2)
        buf.update(1.0, (2, 0, 1))
        assert buf.size(2) == 1
        assert buf.size(0) == 0

    def test_sample_empty_returns_none(self):
        buf = SequenceBuffer(2, k=2)
        assert buf.sample(0, np.random.default_rng(0)) is None

    def test_sample_single_entry(self):
        buf = SequenceBuffer(1, k=4)
        buf.update(3.0, (0, 7))
        assert buf.sample(0, np.random.default_rng(0)) == (0, 7)

    def test_sample_is_uniform(self):
        buf = SequenceBuffer(1, k=2)
        buf.update(1.0, (0, 1))
        buf.update(2.0, (0, 2))
        rng = np.random.default_rng(42)
        draws = sum(buf.sample(0, rng) == (0, 1) for _ in range(10_000))
        assert 4_500 <= draws <= 5_500

    def test_max_key_retained_until_beaten(self):
        buf = SequenceBuffer(1, k=3)
        best = (0, 9, 9)
        buf.update(100.0, best)
        rng = np.random.default_rng(1)
        for _ in range(50):
            buf.update(float(rng.uniform(-50, 99)), (0, int(rng.integers(10))))
        assert any(t == best for _, t in buf.entries(0))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 6), st.lists(
        st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
    def test_keys_match_sorted_list_oracle(self, k, stream):
        buf = SequenceBuffer(1, k=k)
        oracle = TopKOracle(k)
        for i, key in enumerate(stream):
            buf.update(key, (0, i))
            oracle.update(key)
            assert buf.keys(0) == sorted(oracle.keys)
            assert buf.size(0) <= k

    def test_state_roundtrip(self):
        buf = SequenceBuffer(2, k=2)
        buf.update(1.0, (0, 1))
        buf.update(2.0, (1, 2))
        buf.update(3.0, (0, 3))
        clone = SequenceBuffer(2, k=2)
        clone.load_state(buf.state(), 3)
        for z in range(2):
            assert clone.entries(z) == buf.entries(z)


class TestTrajValue:
    def test_simple_sum(self):
        assert traj_value_cq0([1.0, 2.0, 3.0]) == 6.0

    def test_empty_is_zero(self):
        assert traj_value_cq0([]) == 0.0

    def test_winning_capture_episode_attains_env_maximum(self):
        rewards = [0.0, 10.0, 0.0, 10.0, 200.0]
        assert traj_value_cq0(rewards) == envs.r_max(envs.EnvSpec())
