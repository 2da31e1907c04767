import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from restart_rl.env import StateSnapshot
from restart_rl.memory import (
    EmptyMemory,
    EpisodicMemory,
    EpisodicOrigin,
    IndexOutOfRange,
    NonFiniteDelta,
    OrphanSubEpisode,
    PrioritisedMemory,
    RestartMemory,
    SumTree,
    UniformMemory,
    category_probabilities,
)


def snap(i, t=0):
    return StateSnapshot(payload=int(i).to_bytes(4, "little"), t=t)


def episode(rewards, start_t=0, tag=0):
    return [(snap(tag * 1000 + k, start_t + k), float(r)) for k, r in enumerate(rewards)]


# uniform ---------------------------------------------------------------------

def test_uniform_ring_overwrites_oldest():
    mem = UniformMemory(capacity=5)
    for i in range(6):
        mem.push(snap(i))
    assert len(mem) == 5
    assert snap(0) not in [mem[k] for k in range(5)]


def test_uniform_single_state_always_sampled():
    mem = UniformMemory(capacity=3, T_aug=10)
    mem.push(snap(7))
    rng = np.random.default_rng(0)
    samples = [mem.sample(rng) for _ in range(100)]
    assert all(s.snapshot == snap(7) and s.T_aug == 10 for s in samples)


def test_uniform_two_states_half_each():
    mem = UniformMemory(capacity=20000)
    mem.push(snap(0))
    mem.push(snap(1))
    rng = np.random.default_rng(1)
    n = 100_000
    hits = sum(mem.sample(rng).snapshot == snap(0) for _ in range(n))
    assert abs(hits / n - 0.5) <= 0.01


def test_uniform_empty_raises():
    with pytest.raises(EmptyMemory):
        UniformMemory().sample(np.random.default_rng(0))


# sum tree / prioritised ------------------------------------------------------

def test_priority_from_td_error():
    delta = 1 + 0.99 * 2 - 0.5
    assert delta == pytest.approx(2.48)
    mem = PrioritisedMemory(capacity=4, alpha=1.0, eps=1e-3)
    i = mem.push(snap(0), delta)
    assert mem.tree[i] == pytest.approx(2.48 + 1e-3, abs=1e-12)


def test_zero_delta_keeps_eps_floor():
    mem = PrioritisedMemory(capacity=4, alpha=0.4, eps=1e-3)
    i = mem.push(snap(0), 0.0)
    assert mem.tree[i] == pytest.approx(1e-3 ** 0.4)
    assert mem.probabilities()[0] == 1.0


def test_non_finite_delta_rejected():
    mem = PrioritisedMemory(capacity=4)
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(NonFiniteDelta):
            mem.push(snap(0), bad)


@pytest.mark.parametrize("alpha", [0.0, 0.4, 1.0])
def test_prioritised_sampling_frequencies(alpha):
    mem = PrioritisedMemory(capacity=2, alpha=alpha, eps=1e-12)
    mem.push(snap(0), 1.0)
    mem.push(snap(1), 3.0)
    expect = np.array([1.0, 3.0 ** alpha]) / (1.0 + 3.0 ** alpha)
    np.testing.assert_allclose(mem.probabilities(), expect, rtol=1e-9)
    rng = np.random.default_rng(2)
    n = 100_000
    counts = np.bincount([mem.sample(rng).origin.index for _ in range(n)], minlength=2)
    assert np.all(np.abs(counts / n - expect) <= 0.01)
    sigma = np.sqrt(n * expect * (1 - expect))
    assert np.all(np.abs(counts - n * expect) <= 3 * sigma)


def test_alpha_04_reference_values():
    p = np.array([1.0, 3.0 ** 0.4]) / (1 + 3.0 ** 0.4)
    np.testing.assert_allclose(p, [0.392, 0.608], atol=5e-4)


def test_update_repairs_tree():
    mem = PrioritisedMemory(capacity=8, alpha=0.4)
    for i in range(5):
        mem.push(snap(i), float(i))
    mem.update(3, 0.0)
    assert mem.tree[3] == pytest.approx(mem.eps ** 0.4)
    assert mem.tree.total == pytest.approx(mem.tree.leaves().sum(), abs=1e-9)
    assert mem.tree.check()
    with pytest.raises(IndexOutOfRange):
        mem.update(5, 1.0)


def test_random_operations_match_brute_force_sum():
    rng = np.random.default_rng(3)
    mem = PrioritisedMemory(capacity=300, alpha=0.4)
    reference = {}
    for _ in range(10_000):
        if reference and rng.random() < 0.5:
            i = int(rng.integers(len(mem)))
            d = float(rng.normal(scale=4))
            mem.update(i, d)
        else:
            d = float(rng.normal(scale=4))
            i = mem.push(snap(0), d)
        reference[i] = (abs(d) + mem.eps) ** 0.4
    brute = math.fsum(reference.values())
    assert abs(mem.tree.total - brute) <= 1e-9
    assert mem.tree.check(1e-9)


@settings(max_examples=50, deadline=None)
@given(
    capacity=st.integers(1, 40),
    ops=st.lists(st.tuples(st.booleans(), st.floats(-50, 50), st.integers(0, 100)), max_size=200),
)
def test_sumtree_invariants_hold(capacity, ops):
    mem = PrioritisedMemory(capacity=capacity, alpha=0.7)
    rng = np.random.default_rng(0)
    for is_update, delta, where in ops:
        if is_update and len(mem):
            mem.update(where % len(mem), delta)
        else:
            mem.push(snap(where), delta)
        assert len(mem) <= capacity
        assert mem.tree.check(1e-9)
        if len(mem):
            s = mem.sample(rng)
            assert s.origin.index < len(mem)
            assert np.all(mem.probabilities() > 0)


def test_sumtree_find_boundaries():
    tree = SumTree(3)
    for i, v in enumerate([1.0, 2.0, 3.0]):
        tree.set(i, v)
    assert [tree.find(x) for x in (0.0, 0.99, 1.0, 2.99, 3.0, 5.99)] == [0, 0, 1, 1, 2, 2]


def test_prioritised_sample_has_fixed_t_aug_and_no_weights():
    mem = PrioritisedMemory(capacity=4, T_aug=10)
    mem.push(snap(0), 1.0)
    s = mem.sample(np.random.default_rng(0))
    assert s.T_aug == 10
    assert not hasattr(s, "weight")


# episodic --------------------------------------------------------------------

def test_episodic_empty_accepts_any_parent():
    mem = EpisodicMemory(parent_capacity=2, sub_capacity=2, T_env=50)
    assert mem.offer(episode([-1.0] * 5))
    assert len(mem) == 1


def test_episodic_full_rejects_lower_and_evicts_min():
    mem = EpisodicMemory(parent_capacity=2, sub_capacity=2, T_env=50)
    mem.offer(episode([3.0]))
    mem.offer(episode([5.0]))
    assert mem.min_G_bar() == 3.0
    assert not mem.offer(episode([2.0]))
    assert mem.offer(episode([4.0]))
    assert sorted(c.G_bar for c in mem.categories) == [4.0, 5.0]


def test_episodic_tie_evicts_oldest():
    mem = EpisodicMemory(parent_capacity=2, sub_capacity=0, T_env=50)
    mem.offer(episode([1.0], tag=1))
    mem.offer(episode([1.0], tag=2))
    mem.offer(episode([2.0], tag=3))
    assert [c.parent.initial for c in mem.categories] == [snap(2000), snap(3000)]


def test_category_probabilities_with_negative_offset():
    p = category_probabilities([-2.0, 5.0], alpha=1.0, eps=1e-3)
    np.testing.assert_allclose(p, [1e-3 / 7.002, 7.001 / 7.002], rtol=0, atol=1e-12)
    np.testing.assert_allclose(p, [0.000143, 0.999857], atol=1e-6)


def test_category_offset_is_zero_for_nonnegative_returns():
    p = category_probabilities([0.0, 2.0, 5.0], alpha=1.0, eps=1e-3)
    w = np.array([0.0, 2.0, 5.0]) + 1e-3
    np.testing.assert_allclose(p, w / w.sum(), rtol=1e-12)


def test_episodic_single_parent_uniform_states():
    mem = EpisodicMemory(parent_capacity=1, sub_capacity=1, T_env=50)
    mem.offer(episode([0.0] * 10))
    rng = np.random.default_rng(4)
    n = 100_000
    counts = np.zeros(10)
    for _ in range(n):
        s = mem.sample(rng)
        assert s.T_aug == 50 - s.snapshot.t
        counts[s.snapshot.t] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_sub_episode_augmented_return_and_g_bar():
    mem = EpisodicMemory(parent_capacity=2, sub_capacity=2, T_env=50)
    mem.offer(episode([0.0, 1.0, 0.0, 0.0]))
    cat = mem.categories[0]
    pool = cat.parent.pool
    origin = EpisodicOrigin(cat.id, 0, 2, tuple(pool[:2]))
    assert mem.offer(episode([0.0, 5.0], start_t=2, tag=9), origin)
    sub = cat.sub_episodes[0]
    assert sub.prefix_return == 1.0
    assert sub.augmented_return == 6.0
    assert sub.start_t == 2
    assert cat.G_bar == 6.0
    assert [s.t for s, _ in sub.pool] == [0, 1, 2, 3]


def test_sub_list_capacity_and_eviction():
    mem = EpisodicMemory(parent_capacity=1, sub_capacity=2, T_env=50)
    mem.offer(episode([0.0] * 5))
    cid = mem.categories[0].id
    origin = EpisodicOrigin(cid, 0, 0, ())
    assert mem.offer(episode([1.0], tag=1), origin)
    assert mem.offer(episode([3.0], tag=2), origin)
    assert not mem.offer(episode([0.5], tag=3), origin)
    assert mem.offer(episode([2.0], tag=4), origin)
    assert sorted(s.augmented_return for s in mem.categories[0].sub_episodes) == [2.0, 3.0]


def test_orphan_sub_episode():
    mem = EpisodicMemory(parent_capacity=1, sub_capacity=2, T_env=50)
    mem.offer(episode([0.0]))
    origin = EpisodicOrigin(mem.categories[0].id, 0, 0, ())
    mem.offer(episode([1.0]))
    with pytest.raises(OrphanSubEpisode):
        mem.offer(episode([1.0]), origin)


def test_episodic_empty_raises():
    with pytest.raises(EmptyMemory):
        EpisodicMemory().sample(np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    ops=st.integers(1, 80),
    parent_cap=st.integers(1, 5),
    sub_cap=st.integers(0, 4),
)
def test_episodic_invariants(seed, ops, parent_cap, sub_cap):
    T_env = 30
    rng = np.random.default_rng(seed)
    mem = EpisodicMemory(parent_capacity=parent_cap, sub_capacity=sub_cap, T_env=T_env, alpha=1.0)
    min_parent = -math.inf
    for _ in range(ops):
        if len(mem) and rng.random() < 0.6:
            s = mem.sample(rng)
            assert s.snapshot.t + s.T_aug == T_env
            n = int(rng.integers(1, s.T_aug + 1))
            steps = [(snap(0, s.snapshot.t + k), float(rng.normal())) for k in range(n)]
            try:
                mem.offer(steps, s.origin)
            except OrphanSubEpisode:
                pass
        else:
            n = int(rng.integers(1, T_env + 1))
            mem.offer([(snap(0, k), float(rng.normal())) for k in range(n)])
        assert mem.check()
        assert len(mem) <= parent_cap
        if len(mem) == parent_cap:
            current = min(c.parent.G for c in mem.categories)
            assert current >= min_parent
            min_parent = current
        assert np.all(mem.category_probabilities() > 0)
        for cat in mem.categories:
            for sub in cat.sub_episodes:
                assert len(sub.steps) <= T_env - sub.start_t


def test_memory_checkpoint_round_trip(tmp_path):
    mem = PrioritisedMemory(capacity=8)
    for i in range(5):
        mem.push(snap(i), float(i))
    path = tmp_path / "mem.bin"
    mem.save(path)
    loaded = RestartMemory.load(path)
    np.testing.assert_array_equal(loaded.tree.nodes, mem.tree.nodes)
    raw = bytearray(path.read_bytes())
    raw[10] ^= 1
    with pytest.raises(ValueError):
        RestartMemory.from_bytes(bytes(raw))
