"""Reservoir buffer: retention law, sampling, replay loss, footprint."""

import numpy as np
import pytest

from driftcast import adapt as ad
from driftcast import memory as mem
from driftcast import model as md
from driftcast.graph import SiteGraph, normalize


def win(seed=0, w=4, n=2, d=2):
    return np.random.default_rng(seed).normal(size=(w, n, d))


def test_first_b_arrivals_all_stored():
    m = mem.ReplayMemory(capacity=5, seed=0)
    for t in range(1, 6):
        assert mem.reservoir_insert(m, win(t), t)
    assert m.size == 5
    assert [e.inserted_at for e in m.entries] == [1, 2, 3, 4, 5]


def test_capacity_zero_always_empty():
    m = mem.ReplayMemory(capacity=0)
    for t in range(1, 20):
        assert not mem.reservoir_insert(m, win(t), t)
    assert m.size == 0
    assert mem.sample_replay(m, 4, seed=0) == []


def test_size_never_exceeds_capacity_and_t_strictly_increasing():
    m = mem.ReplayMemory(capacity=3, seed=1)
    for t in range(1, 200):
        mem.reservoir_insert(m, win(t), t)
        assert m.size <= 3
    with pytest.raises(ValueError, match="increase"):
        mem.reservoir_insert(m, win(0), 10)


def test_sample_replay_contracts():
    m = mem.ReplayMemory(capacity=4, seed=0)
    for t in range(1, 5):
        mem.reservoir_insert(m, win(t), t)
    all_of_it = mem.sample_replay(m, 10, seed=3)
    assert len(all_of_it) == 4
    a = mem.sample_replay(m, 2, seed=5)
    b = mem.sample_replay(m, 2, seed=5)
    assert [i for i, _ in a] == [i for i, _ in b]
    # without replacement
    assert len({i for i, _ in all_of_it}) == 4


def test_reservoir_object_matches_simulated_law():
    # run the real buffer many times on a short stream and compare retention
    # of each arrival against B/t
    capacity, horizon, trials = 8, 64, 3000
    counts = np.zeros(horizon + 1)
    for trial in range(trials):
        m = mem.ReplayMemory(capacity=capacity, seed=trial)
        for t in range(1, horizon + 1):
            mem.reservoir_insert(m, np.zeros((1, 1, 1)), t)
        for e in m.entries:
            counts[e.inserted_at] += 1
    p_expected = capacity / horizon
    p_hat = counts[1:] / trials
    se = np.sqrt(p_expected * (1 - p_expected) / trials)
    z = np.abs(p_hat - p_expected) / se
    assert np.mean(z <= 3.0) > 0.98
    assert z.max() < 5.0


def test_simulate_reservoir_agrees_with_object_rule():
    buf = mem.simulate_reservoir(capacity=4, arrivals=100, trials=2000, seed=0)
    assert buf.shape == (2000, 4)
    p_hat = (buf == 100).any(axis=1).mean()  # last arrival retention
    assert p_hat == pytest.approx(4 / 100, abs=3 * np.sqrt(0.04 * 0.96 / 2000))


def test_replay_loss_empty_and_oracle_equivalence():
    cfg = md.ModelConfig(input_dim=2, window=4, horizon=1, d_emb=8, d_h=8,
                         attention_heads=2, dropout=0.0)
    student = md.init(cfg, 0)
    teacher = md.init(cfg, 7)
    A = np.ones((2, 2)) - np.eye(2)
    g = normalize(SiteGraph(["a", "b"], A))
    config = ad.AdaptConfig(confidence_threshold=1e-9)
    assert mem.replay_loss(student, teacher, [], g, config) == 0.0

    # single window: equals a direct consistency + graph evaluation
    x = win(3)
    got = mem.replay_loss(student, teacher, [x], g, config, seed=42)
    v1, v2 = ad.augment(x, config.augment, 42)
    direct = ad.consistency_loss(student, teacher, v1, v2, g, config)
    out = md.forward(student, v2, g, mode="eval")
    direct += ad.graph_regularizer(out.embeddings.data[0], g)
    assert got == pytest.approx(direct, abs=1e-12)


def test_replay_loss_same_params_identity_views():
    cfg = md.ModelConfig(input_dim=2, window=4, horizon=1, d_emb=8, d_h=8,
                         attention_heads=2, dropout=0.0)
    state = md.init(cfg, 0)
    A = np.ones((2, 2)) - np.eye(2)
    g = normalize(SiteGraph(["a", "b"], A))
    config = ad.AdaptConfig(augment=ad.AugmentParams(
        jitter_sigma=0.0, mask_ratio=0.0, scale_min=1.0, scale_max=1.0, warp_max_shift=0))
    x = win(5)
    # consistency part vanishes; what remains is the graph penalty alone
    got = mem.replay_loss(state, state, [x], g, config, seed=0)
    z = md.forward(state, ad._pad_flag(x), g, mode="eval").embeddings.data[0]
    assert got == pytest.approx(ad.graph_regularizer(z, g), abs=1e-12)


def test_memory_footprint_accounting():
    # paper-scale config: B=200 windows of (24, 7, 5) plus 64-dim caches < 1 MB
    m = mem.ReplayMemory(capacity=200, seed=0)
    w = np.zeros((24, 7, 5))
    for t in range(1, 201):
        mem.reservoir_insert(m, w, t, emb_mean=np.zeros(64))
    expected_windows = 200 * 24 * 7 * 5 * 4      # float32 storage
    expected_caches = 200 * 64 * 8
    assert m.nbytes() == expected_windows + expected_caches
    assert m.nbytes() < 1_000_000


def test_snapshot_export(tmp_path):
    m = mem.ReplayMemory(capacity=3, seed=0)
    for t in range(1, 4):
        mem.reservoir_insert(m, win(t), t, emb_mean=np.arange(4.0))
    path = tmp_path / "buffer.bin"
    mem.save_snapshot(m, path)
    from driftcast import binio
    meta, arrays = binio.read_arrays(path, mem.SNAPSHOT_MAGIC, mem.SNAPSHOT_VERSION)
    assert meta["capacity"] == 3
    assert len(meta["entries"]) == 3
    assert "window.0" in arrays and "emb.2" in arrays
