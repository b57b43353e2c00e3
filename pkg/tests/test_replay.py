import numpy as np
import pytest

from dreamer_cdp.replay import ReplayBuffer, Transition, WarmupError


def episode(n, start=0, shape=(2, 2, 3)):
    """Observations carry a global step counter so windows can be checked for contiguity."""
    out = []
    for i in range(n):
        obs = np.full(shape, (start + i) % 256, np.uint8)
        out.append(Transition(obs, i % 6, float(i), 0 if i == n - 1 else 1, is_first=i == 0))
    return out


def counters(buf, batch):
    return batch.images[..., 0, 0, 0].astype(int)


def test_add_episode_size():
    buf = ReplayBuffer(1000, (2, 2, 3))
    buf.add_episode(episode(10))
    assert len(buf) == 10


def test_ring_eviction():
    buf = ReplayBuffer(100, (2, 2, 3))
    buf.add_episode(episode(60))
    buf.add_episode(episode(41, start=60))
    assert len(buf) == 100
    batch = buf.sample_batch(1, 100, 0)
    assert counters(buf, batch)[:, 0].tolist() == list(range(1, 101))


def test_sampled_indices_within_size():
    buf = ReplayBuffer(50, (2, 2, 3))
    buf.add_episode(episode(30))
    starts = buf.sample_starts(1000, 8, np.random.default_rng(0))
    assert starts.max() + 8 <= len(buf) and starts.min() >= 0


def test_full_buffer_is_only_sample():
    buf = ReplayBuffer(100, (2, 2, 3))
    buf.add_episode(episode(25))
    batch = buf.sample_batch(1, 25, 3)
    assert batch.starts.tolist() == [0]
    assert counters(buf, batch)[:, 0].tolist() == list(range(25))


def test_same_seed_same_batch():
    buf = ReplayBuffer(100, (2, 2, 3))
    buf.add_episode(episode(40))
    a, b = buf.sample_batch(4, 5, 11), buf.sample_batch(4, 5, 11)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.starts, b.starts)


def test_uniform_start_histogram_chi_square():
    buf = ReplayBuffer(200, (2, 2, 3))
    buf.add_episode(episode(60))
    L = 11
    k = buf.valid_starts(L)
    assert k == 50
    starts = buf.sample_starts(100_000, L, np.random.default_rng(123))
    counts = np.bincount(starts, minlength=k)
    expected = len(starts) / k
    chi2 = ((counts - expected) ** 2 / expected).sum()
    dof = k - 1
    assert abs(chi2 - dof) < 3 * np.sqrt(2 * dof)


def test_no_window_spans_eviction_boundary():
    buf = ReplayBuffer(64, (2, 2, 3))
    start = 0
    rng = np.random.default_rng(0)
    for n in (20, 30, 25, 17, 9, 40):
        buf.add_episode(episode(n, start=start))
        start += n
        if len(buf) >= 8:
            batch = buf.sample_batch(64, 8, rng)
            c = counters(buf, batch)
            assert np.all((np.diff(c, axis=0) % 256) == 1)


def test_episode_boundary_marked_inside_window():
    buf = ReplayBuffer(100, (2, 2, 3))
    buf.add_episode(episode(5))
    buf.add_episode(episode(5, start=5))
    batch = buf.sample_batch(1, 10, 0)
    assert batch.is_first[:, 0].tolist() == [True] + [False] * 4 + [True] + [False] * 4
    assert batch.conts[4, 0] == 0


def test_warmup_signal():
    buf = ReplayBuffer(100, (2, 2, 3))
    buf.add_episode(episode(5))
    with pytest.raises(WarmupError):
        buf.sample_batch(1, 6, 0)


@pytest.mark.parametrize(
    "bad, match",
    [
        ([Transition(np.zeros((2, 2, 3), np.uint8), 0, 0.0, 1)], "continuation 0 or a truncation"),
        ([Transition(np.zeros((3, 2, 3), np.uint8), 0, 0.0, 0)], "observation shape"),
        (
            [Transition(np.zeros((2, 2, 3), np.uint8), 0, 0.0, 0), Transition(np.zeros((2, 2, 3), np.uint8), 0, 0.0, 0)],
            "terminal step inside",
        ),
        ([], "empty"),
    ],
)
def test_malformed_episodes(bad, match):
    with pytest.raises(ValueError, match=match):
        ReplayBuffer(10, (2, 2, 3)).add_episode(bad)


def test_truncated_episode_accepted():
    buf = ReplayBuffer(10, (2, 2, 3))
    eps = episode(3)
    eps[-1] = Transition(eps[-1].observation, 0, 0.0, 1, truncated=True)
    buf.add_episode(eps)
    assert len(buf) == 3
