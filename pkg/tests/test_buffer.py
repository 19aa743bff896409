import copy

import numpy as np
import pytest
from scipy import stats

from flowguard import nn
from flowguard.buffer import Batch, BufferEntry, BufferError, ReservoirBuffer


def entry(i, y=None):
    return BufferEntry(np.array([float(i), 0.5]), i % 2 if y is None else y, np.array([float(i), -float(i)]))


def fill(buf, n, rng, start=0):
    for i in range(start, start + n):
        buf.offer(entry(i), rng)


def test_fill_phase_keeps_everything():
    buf = ReservoirBuffer(5)
    rng = nn.make_rng(0)
    fill(buf, 3, rng)
    assert len(buf) == 3 and buf.seen == 3
    assert [e.x[0] for e in buf.entries] == [0, 1, 2]


def test_capacity_zero_stays_empty():
    buf = ReservoirBuffer(0)
    rng = nn.make_rng(0)
    fill(buf, 50, rng)
    assert len(buf) == 0 and buf.seen == 50
    assert len(buf.sample(8, rng)) == 0


def test_never_exceeds_capacity():
    buf = ReservoirBuffer(7)
    fill(buf, 500, nn.make_rng(1))
    assert len(buf) == 7 and buf.seen == 500


def test_negative_capacity_rejected():
    with pytest.raises(BufferError):
        ReservoirBuffer(-1)


@pytest.mark.parametrize("bad", [
    dict(z=np.zeros(3)),
    dict(x=np.array([np.nan])),
    dict(y=2),
])
def test_entry_validation(bad):
    kw = dict(x=np.zeros(2), y=0, z=np.zeros(2)) | bad
    with pytest.raises(BufferError):
        BufferEntry(**kw)


def test_inclusion_frequency_small_scale():
    # capacity 10, stream 100: inclusion probability 0.1 for every position
    rng = nn.make_rng(2)
    items = [entry(i) for i in range(100)]
    counts = np.zeros(100)
    trials = 3000
    for _ in range(trials):
        buf = ReservoirBuffer(10)
        for e in items:
            buf.offer(e, rng)
        for e in buf.entries:
            counts[int(e.x[0])] += 1
    freq = counts / trials
    sigma = np.sqrt(0.1 * 0.9 / trials)
    assert np.abs(freq - 0.1).max() < 5 * sigma
    assert stats.chisquare(counts).pvalue > 0.001


def test_sample_uniform():
    rng = nn.make_rng(3)
    buf = ReservoirBuffer(10)
    fill(buf, 10, rng)
    batch = buf.sample(100_000, rng)
    freq = np.bincount(batch.x[:, 0].astype(int), minlength=10) / 100_000
    np.testing.assert_allclose(freq, 0.1, atol=0.01)
    assert batch.z.shape == (100_000, 2)


def test_sample_two_batches_independent():
    rng = nn.make_rng(4)
    buf = ReservoirBuffer(50)
    fill(buf, 50, rng)
    a, b = buf.sample_two_batches(20, rng)
    assert len(a) == len(b) == 20
    assert not np.array_equal(a.x, b.x)


def test_empty_batch():
    b = Batch.empty(34)
    assert len(b) == 0 and b.x.shape == (0, 34)


def test_snapshot_round_trip():
    rng = nn.make_rng(5)
    buf = ReservoirBuffer(10)
    fill(buf, 37, rng)
    back = ReservoirBuffer.restore(buf.snapshot())
    assert back.capacity == 10 and back.seen == 37
    for a, b in zip(buf.entries, back.entries):
        assert a.y == b.y
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.z, b.z)


def test_restore_continues_like_original():
    rng = nn.make_rng(6)
    buf = ReservoirBuffer(10)
    fill(buf, 1000, rng)
    back = ReservoirBuffer.restore(buf.snapshot())
    rng_b = copy.deepcopy(rng)
    fill(buf, 500, rng, start=1000)
    fill(back, 500, rng_b, start=1000)
    assert [e.x[0] for e in buf.entries] == [e.x[0] for e in back.entries]


def test_restored_offer_rate():
    # after seen=1000 with capacity 10 the next item enters with probability 10/1001
    base = ReservoirBuffer(10)
    fill(base, 1000, nn.make_rng(7))
    snap = base.snapshot()
    rng = nn.make_rng(8)
    trials = 40_000
    hits = sum(ReservoirBuffer.restore(snap).offer(entry(5000), rng) for _ in range(trials))
    p = 10 / 1001
    assert abs(hits / trials - p) < 4 * np.sqrt(p * (1 - p) / trials)


@pytest.mark.parametrize("mutate", [
    lambda s: s.update(seen=3),
    lambda s: s.update(y=s["y"] + 2),
    lambda s: s.update(z=s["z"][:, :1]),
    lambda s: s.pop("x"),
])
def test_corrupt_snapshot_rejected(mutate):
    buf = ReservoirBuffer(5)
    fill(buf, 9, nn.make_rng(9))
    snap = buf.snapshot()
    mutate(snap)
    with pytest.raises(BufferError):
        ReservoirBuffer.restore(snap)
