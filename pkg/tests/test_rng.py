import numpy as np
import pytest
from scipy import stats

from critcascade.rng import Purpose, derive_stream, stream_state


def test_same_triple_reproduces_stream():
    a = derive_stream(7, 3, Purpose.SPINE).random(1000)
    b = derive_stream(7, 3, Purpose.SPINE).random(1000)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("other", [(8, 3, Purpose.SPINE), (7, 4, Purpose.SPINE), (7, 3, Purpose.SIDE)])
def test_changing_any_index_changes_stream(other):
    a = derive_stream(7, 3, Purpose.SPINE).random(100)
    b = derive_stream(*other).random(100)
    assert not np.array_equal(a, b)


def test_counter_layout():
    k0, k1, c0, c1, c2, c3 = stream_state(11, 5, Purpose.POOL)
    assert (c0, c1, c2, c3) == (0, 0, 5, int(Purpose.POOL))
    assert (k0, k1) == stream_state(11, 99, 0)[:2]


def test_negative_indices_rejected():
    with pytest.raises(ValueError):
        stream_state(1, -1, 0)


def test_neighbouring_streams_uncorrelated():
    # 64 adjacent replica streams: pairwise correlations of 10^4 uniforms
    # should look like draws from N(0, 1/10^4)
    x = np.stack([derive_stream(2024, r).random(10_000) for r in range(64)])
    c = np.corrcoef(x)[np.triu_indices(64, 1)]
    z = c * np.sqrt(10_000)
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_streams_are_uniform():
    x = derive_stream(5, 0, Purpose.TREE).random(50_000)
    assert stats.kstest(x, "uniform").pvalue > 1e-3
