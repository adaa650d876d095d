import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldpfl.algorithms import constant_schedule, mbsgd_run
from ldpfl.core import ClientDataset, PreconditionError, federation
from ldpfl.fedsim import (
    DISJOINT,
    WITH_REPLACEMENT,
    AvailabilityModel,
    BudgetExhausted,
    OnePassCursor,
    availability_moments,
    batch_sizes,
    client_message,
    ordered_map,
    read_transcript,
    regime,
    sample_round,
    server_average,
    shuffle_stage,
    stream,
    top_mean_rms,
    write_transcript,
)
from ldpfl.losses import mean_grad, quadratic_loss
from ldpfl.oracles import quadratic_benchmark

M_PRIME_12 = 1.264911064067352


def test_availability_moments_examples():
    assert availability_moments(AvailabilityModel.fixed(5)) == (5.0, 5.0)
    M, Mp = availability_moments(AvailabilityModel.uniform_range(1, 2))
    assert M == pytest.approx(4 / 3, rel=1e-15)
    assert Mp == pytest.approx(M_PRIME_12, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 50), st.floats(0.01, 1.0)), min_size=1, max_size=6))
def test_m_at_least_m_prime(pairs):
    values = [v for v, _ in pairs]
    probs = np.array([p for _, p in pairs])
    probs = probs / probs.sum()
    probs[-1] = 1.0 - probs[:-1].sum()
    if probs[-1] < 0:
        return
    M, Mp = availability_moments(AvailabilityModel.categorical(values, probs))
    assert M >= Mp * (1 - 1e-12)


def test_availability_validation():
    with pytest.raises(PreconditionError):
        AvailabilityModel.categorical([1, 2], [0.5, 0.6])
    with pytest.raises(PreconditionError):
        AvailabilityModel.fixed(0)
    with pytest.raises(PreconditionError):
        sample_round(stream(0), AvailabilityModel.fixed(4), 3)


def test_sample_round_full_set():
    np.testing.assert_array_equal(sample_round(stream(0), AvailabilityModel.fixed(4), 4), np.arange(4))


def test_sample_round_single_client_is_uniform():
    rng = stream(1)
    counts = Counter(int(sample_round(rng, AvailabilityModel.fixed(1), 3)[0]) for _ in range(30_000))
    for i in range(3):
        assert abs(counts[i] / 30_000 - 1 / 3) < 0.01


def test_sample_round_pairs_are_uniform():
    rng = stream(2)
    counts = Counter(tuple(sample_round(rng, AvailabilityModel.fixed(2), 3)) for _ in range(30_000))
    assert set(counts) == {(0, 1), (0, 2), (1, 2)}
    for c in counts.values():
        assert abs(c / 30_000 - 1 / 3) < 0.01


def test_streams_are_keyed():
    a = stream(7, 1, 2, 3).standard_normal(4)
    np.testing.assert_array_equal(a, stream(7, 1, 2, 3).standard_normal(4))
    assert not np.array_equal(a, stream(7, 1, 2, 4).standard_normal(4))
    assert not np.array_equal(a, stream(8, 1, 2, 3).standard_normal(4))


def _quad_client(n=5, d=2, seed=0):
    return ClientDataset(np.random.default_rng(seed).normal(size=(n, d)))


def test_full_batch_message_is_exact_gradient():
    c = _quad_client()
    loss = quadratic_loss(10.0, c.features)
    w = np.array([0.3, -0.1])
    msg = client_message(c, loss, w, c.n, WITH_REPLACEMENT, 0.0, stream(0))
    np.testing.assert_allclose(msg, mean_grad(loss, w, c.features), rtol=1e-15)


def test_single_sample_message_is_unbiased():
    c = _quad_client()
    loss = quadratic_loss(10.0, c.features)
    w = np.array([0.3, -0.1])
    rng = stream(3)
    draws = np.array([client_message(c, loss, w, 1, WITH_REPLACEMENT, 0.0, rng) for _ in range(100_000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - mean_grad(loss, w, c.features)) <= 3 * se)


def test_noise_covariance():
    c = ClientDataset(np.zeros((4, 2)))
    loss = quadratic_loss(10.0)
    rng = stream(4)
    draws = np.array([client_message(c, loss, np.zeros(2), 2, WITH_REPLACEMENT, 4.0, rng) for _ in range(100_000)])
    np.testing.assert_allclose(np.cov(draws.T), 4 * np.eye(2), atol=0.08)


def test_disjoint_mode_consumes_blocks_once():
    c = _quad_client(n=10)
    loss = quadratic_loss(10.0, c.features)
    cursor = OnePassCursor(10, stream(5))
    for _ in range(3):
        client_message(c, loss, np.zeros(2), 3, DISJOINT, 0.0, stream(6), cursor)
    used = np.concatenate(cursor.used)
    assert len(used) == 9 and len(set(used.tolist())) == 9
    with pytest.raises(BudgetExhausted, match="one-pass budget exhausted"):
        client_message(c, loss, np.zeros(2), 3, DISJOINT, 0.0, stream(6), cursor)


def test_shuffle_stage_is_uniform_and_preserves_multiset():
    assert shuffle_stage(["a"], stream(0)) == ["a"]
    rng = stream(8)
    msgs = ["a", "b", "c"]
    counts = Counter(tuple(shuffle_stage(msgs, rng)) for _ in range(60_000))
    assert set(counts) == set(itertools.permutations(msgs))
    for c in counts.values():
        assert abs(c / 60_000 - 1 / 6) < 0.01
    assert sorted(shuffle_stage(list(range(20)), rng)) == list(range(20))


def test_batch_sizes_equalize_ratios():
    fed = federation([_quad_client(n=10), _quad_client(n=25), _quad_client(n=10, seed=2)])
    assert batch_sizes(fed, 4) == [4, 10, 4]


def test_ordered_map_and_server_average():
    assert ordered_map(lambda x: x * x, range(10), workers=4) == [x * x for x in range(10)]
    np.testing.assert_array_equal(server_average([np.ones(2), 3 * np.ones(2)]), [2.0, 2.0])


def test_top_mean_rms_and_regime():
    assert top_mean_rms([1.0, 3.0, 2.0], AvailabilityModel.fixed(1)) == 3.0
    assert top_mean_rms([1.0, 3.0, 2.0], AvailabilityModel.fixed(3)) == pytest.approx(2.0)
    assert regime(1.0, 5.0, 4.0, 2.0) == (2.0, 1.0)
    assert regime(10.0, 1.0, 4.0, 2.0) == (4.0, 1.0)


def _run(workers, fed, loss, model, seed=11):
    return mbsgd_run(fed, loss, 0.5, constant_schedule(6, 0.2), model, seed=seed, K=3,
                     workers=workers, record_transcript=True)


def test_transcript_completeness_and_worker_independence(tmp_path):
    fed, loss = quadratic_benchmark(N=6, n=8, d=3, seed=0)
    model = AvailabilityModel.uniform_range(2, 5)
    a = _run(1, fed, loss, model)
    b = _run(4, fed, loss, model)
    assert sum(t.M_r for t in a.transcripts) == sum(len(t.messages) for t in a.transcripts)
    assert len(a.transcripts) == 6
    assert [t.active_set for t in a.transcripts] == [t.active_set for t in b.transcripts]
    for ta, tb in zip(a.transcripts, b.transcripts):
        for ma, mb in zip(ta.messages, tb.messages):
            np.testing.assert_array_equal(ma, mb)
    np.testing.assert_array_equal(a.w_hat, b.w_hat)
    path = tmp_path / "t.txt"
    write_transcript(path, a.transcripts)
    back = read_transcript(path)
    assert [t.active_set for t in back] == [t.active_set for t in a.transcripts]
    for ta, tb in zip(a.transcripts, back):
        for ma, mb in zip(ta.messages, tb.messages):
            np.testing.assert_array_equal(ma, mb)


def test_read_transcript_needs_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 0 1 0.5\n")
    with pytest.raises(ValueError, match="header"):
        read_transcript(path)
