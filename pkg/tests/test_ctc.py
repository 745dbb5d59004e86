import itertools
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lcasr.ctc import (
    PosteriorLattice,
    ctc_greedy_decode,
    ctc_loss,
    ctc_loss_torch,
    hypothesis_words,
    infeasible,
)
from lcasr.tokenizer import bpe_train


def _random_lp(rng, T, V):
    x = rng.standard_normal((T, V)) * 2
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def _collapse(path, blank):
    out, prev = [], None
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return out


def brute_force(lp, targets, blank):
    T, V = lp.shape
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if _collapse(path, blank) == list(targets):
            total += np.exp(sum(lp[t, c] for t, c in enumerate(path)))
    return -np.log(total) if total > 0 else np.inf


def test_single_frame():
    lp = np.log(np.array([[0.2, 0.5, 0.3]]))
    loss, _ = ctc_loss(lp, [1], blank=2)
    assert loss == pytest.approx(-np.log(0.5), abs=1e-12)


def test_two_frames_by_hand():
    p = np.array([[0.6, 0.4], [0.3, 0.7]])  # columns: a, blank
    loss, _ = ctc_loss(np.log(p), [0], blank=1)
    want = -np.log(p[0, 0] * p[1, 0] + p[0, 0] * p[1, 1] + p[0, 1] * p[1, 0])
    assert loss == pytest.approx(want, abs=1e-12)


def test_empty_target_is_all_blank():
    rng = np.random.default_rng(0)
    lp = _random_lp(rng, 5, 3)
    loss, grad = ctc_loss(lp, [], blank=2)
    assert loss == pytest.approx(-lp[:, 2].sum(), abs=1e-12)
    assert np.allclose(grad[:, 2], -1) and np.allclose(grad[:, :2], 0)


def test_brute_force_sample():
    rng = np.random.default_rng(1)
    for _ in range(30):
        T, V = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        blank = V - 1
        tlen = int(rng.integers(0, 4))
        targets = list(rng.integers(0, V - 1, size=tlen)) if V > 1 else []
        lp = _random_lp(rng, T, V)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            loss, _ = ctc_loss(lp, targets, blank)
        want = brute_force(lp, targets, blank)
        if np.isinf(want):
            assert np.isinf(loss)
        else:
            assert abs(loss - want) <= 1e-6


def test_infeasible_signal():
    before = infeasible.count
    lp = _random_lp(np.random.default_rng(2), 2, 3)
    with pytest.warns(UserWarning, match="infeasible"):
        loss, grad = ctc_loss(lp, [0, 0], blank=2)  # repeated label needs a blank in between
    assert loss == np.inf and not grad.any()
    assert infeasible.count == before + 1


def test_blank_in_targets_rejected():
    with pytest.raises(ValueError):
        ctc_loss(np.zeros((3, 3)), [2], blank=2)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 12))
    lp = _random_lp(rng, T, 5)
    targets = list(rng.integers(0, 4, size=int(rng.integers(0, (T + 1) // 2 + 1))))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        loss, _ = ctc_loss(lp, targets, 4)
    assert loss >= 0


def test_torch_bridge_gradient():
    rng = np.random.default_rng(3)
    x = torch.tensor(rng.standard_normal((6, 4)), requires_grad=True)
    loss = ctc_loss_torch(torch.log_softmax(x, -1), [0, 1], 3)
    loss.backward()
    _, g = ctc_loss(torch.log_softmax(x, -1).detach().numpy(), [0, 1], 3)
    # chain rule through log_softmax by hand
    p = torch.softmax(x, -1).detach().numpy()
    want = g - p * g.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(x.grad.numpy(), want, atol=1e-12)


def _lattice(path, V, blank, hop=0.08):
    lp = np.full((len(path), V), -20.0)
    lp[np.arange(len(path)), path] = 0.0
    lp -= np.logaddexp.reduce(lp, axis=1, keepdims=True)
    return PosteriorLattice(lp, blank, hop)


class TestGreedy:
    def test_collapse(self):
        toks, _ = ctc_greedy_decode(_lattice([0, 0, 2, 0], 3, 2))
        assert toks == [0, 0]

    def test_all_blank(self):
        assert ctc_greedy_decode(_lattice([2, 2, 2], 3, 2)) == ([], [])

    def test_spans(self):
        toks, spans = ctc_greedy_decode(_lattice([2, 1, 1, 2, 0], 3, 2))
        assert toks == [1, 0] and spans == [(1, 2), (4, 4)]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=40))
    def test_spans_ordered(self, path):
        _, spans = ctc_greedy_decode(_lattice(path, 4, 3))
        for (a, b), (c, d) in zip(spans, spans[1:]):
            assert a <= b < c <= d

    def test_words_and_times(self):
        v = bpe_train(["ka mo ka mo"], 512)
        ids = v.encode("ka mo")
        path = [v.blank_id, ids[0], v.blank_id, v.blank_id, ids[1], ids[1]]
        lat = _lattice(path, v.size, v.blank_id, hop=0.1)
        words = hypothesis_words(*ctc_greedy_decode(lat), v, lat.hop_seconds)
        assert [w for w, _, _ in words] == ["ka", "mo"]
        assert words[1][1] == pytest.approx(0.4) and words[1][2] == pytest.approx(0.6)


class TestLattice:
    def test_dump_round_trip(self, tmp_path):
        lat = PosteriorLattice(_random_lp(np.random.default_rng(4), 7, 5).astype(np.float32), 4, 0.08)
        lat.dump(tmp_path / "x.lclt")
        back = PosteriorLattice.load(tmp_path / "x.lclt")
        np.testing.assert_array_equal(back.log_probs, lat.log_probs)
        assert back.blank_id == 4 and back.hop_seconds == 0.08

    def test_header_layout(self, tmp_path):
        import json
        import struct

        lat = PosteriorLattice(np.log(np.full((3, 2), 0.5, np.float32)), 1, 0.04)
        lat.dump(tmp_path / "x.lclt")
        data = (tmp_path / "x.lclt").read_bytes()
        assert data[:4] == b"LCLT"
        (n,) = struct.unpack("<I", data[4:8])
        header = json.loads(data[8 : 8 + n])
        assert header == {"T": 3, "V": 2, "blank_id": 1, "hop_seconds": 0.04}
        rows = np.frombuffer(data[8 + n :], dtype="<f4").reshape(3, 2)
        np.testing.assert_array_equal(rows, lat.log_probs)

    def test_validate(self):
        with pytest.raises(ValueError):
            PosteriorLattice(np.zeros((2, 3), np.float32), 2, 0.1).validate()
