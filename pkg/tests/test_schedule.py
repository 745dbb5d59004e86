import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcasr.schedule import WarmupSchedule, cosine_lr, plan_batches, warmup_length

SCHED = WarmupSchedule(5.12, 5000, 3600.0)


@pytest.mark.parametrize(
    "r, want",
    [(0, 10.24), (4999, 10.24), (5000, 15.36), (25000, 5.12 + 5.12 * 32), (10**7, 3600.0)],
)
def test_warmup_values(r, want):
    assert warmup_length(r, SCHED) == pytest.approx(want, abs=1e-12)


def test_clamped_at_s_max():
    assert warmup_length(10 * 5000, WarmupSchedule(5.12, 5000, 164.0)) == 164.0


def test_stage_sequence():
    s = WarmupSchedule(1.0, 1, 1e9)
    assert [warmup_length(r, s) for r in range(4)] == [2.0, 3.0, 5.0, 9.0]


def test_schedule_validation():
    with pytest.raises(ValueError):
        WarmupSchedule(0.0, 10, 20.0)
    with pytest.raises(ValueError):
        WarmupSchedule(1.0, 0, 20.0)
    with pytest.raises(ValueError):
        WarmupSchedule(30.0, 10, 20.0)
    with pytest.raises(ValueError):
        warmup_length(-1, SCHED)


@given(a=st.integers(0, 10**8), b=st.integers(0, 10**8))
def test_non_decreasing(a, b):
    lo, hi = sorted((a, b))
    assert warmup_length(lo, SCHED) <= warmup_length(hi, SCHED) <= SCHED.s_max


@pytest.mark.parametrize("seq, size", [(3600.0, 1), (10.24, 351), (20.48, 175), (1800.0, 2), (3000.0, 1)])
def test_batch_examples(seq, size):
    assert plan_batches(seq, 3600.0).batch_size == size


def test_batch_too_long():
    with pytest.raises(ValueError):
        plan_batches(3600.1, 3600.0)
    with pytest.raises(ValueError):
        plan_batches(0.0)


@given(seq=st.floats(0.01, 3600.0))
def test_batch_within_cap(seq):
    plan = plan_batches(seq)
    assert plan.batch_size >= 1 and plan.batch_size * seq <= 3600.0
    assert (plan.batch_size + 1) * seq > 3600.0


@given(r=st.integers(0, 10**6))
def test_every_warmup_length_fits(r):
    seq = warmup_length(r, SCHED)
    plan = plan_batches(seq)
    assert plan.batch_size * seq <= 3600.0


class TestCosine:
    def test_ramp_end_and_tail(self):
        assert cosine_lr(10, 10, 110, 1e-3) == 1e-3
        assert cosine_lr(110, 10, 110, 1e-3) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(60, 10, 110, 1e-3) == pytest.approx(5e-4)

    def test_ramp_linear(self):
        assert cosine_lr(0, 10, 110, 1.0) == 0.0
        assert cosine_lr(5, 10, 110, 1.0) == 0.5

    def test_no_decay_phase(self):
        assert cosine_lr(10, 10, 10, 2.0) == 2.0
        assert cosine_lr(0, 0, 10, 2.0) == 2.0

    def test_errors(self):
        with pytest.raises(ValueError):
            cosine_lr(0, 11, 10, 1.0)
        with pytest.raises(ValueError):
            cosine_lr(11, 1, 10, 1.0)

    @given(step=st.integers(0, 1000))
    def test_bounds(self, step):
        lr = cosine_lr(step, 100, 1000, 3.0)
        assert 0.0 <= lr <= 3.0
        if step >= 100:
            assert lr == pytest.approx(1.5 * (1 + math.cos(math.pi * (step - 100) / 900)))
