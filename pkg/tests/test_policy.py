import pytest

from elastictrain.runtime.policy import InvalidBatch, detect_straggler, split_batch, switch_delay


def test_split_even():
    assert split_batch(384, 4) == [96, 96, 96, 96]


def test_split_remainder_to_low_ranks():
    assert split_batch(384, 5) == [77, 77, 77, 77, 76]
    assert sum(split_batch(1001, 7)) == 1001


def test_split_invalid():
    with pytest.raises(InvalidBatch):
        split_batch(3, 4)


def test_switch_delay():
    assert switch_delay(0.5, 0.25) == 2
    assert switch_delay(0.5, 0.8) == 1
    assert switch_delay(0.5, 0.0) == 1


def window(n, slow=None, ratio=1.33, extra=None):
    out = []
    for _ in range(n):
        d = {"a": 1.0, "b": 1.0, "c": 1.0, "d": 1.0}
        if slow:
            d[slow] = ratio
        if extra:
            d.update(extra)
        out.append(d)
    return out


def test_straggler_flagged_after_ten():
    assert detect_straggler(window(10, "c")) == "c"


def test_nine_batches_not_enough():
    assert detect_straggler(window(9, "c")) is None
    assert detect_straggler(window(5) + window(9, "c")) is None


def test_exactly_threshold_not_flagged():
    # median of the five is 1.0, so 1.2 sits exactly on the threshold
    w = window(10, extra={"c": 1.2, "d": 1.2, "e": 1.0})
    assert detect_straggler(w) is None
    w = window(10, extra={"c": 1.2000001, "d": 1.2, "e": 1.0})
    assert detect_straggler(w) == "c"


def test_interrupted_streak():
    w = window(10, "c")
    w[4]["c"] = 1.0
    assert detect_straggler(w) is None
