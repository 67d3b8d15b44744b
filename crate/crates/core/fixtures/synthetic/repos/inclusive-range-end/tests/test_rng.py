from rng import inclusive_range


def test_empty_when_reversed():
    assert inclusive_range(3, 1) == []
