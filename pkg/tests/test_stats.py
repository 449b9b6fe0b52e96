import logging
from pathlib import Path

import pytest
from numpy import arange, sqrt
from pandas import Index, Series, read_csv
from pytest import approx
from scipy.stats import norm

from arwaves.stats import SampleStats


@pytest.fixture
def stats() -> SampleStats:
    index = Index([5, 6, 7, 8], name="seed")
    return SampleStats(data=Series([1.0, 2.0, 3.0, 4.0], index=index, name="length"))


def test_moments(stats: SampleStats) -> None:
    assert stats.n_samples == 4
    assert stats.mean == approx(2.5)
    assert stats.variance == approx(5.0 / 3.0)
    assert stats.std_error_mean == approx(sqrt(5.0 / 12.0))
    assert stats.std_error_variance >= 0.0
    assert stats.seeds == range(5, 9)


def test_too_few_samples(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.ERROR)
    with pytest.raises(ValueError):
        SampleStats(data=Series([1.0]))
    assert "Need at least two samples" in caplog.text


def test_ks_test_normal_quantiles() -> None:
    n = 400
    data = Series(norm.ppf((arange(n) + 0.5) / n, loc=3.0, scale=0.5))
    assert SampleStats(data=data).ks_test() > 0.9


def test_ks_test_constant() -> None:
    assert SampleStats(data=Series([2.0, 2.0, 2.0])).ks_test() == 0.0


def test_to_csv(stats: SampleStats, tmp_path: Path) -> None:
    path = tmp_path / "lengths.csv"
    stats.to_csv(path)
    frame = read_csv(path)
    assert list(frame.columns) == ["seed", "length"]
    assert frame["seed"].tolist() == [5, 6, 7, 8]
    assert frame["length"].tolist() == [1.0, 2.0, 3.0, 4.0]


def test_to_dict(stats: SampleStats) -> None:
    summary = stats.to_dict()
    assert summary["seeds"] == [5, 9]
    assert summary["mean"] == approx(2.5)
