import numpy as np
import pandas as pd
import pytest

from flatformer.data import TimeSeriesDataset, split_dataset


@pytest.fixture
def csv_factory(tmp_path):
    """Write a small dataset CSV and return its path."""

    def make(values: np.ndarray, names=None, with_dates=True, filename="data.csv"):
        n, t = values.shape
        names = names or [f"v{i}" for i in range(n)]
        frame = pd.DataFrame(values.T, columns=names)
        if with_dates:
            frame.insert(0, "date", pd.date_range("2020-01-01", periods=t, freq="h"))
        path = tmp_path / filename
        frame.to_csv(path, index=False)
        return path

    return make


def make_dataset(values: np.ndarray, ratio=(0.7, 0.1)) -> TimeSeriesDataset:
    ds = TimeSeriesDataset(
        values=np.asarray(values, dtype=np.float64),
        variate_names=[f"v{i}" for i in range(values.shape[0])],
    )
    return split_dataset(ds, ratio=ratio)


@pytest.fixture
def random_dataset():
    def make(n_variates=3, n_steps=400, seed=0, ratio=(0.7, 0.1)):
        rng = np.random.default_rng(seed)
        return make_dataset(rng.normal(size=(n_variates, n_steps)), ratio=ratio)

    return make
