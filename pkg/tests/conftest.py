import numpy as np
import pytest

from tweedievec.cooccur import RECORD_DTYPE, CooccurrenceStore
from tweedievec.model import SparseRow


def dense_to_rows(y: np.ndarray) -> list[SparseRow]:
    """SparseRow list for a dense nonnegative matrix."""
    rows = []
    for i in range(y.shape[0]):
        nz = np.nonzero(y[i])[0]
        rows.append(SparseRow(row_id=i, cols=nz, weights=y[i, nz]))
    return rows


def dense_to_cols(y: np.ndarray) -> list[SparseRow]:
    """Column-major view: SparseRow j holds column j's entries."""
    return dense_to_rows(y.T)


def write_store_from_dense(y: np.ndarray, path, window: int = 0) -> CooccurrenceStore:
    n = y.shape[0]
    r, c = np.nonzero(y)
    recs = np.empty(r.size, dtype=RECORD_DTYPE)
    recs["row"] = r
    recs["col"] = c
    recs["weight"] = y[r, c]
    return CooccurrenceStore.write(path, n=n, window=window, total_tokens=0,
                                   records=[recs], n_records=recs.size)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
