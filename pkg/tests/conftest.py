import numpy as np
import pytest

from cachemux.workload import CostModel, QueryCatalog


def catalog(freq, means_or_models, bounds=None):
    """Catalog from frequencies and either constant means or explicit cost models."""
    rows = []
    for row in means_or_models:
        rows.append(tuple(m if isinstance(m, CostModel) else CostModel.constant(m) for m in row))
    return QueryCatalog(np.asarray(freq, dtype=float), tuple(rows), bounds=bounds)


@pytest.fixture
def three_query():
    # P = (0.5, 0.3, 0.2), one model with costs (1, 10, 10)
    return catalog([0.5, 0.3, 0.2], [[1.0], [10.0], [10.0]], bounds=(1.0, 10.0))
