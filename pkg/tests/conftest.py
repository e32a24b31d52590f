import numpy as np
import pytest

from furnset.ingest import Catalog, CatalogEntry, EmbeddingMatrix


def make_catalog(categories):
    """Catalog with ids ``id000..`` and the given per-identity categories."""
    return Catalog(CatalogEntry(f"id{n:03d}", c) for n, c in enumerate(categories))


def random_matrix(rng, rows, dim, prefix="id"):
    ids = tuple(f"{prefix}{n:03d}" for n in range(rows))
    return EmbeddingMatrix(ids, rng.normal(size=(rows, dim)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import helpers

    if helpers.VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in helpers.VERDICTS:
            terminalreporter.write_line(line)
