import numpy as np
import pytest

from facells_kit.sketch import Drawing


def random_drawing(rng: np.random.Generator, n_strokes: int | None = None,
                   width: float = 100.0, height: float = 80.0,
                   max_points: int = 8, id: str = "rand") -> Drawing:
    """Seeded random drawing: uniform points, 2..max_points per stroke."""
    if n_strokes is None:
        n_strokes = int(rng.integers(1, 9))
    strokes = []
    for _ in range(n_strokes):
        k = int(rng.integers(2, max_points + 1))
        pts = np.column_stack([rng.uniform(0, width, k), rng.uniform(0, height, k)])
        strokes.append(pts)
    return Drawing(id, width, height, strokes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
