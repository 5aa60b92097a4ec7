import numpy as np
import pytest

from hierrisk.grid import GridSpec


def test_index_and_cell_are_row_major() -> None:
    grid = GridSpec(rows=3, cols=4)
    assert grid.n_regions == 12
    assert grid.index(1, 2) == 6
    assert grid.cell(6) == (1, 2)


def test_out_of_grid_cell_rejected() -> None:
    grid = GridSpec(rows=2, cols=2)
    with pytest.raises(ValueError):
        grid.index(2, 0)
    with pytest.raises(ValueError):
        grid.cell(4)


@pytest.mark.parametrize("rows, cols", [(0, 3), (3, 0)])
def test_empty_grid_rejected(rows: int, cols: int) -> None:
    with pytest.raises(ValueError):
        GridSpec(rows=rows, cols=cols)


def test_center_locates_back_to_region() -> None:
    grid = GridSpec(rows=4, cols=5)
    for region in range(grid.n_regions):
        assert grid.locate(*grid.center(region)) == region


def test_points_outside_bounds() -> None:
    grid = GridSpec(rows=2, cols=2)
    min_lat, min_lon, max_lat, max_lon = grid.bounds()
    assert grid.locate(min_lat - 0.001, min_lon) is None
    assert grid.locate(max_lat + 0.001, max_lon) is None


def test_locate_many_matches_locate() -> None:
    grid = GridSpec(rows=3, cols=3)
    centers = [grid.center(r) for r in range(grid.n_regions)]
    lat = np.array([c[0] for c in centers] + [0.0, np.nan])
    lon = np.array([c[1] for c in centers] + [0.0, 0.0])
    out = grid.locate_many(lat, lon)
    assert out.tolist() == list(range(9)) + [-1, -1]


def test_neighbors_and_edges() -> None:
    grid = GridSpec(rows=2, cols=3)
    assert grid.neighbors(0) == [1, 3]
    assert grid.neighbors(4) == [1, 3, 5]
    assert grid.edges() == [(0, 1), (0, 3), (1, 2), (1, 4), (2, 5), (3, 4), (4, 5)]
