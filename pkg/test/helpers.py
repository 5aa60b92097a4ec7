from __future__ import annotations

from typing import Any

import numpy as np

from hierrisk.config import HyperParams, validate_config
from hierrisk.grid import GridSpec
from hierrisk.hierarchy import GranularityHierarchy, uniform_clustering
from hierrisk.ingest import Dataset
from hierrisk.pipeline import PreparedData, part_numbers_for, prepare
from hierrisk.synthetic import generate_synthetic_city

TINY_TILE = 8


def tiny_params(**overrides: Any) -> HyperParams:
    """A two-level network small enough for CPU tests on a 3x3 grid."""
    values: dict[str, Any] = {
        "p": 2,
        "q": 1,
        "n_levels": 2,
        "top_k": 2,
        "model_width": 8,
        "conv_layers": 1,
        "attention_blocks": 1,
        "ff_width": 8,
        "rs_channels": 2,
        "rs_tile": TINY_TILE,
        "rs_conv_channels": (2,),
        "ae_channels": (2,),
        "ae_epochs": 2,
        "batch_size": 16,
        "epochs": 2,
        "learning_rate": 1e-3,
        "seed": 0,
    }
    values.update(overrides)
    return validate_config(values)


def tiny_city(seed: int = 0, rows: int = 3, cols: int = 3, weeks: int = 2) -> Dataset:
    return generate_synthetic_city(
        seed, GridSpec(rows=rows, cols=cols), weeks, q=1, tile_size=TINY_TILE
    )


def tiny_hierarchy(dataset: Dataset, h: HyperParams) -> GranularityHierarchy:
    parts = part_numbers_for(h, dataset.n_regions)
    if not parts:
        return GranularityHierarchy(level_sizes=(dataset.n_regions,), partitions=())
    return uniform_clustering(dataset.grid, parts)


def tiny_prepared(h: HyperParams | None = None, dataset: Dataset | None = None) -> PreparedData:
    h = h or tiny_params()
    dataset = dataset or tiny_city()
    return prepare(dataset, h, tiny_hierarchy(dataset, h))


def one_hot_rows(labels: list[int], n_coarse: int) -> np.ndarray:
    out = np.zeros((len(labels), n_coarse))
    out[np.arange(len(labels)), labels] = 1.0
    return out
