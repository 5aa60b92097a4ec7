import math

import numpy as np
import pandas as pd
import pytest

from hierrisk.metrics import (
    MetricReport,
    evaluate_predictions,
    interval_frame,
    mean_average_precision,
    rank_regions,
    recall,
    rmse,
    rush_hour_filter,
    write_interval_csv,
)
from hierrisk.window import DataError

# Three intervals over four regions; the middle one is accident-free.
TRUTHS = np.array(
    [
        [0.0, 3.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0],
        [2.0, 0.0, 0.0, 0.0],
    ]
)
PREDS = np.array(
    [
        [0.1, 2.0, 1.5, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0],
    ]
)


def test_oracle_fixture() -> None:
    assert rmse(PREDS, TRUTHS) == pytest.approx(math.sqrt(1.565 / 3), abs=1e-9)
    assert recall(PREDS, TRUTHS) == pytest.approx(0.75, abs=1e-9)
    assert mean_average_precision(PREDS, TRUTHS) == pytest.approx(0.75, abs=1e-9)


def test_rmse_perfect_and_offset() -> None:
    assert rmse(TRUTHS, TRUTHS) == 0.0
    assert rmse(TRUTHS + 0.5, TRUTHS) == pytest.approx(0.5)


def test_rmse_worked_value() -> None:
    assert rmse(np.array([[1.0, 3.0]]), np.zeros((1, 2))) == pytest.approx(math.sqrt(5), abs=1e-9)


def test_rmse_ignores_row_order() -> None:
    rng = np.random.default_rng(3)
    preds = rng.random((12, 5))
    truths = rng.integers(0, 4, (12, 5)).astype(np.float64)
    for _ in range(5):
        order = rng.permutation(12)
        assert rmse(preds[order], truths[order]) == pytest.approx(rmse(preds, truths), abs=1e-12)


def test_recall_half() -> None:
    truth = np.array([[0.0, 1.0, 0.0, 2.0]])
    pred = np.array([[0.0, 0.9, 0.8, 0.1]])
    assert recall(pred, truth) == 0.5


def test_recall_perfect_ranking() -> None:
    truth = np.array([[0.0, 1.0, 0.0, 2.0]])
    assert recall(truth, truth) == 1.0
    assert mean_average_precision(truth, truth) == 1.0


def test_map_counts_only_first_ranks() -> None:
    truth = np.array([[1.0, 0.0, 1.0, 0.0]])
    pred = np.array([[0.9, 0.8, 0.7, 0.0]])
    assert mean_average_precision(pred, truth) == 0.5


def test_map_all_hits_ranked_low() -> None:
    truth = np.array([[0.0, 0.0, 1.0, 1.0]])
    pred = np.array([[0.9, 0.8, 0.1, 0.0]])
    assert mean_average_precision(pred, truth) == 0.0
    assert recall(pred, truth) == 0.0


def test_ties_rank_lower_index_first() -> None:
    assert rank_regions(np.array([1.0, 2.0, 2.0, 0.0])).tolist() == [1, 2, 0, 3]


def test_all_empty_intervals() -> None:
    with pytest.raises(DataError) as exc_info:
        recall(PREDS[1:2], TRUTHS[1:2])
    assert "accident-free" in str(exc_info.value)


def test_shape_mismatch() -> None:
    with pytest.raises(DataError):
        rmse(PREDS, TRUTHS[:2])
    with pytest.raises(DataError):
        rmse(np.zeros((0, 4)), np.zeros((0, 4)))


def test_rush_hour_filter() -> None:
    hours = np.array([6, 7, 9, 16, 19, 18])
    assert rush_hour_filter([0, 1, 2, 3, 4, 5], hours).tolist() == [1, 3, 5]


def test_evaluate_splits_rush_hours() -> None:
    hours = np.array([8, 3, 17])
    report = evaluate_predictions(PREDS, TRUTHS, np.array([0, 1, 2]), hours)
    assert report.rmse == pytest.approx(math.sqrt(1.565 / 3))
    assert report.recall_rush == pytest.approx(0.75)
    assert report.rmse_rush == pytest.approx(math.sqrt(1.565 / 2))


def test_evaluate_without_rush_intervals() -> None:
    report = evaluate_predictions(PREDS, TRUTHS, np.array([0, 1, 2]), np.array([1, 2, 3]))
    assert report.rmse_rush is None
    assert report.map_rush is None
    assert "-" in report.format_table()


def test_evaluate_rush_intervals_without_accidents() -> None:
    report = evaluate_predictions(PREDS, TRUTHS, np.array([0, 1, 2]), np.array([3, 8, 3]))
    assert report.rmse_rush == 0.0
    assert report.recall_rush is None
    assert report.map_rush is None
    assert report.recall == pytest.approx(0.75)


def test_evaluate_checks_interval_count() -> None:
    with pytest.raises(DataError):
        evaluate_predictions(PREDS, TRUTHS, np.array([0, 1]), np.zeros(3))


def test_report_range_checked() -> None:
    with pytest.raises(DataError):
        MetricReport(rmse=1.0, recall=1.5, map=0.5)
    with pytest.raises(DataError):
        MetricReport(rmse=float("nan"), recall=0.5, map=0.5)


def test_report_table_and_files(tmp_path) -> None:
    report = MetricReport(
        rmse=1.25, recall=0.5, map=0.25, rmse_rush=2.0, recall_rush=1.0, map_rush=0.0
    )
    lines = report.format_table().splitlines()
    assert lines[0].split() == ["metric", "all", "rush"]
    assert lines[1].split() == ["RMSE", "1.250000", "2.000000"]
    json_path, text_path = report.save(tmp_path, "metrics.test")
    assert json_path.name == "metrics.test.json"
    assert text_path.read_text(encoding="utf-8") == report.format_table()


def test_interval_frame_rows(tmp_path) -> None:
    frame = interval_frame(PREDS, TRUTHS, np.array([10, 11, 12]), np.arange(24))
    assert frame["hour"].tolist() == [10, 11, 12]
    assert frame["accident_regions"].tolist() == [2, 0, 1]
    assert frame.loc[0, "recall"] == 0.5
    assert frame["recall"].isna().tolist() == [False, True, False]
    path = write_interval_csv(tmp_path / "intervals.test.csv", frame)
    loaded = pd.read_csv(path)
    assert loaded.columns.tolist() == frame.columns.tolist()
    assert loaded["squared_error"].tolist() == pytest.approx([1.065, 0.0, 0.5])
