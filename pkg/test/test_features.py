from datetime import date, datetime

import numpy as np
import pytest
import torch

from hierrisk.features import (
    D_ST,
    D_T,
    HOLIDAY,
    RISK,
    TEMPERATURE,
    WEATHER,
    RiskMap,
    TemperatureScaler,
    aggregation_policy,
    assemble_st_features,
    enhance_features,
    normalize_poi,
    risk_levels,
    temporal_features,
)
from hierrisk.window import DataError


def _zeros(n: int) -> dict:
    return {
        "risk": np.zeros(n),
        "inflow": np.zeros(n),
        "outflow": np.zeros(n),
        "poi": np.zeros((n, 7)),
        "temperature": 0.0,
        "weather": np.zeros(5),
    }


def test_temporal_block_layout() -> None:
    when = datetime(2024, 7, 4, 8)  # Thursday
    out = temporal_features(when, holidays={date(2024, 7, 4)})
    assert out.shape == (D_T,)
    assert out[8] == 1.0
    assert out[24 + 3] == 1.0
    assert out[HOLIDAY] == 1.0
    assert out.sum() == 3.0


def test_zero_spatial_inputs_leave_only_temporal_block() -> None:
    temporal = temporal_features(datetime(2024, 1, 1, 0))
    st = assemble_st_features(temporal=temporal, **_zeros(4))
    assert st.shape == (4, D_ST)
    assert D_ST == 48
    for row in st:
        np.testing.assert_array_equal(row[:D_T], temporal)
        assert not row[D_T:].any()


def test_identical_inputs_give_identical_rows() -> None:
    temporal = temporal_features(datetime(2024, 1, 1, 12))
    st = assemble_st_features(
        risk=np.array([2.0, 2.0]),
        inflow=np.array([5.0, 5.0]),
        outflow=np.array([1.0, 1.0]),
        poi=np.full((2, 7), 1 / 7),
        temperature=0.5,
        weather=1,
        temporal=temporal,
    )
    np.testing.assert_array_equal(st[0], st[1])
    assert st[0, RISK] == 2.0
    assert st[0, TEMPERATURE] == 0.5
    assert st[0, WEATHER].tolist() == [0.0, 1.0, 0.0, 0.0, 0.0]


def test_assemble_accepts_risk_map() -> None:
    risk = RiskMap(level=1, interval=0, values=np.array([0.0, 3.0]))
    st = assemble_st_features(
        risk, np.zeros(2), np.zeros(2), np.zeros((2, 7)), 0.0, 0, np.zeros(D_T)
    )
    assert st[:, RISK].tolist() == [0.0, 3.0]


def test_assemble_rejects_bad_shapes() -> None:
    inputs = _zeros(3)
    inputs["inflow"] = np.zeros(2)
    with pytest.raises(DataError):
        assemble_st_features(temporal=np.zeros(D_T), **inputs)


def test_bad_weather_code() -> None:
    with pytest.raises(DataError):
        assemble_st_features(temporal=np.zeros(D_T), **{**_zeros(2), "weather": 9})


def test_risk_map_rejects_negative_values() -> None:
    with pytest.raises(DataError):
        RiskMap(level=1, interval=0, values=np.array([1.0, -1.0]))


def test_risk_map_is_read_only() -> None:
    risk = RiskMap(level=1, interval=0, values=np.array([1.0, 2.0]))
    assert risk.total == 3.0
    with pytest.raises(ValueError):
        risk.values[0] = 5.0


def test_enhance_appends_rs_columns() -> None:
    st = np.arange(2 * D_ST, dtype=np.float32).reshape(2, D_ST)
    out = enhance_features(st, np.zeros((2, 8)))
    assert out.shape == (2, 56)
    np.testing.assert_array_equal(out[:, :D_ST], st)
    assert not out[:, D_ST:].any()


def test_enhance_rejects_row_mismatch() -> None:
    with pytest.raises(DataError):
        enhance_features(np.zeros((3, D_ST)), np.zeros((2, 8)))
    with pytest.raises(DataError):
        enhance_features(np.zeros((3, D_ST)), np.zeros(8))


def test_enhance_broadcasts_over_windows() -> None:
    st = np.ones((4, 3, 2, D_ST), dtype=np.float32)
    f_rs = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = enhance_features(st, f_rs)
    assert out.shape == (4, 3, 2, D_ST + 2)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out[2, 1, :, D_ST:], f_rs)


def test_enhance_tensor_keeps_gradient() -> None:
    st = torch.zeros(5, 3, D_ST, dtype=torch.float64)
    f_rs = torch.rand(3, 4, dtype=torch.float32, requires_grad=True)
    out = enhance_features(st, f_rs)
    assert out.shape == (5, 3, D_ST + 4)
    assert out.dtype == torch.float64
    out[..., D_ST:].sum().backward()
    torch.testing.assert_close(f_rs.grad, torch.full((3, 4), 5.0))


def test_aggregation_policy_table() -> None:
    policy = aggregation_policy(56)
    assert len(policy) == 56
    assert policy[RISK] == "sum"
    assert policy[HOLIDAY] == "max"
    assert all(policy[c] == "max" for c in range(WEATHER.start, WEATHER.stop))
    assert policy[TEMPERATURE] == "mean"
    assert policy[0] == "mean"
    assert policy[55] == "mean"


def test_poi_rows_normalized() -> None:
    out = normalize_poi(np.array([[1, 3, 0, 0, 0, 0, 0], [0] * 7]))
    np.testing.assert_allclose(out[0, :2], [0.25, 0.75])
    assert out[0].sum() == pytest.approx(1.0)
    assert not out[1].any()


def test_temperature_scaler() -> None:
    scaler = TemperatureScaler.fit(np.array([10.0, 30.0]))
    np.testing.assert_allclose(scaler.transform(np.array([10.0, 20.0, 40.0])), [0.0, 0.5, 1.5])
    assert not TemperatureScaler(5.0, 5.0).transform(np.array([5.0])).any()
    with pytest.raises(DataError):
        TemperatureScaler.fit(np.array([]))


def test_risk_levels_buckets() -> None:
    levels = risk_levels(np.array([0.0, 1.0, 2.0, 3.0, 4.0, 9.0]))
    assert levels.tolist() == [0, 1, 1, 2, 2, 3]
