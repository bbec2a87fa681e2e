import csv
import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxyview.render import CameraPose
from proxyview.schedule import (
    ScheduleParams,
    apply_geo_mask,
    dump_schedule,
    lambda_geo,
    mask_scale,
    view_deviation,
)


def _decimal_lambda(t, T=1000, lmax="0.3", lmin="1e-5"):
    """lambda_min * (lambda_max / lambda_min) ** ((t - T/2) / (T/2)) at 50 digits."""
    getcontext().prec = 50
    lmax, lmin = Decimal(lmax), Decimal(lmin)
    half = Decimal(T) / 2
    expo = (Decimal(t) - half) / half
    return lmin * ((lmax / lmin).ln() * expo).exp()


def test_schedule_endpoints():
    assert lambda_geo(1000) == pytest.approx(0.3, rel=1e-12)
    assert lambda_geo(500) == pytest.approx(1e-5, rel=1e-12)
    assert lambda_geo(499) == 0.0
    assert lambda_geo(0) == 0.0


def test_schedule_midpoint_high_precision():
    expected = float(_decimal_lambda(750))
    assert expected == pytest.approx(1e-5 * math.sqrt(30000), rel=1e-15)
    assert lambda_geo(750) == pytest.approx(expected, rel=1e-12)
    assert lambda_geo(750) == pytest.approx(1.7320508e-3, rel=1e-7)


@pytest.mark.parametrize("t", [500, 613, 888, 999, 1000])
def test_schedule_matches_decimal_oracle(t):
    assert lambda_geo(t) == pytest.approx(float(_decimal_lambda(t)), rel=1e-12)


def test_log_schedule_is_affine_and_monotone():
    lam = np.array([lambda_geo(t) for t in range(500, 1001)])
    assert np.all(np.diff(lam) > 0)
    second = np.diff(np.log(lam), 2)
    assert np.abs(second).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500), st.floats(1e-6, 1e-2), st.floats(0.05, 1.0))
def test_schedule_properties_for_any_params(half, lmin, lmax):
    p = ScheduleParams(2 * half, lmax, lmin)
    T = p.total_steps_T
    assert lambda_geo(T, p) == pytest.approx(lmax, rel=1e-12)
    assert lambda_geo(half, p) == pytest.approx(lmin, rel=1e-12)
    if half > 1:
        assert lambda_geo(half - 1, p) == 0.0
    assert all(lambda_geo(t, p) <= lambda_geo(t + 1, p) for t in range(0, T))


@pytest.mark.parametrize("t", [-1, 1001, 1000.5])
def test_schedule_range_error(t):
    with pytest.raises(ValueError):
        lambda_geo(t)


@pytest.mark.parametrize("kwargs", [dict(total_steps_T=999), dict(total_steps_T=0), dict(lambda_min=0.5), dict(lambda_max=1.5)])
def test_schedule_params_validation(kwargs):
    with pytest.raises(ValueError):
        ScheduleParams(**kwargs)


def test_view_deviation_examples():
    assert view_deviation(CameraPose(10.0, 0.0), CameraPose(10.0, 0.0)) == 0.0
    assert view_deviation(CameraPose(10.0, 0.0), CameraPose(190.0, 0.0)) == pytest.approx(math.pi, abs=1e-12)
    planar = math.acos(math.cos(math.radians(10)) * math.cos(math.radians(70)) + math.sin(math.radians(10)) * math.sin(math.radians(70)))
    assert view_deviation(CameraPose(70.0, 0.0), CameraPose(10.0, 0.0)) == pytest.approx(math.radians(60), abs=1e-12)
    assert planar == pytest.approx(math.radians(60), abs=1e-12)


def test_view_deviation_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = CameraPose(*rng.uniform([0, -80], [360, 80]))
        b = CameraPose(*rng.uniform([0, -80], [360, 80]))
        d = view_deviation(a, b)
        assert 0.0 <= d <= math.pi
        assert d == pytest.approx(view_deviation(b, a), abs=1e-12)


def test_mask_scale_values():
    f = np.arange(12.0).reshape(1, 4, 3)
    assert mask_scale(0.0) == 1.0
    np.testing.assert_array_equal(apply_geo_mask(f, 0.0), f)
    assert mask_scale(math.pi / 3) == math.cos(math.pi / 3)
    np.testing.assert_allclose(apply_geo_mask(f, math.pi / 3), 0.5 * f, rtol=1e-15)
    assert mask_scale(math.pi / 2) == 0.0
    assert (apply_geo_mask(f, math.pi / 2) == 0).all()
    assert mask_scale(math.pi) == 0.0


def test_mask_without_clamp_goes_negative():
    p = ScheduleParams(clamp_negative_cos=False)
    assert mask_scale(math.pi, p) == -1.0
    assert mask_scale(2 * math.pi / 3, p) == pytest.approx(-0.5, abs=1e-15)


def test_mask_range_error():
    with pytest.raises(ValueError):
        mask_scale(-0.1)
    with pytest.raises(ValueError):
        mask_scale(4.0)


def test_dump_schedule(tmp_path):
    path = tmp_path / "s.csv"
    dump_schedule(ScheduleParams(), path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "lambda_geo"]
    body = rows[1:]
    assert len(body) == 1001
    assert [int(r[0]) for r in body] == list(range(1001))
    assert float(body[500][1]) == pytest.approx(1e-5, rel=1e-12)
    assert float(body[1000][1]) == pytest.approx(0.3, rel=1e-12)
    assert all(float(r[1]) == 0.0 for r in body[:500])
