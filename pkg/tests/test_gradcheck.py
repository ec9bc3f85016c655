"""
有限差分チェック fd_check のテスト。
"""

from __future__ import annotations

import logging

import numpy as np
import pytest

from src.core import ops
from src.core.exceptions import GradCheckError, GradientError
from src.core.gradcheck import GradReport, fd_check, near_zero_mask


def _smooth(params):
    x, w = params["x"], params["w"]
    return ops.sum(ops.mul(ops.gelu(ops.einsum("ij,j->i", w, x)), ops.einsum("ij,j->i", w, x)))


def test_smooth_function_passes(rng) -> None:
    params = {"x": rng.standard_normal(4), "w": rng.standard_normal((3, 4))}

    report = fd_check(_smooth, params, label="smooth")

    assert isinstance(report, GradReport)
    assert [entry.parameter for entry in report.entries] == ["w", "x"]
    assert report.passed(1e-6)
    assert report.entry("x").checked == 4
    assert report.entry("w").checked == 12


def test_report_lookup_unknown_parameter(rng) -> None:
    report = fd_check(_smooth, {"x": rng.standard_normal(4), "w": rng.standard_normal((3, 4))})
    with pytest.raises(KeyError):
        report.entry("missing")


def test_float32_forward_within_looser_tolerance(rng) -> None:
    params = {"x": rng.standard_normal(4), "w": rng.standard_normal((3, 4))}

    report = fd_check(_smooth, params, analytic_dtype=np.float32)

    assert report.passed(1e-4)


def test_skip_mask_excludes_entries(caplog) -> None:
    x = np.array([0.0, 0.5, -2.0, 4e-4])
    mask = near_zero_mask(x)

    with caplog.at_level(logging.WARNING):
        report = fd_check(lambda p: ops.sum(ops.spow(p["x"], 0.5)), {"x": x}, skip={"x": mask}, label="spow")

    assert mask.tolist() == [True, False, False, True]
    assert report.skipped == 2
    assert report.entry("x").checked == 2
    assert report.passed(1e-5)
    assert "スキップ" in caplog.text


def test_nonfinite_value_raises() -> None:
    with pytest.raises(GradCheckError):
        fd_check(lambda p: ops.sum(ops.scale(p["x"], np.inf)), {"x": np.ones(2)})


def test_non_scalar_function_rejected() -> None:
    with pytest.raises(GradientError):
        fd_check(lambda p: ops.scale(p["x"], 2.0), {"x": np.ones(2)})


def test_relative_error_uses_unit_floor() -> None:
    # 勾配が0の関数では誤差は絶対誤差と一致する
    report = fd_check(lambda p: ops.sum(ops.scale(p["x"], 0.0)), {"x": np.ones(3)})
    assert report.max_rel_err == pytest.approx(report.max_abs_err)
    assert report.max_rel_err == 0.0
