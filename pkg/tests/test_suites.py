"""
equiv / gradcheck / bench スイートのテスト。
"""

from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from src.core import elsa, ops
from src.core.exceptions import ConfigError, UnknownPresetError
from src.suites.benchmark import run_benchmark, time_call, transient_buffer_bytes
from src.suites.equivalence import NOT_EQUIVALENT, degeneracy_shapes, run_equivalence
from src.suites.gradcheck_suite import GradCase, default_cases, primitive_cases, run_gradcheck, uncovered_ops
from src.utils.config import RunConfig, default_run_config

ALL_VARIANTS = ["StrictUnfold", "ShiftConv", "MergedConv", "Production"]


def _equiv_config(**overrides) -> RunConfig:
    document = {
        "command": "equiv",
        "seed": 0,
        "dtype": "f64",
        "shapes": ["2x8x6x6", "1x4x5x7"],
        "kernel_sizes": [3, 5],
        "heads": [2],
        "variants": ALL_VARIANTS,
        "presets": ["DwConv", "SwinLSA", "InvolutionLike", "Net7"],
        "instances": 2,
    }
    document.update(overrides)
    return RunConfig.from_dict(document)


class TestEquivalenceSuite:
    """等価性スイート。"""

    def test_small_config_passes(self):
        result = run_equivalence(_equiv_config())

        assert result.passed, [(row.subject, row.max_abs_diff) for row in result.failures]
        checks = {row.check for row in result.rows}
        assert checks == {"variant", "degeneracy"}

    def test_production_rows_never_fail(self):
        result = run_equivalence(_equiv_config(tolerance=0.0))
        production = [row for row in result.rows if row.subject.startswith("Production")]

        assert production
        assert all(row.status == NOT_EQUIVALENT for row in production)
        assert not any(row.failed for row in production)

    def test_zero_tolerance_reports_rounding_differences(self):
        result = run_equivalence(_equiv_config(tolerance=0.0))
        assert not result.passed

    def test_same_seed_same_rows(self):
        first = [row.as_dict() for row in run_equivalence(_equiv_config(seed=3)).rows]
        second = [row.as_dict() for row in run_equivalence(_equiv_config(seed=3)).rows]
        assert first == second

    def test_heads_not_dividing_are_skipped(self):
        result = run_equivalence(_equiv_config(shapes=["1x6x4x4"], heads=[4], presets=["Net7"]))
        assert result.rows == []

    def test_large_shapes_excluded_from_degeneracy(self):
        cfg = _equiv_config(shapes=["2x8x6x6", "4x64x14x14"])
        assert degeneracy_shapes(cfg) == [(2, 8, 6, 6)]

    def test_unknown_preset(self):
        with pytest.raises(UnknownPresetError):
            run_equivalence(_equiv_config(presets=["Net99"]))

    def test_float32_tolerance(self):
        result = run_equivalence(_equiv_config(dtype="f32", presets=[]))
        assert result.passed
        assert {row.tolerance for row in result.rows} == {1e-5}

    def test_default_config_passes(self):
        document = default_run_config("equiv")
        document["instances"] = 10

        result = run_equivalence(RunConfig.from_dict(document))

        assert result.passed, [(row.subject, row.shape, row.max_abs_diff) for row in result.failures]
        variant_configs = {(row.shape, row.kernel_size, row.heads) for row in result.rows if row.check == "variant"}
        assert len(variant_configs) >= 20
        assert {kernel for _, kernel, _ in variant_configs} == {3, 5, 7}
        assert "4x64x14x14" in {shape for shape, _, _ in variant_configs}
        instances = Counter(
            (row.subject, row.shape, row.kernel_size, row.heads) for row in result.rows if row.check == "degeneracy"
        )
        assert {subject for subject, *_ in instances} == {
            "DwConv~dwconv_forward", "SwinLSA~lsa_forward", "InvolutionLike~dynamic_filter_reference",
        }
        assert min(instances.values()) >= 10

    def test_default_shapes_in_float32(self):
        document = default_run_config("equiv")
        document.update(dtype="f32", presets=[])

        result = run_equivalence(RunConfig.from_dict(document))

        assert result.passed, [(row.subject, row.shape, row.max_abs_diff) for row in result.failures]
        assert len({(row.shape, row.kernel_size, row.heads) for row in result.rows}) >= 20


class TestGradcheckSuite:
    """勾配チェックスイート。"""

    def test_primitive_cases_cover_every_registered_op(self, rng):
        assert uncovered_ops(primitive_cases(rng)) == []

    def test_uncovered_ops_without_cases(self):
        assert "softmax" in uncovered_ops([])

    def test_default_suite_passes(self):
        cfg = RunConfig.from_dict(default_run_config("gradcheck"))

        result = run_gradcheck(cfg)

        assert result.passed, result.failures
        names = [case.name for case, _ in result.reports]
        assert "elsa.block" in names
        assert "elsa.ghost_head.lambda=0.5" in names
        assert any(name.startswith("paradigm.") for name in names)

    def test_ghost_case_skips_near_zero_entries(self):
        cfg = RunConfig.from_dict(default_run_config("gradcheck"))
        case = next(case for case in default_cases(cfg) if case.name == "elsa.ghost_head.lambda=0.5")

        result = run_gradcheck(cfg, cases=[case])

        assert result.reports[0][1].skipped >= 2
        assert result.passed

    def test_rows_flag_failures(self):
        broken = GradCase(
            name="broken",
            fn=lambda p: ops.sum(ops.mul(p["x"], p["x"])),
            params={"x": np.array([1.0, 2.0])},
            tolerance=-1.0,
        )
        result = run_gradcheck(RunConfig.from_dict(default_run_config("gradcheck")), cases=[broken])

        assert result.failures == ["broken"]
        assert {row["status"] for row in result.rows()} == {"fail"}

    def test_tolerance_override(self):
        cfg = RunConfig.from_dict({**default_run_config("gradcheck"), "tolerance": 1e-3})
        assert {case.tolerance for case in default_cases(cfg)} == {1e-3}


class TestBenchmark:
    """ベンチマーク。"""

    def test_unfold_buffer_size(self):
        size = transient_buffer_bytes(elsa.Variant.STRICT_UNFOLD, (8, 96, 56, 56), 7, 3, np.float32)
        assert size == 472_055_808

    def test_shift_buffers_are_smaller(self):
        shape = (8, 96, 56, 56)
        strict = transient_buffer_bytes(elsa.Variant.STRICT_UNFOLD, shape, 7, 3, np.float32)
        shift = transient_buffer_bytes(elsa.Variant.SHIFT_CONV, shape, 7, 3, np.float32)
        merged = transient_buffer_bytes(elsa.Variant.MERGED_CONV, shape, 7, 3, np.float32)
        assert shift < merged < strict

    def test_requires_three_repeats(self):
        cfg = RunConfig.from_dict({**default_run_config("bench"), "repeats": 2})
        with pytest.raises(ConfigError) as excinfo:
            run_benchmark(cfg)
        assert excinfo.value.key == "repeats"

    def test_rows_per_variant_and_kernel(self):
        cfg = RunConfig.from_dict({
            **default_run_config("bench"),
            "shapes": ["1x4x6x6"], "kernel_sizes": [1, 3], "heads": [3, 2], "repeats": 3,
        })

        rows = run_benchmark(cfg)

        assert len(rows) == 2 * len(ALL_VARIANTS)
        assert {row.heads for row in rows} == {2}
        assert all(row.best_seconds <= row.median_seconds for row in rows)

    def test_time_call_warms_up(self):
        calls = []
        timing = time_call(lambda: calls.append(1), 3)
        assert len(calls) == 4
        assert len(timing.samples) == 3
