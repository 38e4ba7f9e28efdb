import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmcnet.blocks import ConvUnit
from dmcnet.complexity import (
    _row_flops,
    complexity_report,
    count_flops,
    count_params,
    format_table,
    ablation_grid,
    to_json,
)
from dmcnet.errors import ConfigurationError, GeometryError
from dmcnet.networks import Model, NetworkSpec

TINY = NetworkSpec(rank=2, variant="dmc", stage_channels=(8, 16, 32), num_classes=2)


def _unit_flops(unit, spatial, convention="2mac", include_norm=True):
    rows, _ = unit.describe("u", spatial)
    return sum(_row_flops(r, convention, include_norm) for r in rows)


def test_conv_3x3_formula():
    unit = ConvUnit(1, 1, 2, 3, norm=False, act=None)
    assert unit.param_count() == 10
    assert _unit_flops(unit, (4, 4)) == 2 * 144 + 16
    assert _unit_flops(unit, (4, 4), "mac-out") == 144 + 16


def test_conv_param_formulas():
    assert ConvUnit(2, 4, 2, 3, norm=False).param_count() == 76
    assert ConvUnit(32, 32, 3, 5, groups=32, norm=False).param_count() == 4032
    assert ConvUnit(4, 4, 2, 3).param_count() == 4 * (4 * 9 + 1) + 2 * 4


def test_norm_cost_and_exclusion():
    unit = ConvUnit(1, 2, 2, 1, act=None)
    base = _unit_flops(ConvUnit(1, 2, 2, 1, norm=False, act=None), (4, 4))
    assert _unit_flops(unit, (4, 4)) == base + 4 * 32
    assert _unit_flops(unit, (4, 4), include_norm=False) == base


def test_params_equal_store_enumeration():
    model = Model(NetworkSpec(rank=3, variant="dmc"))
    assert count_params(model) == sum(int(np.prod(t.shape)) for _, t in model.named_parameters())
    assert count_params(model.spec) == count_params(model)


def test_report_totals_are_row_sums():
    rep = complexity_report(TINY, (32, 32))
    assert rep.totals["params"] == sum(r["params"] for r in rep.rows) == count_params(TINY)
    assert rep.totals["flops"] == sum(r["flops"] for r in rep.rows) == count_flops(TINY, (32, 32))
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["convention"] == "2mac; norm included"
    assert set(d["flops_by_convention"]) == {"2mac", "mac-out"}


def test_unknown_convention_and_bad_geometry():
    with pytest.raises(ConfigurationError):
        count_flops(TINY, (32, 32), convention="3mac")
    with pytest.raises(GeometryError):
        count_flops(TINY, (30, 32))


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.integers(0, 1), st.sampled_from(["2mac", "mac-out"]))
def test_conv_flops_scale_linearly(mult, axis, convention):
    spec = NetworkSpec(rank=2, variant="dmsc", stage_channels=(4, 8), num_classes=2)
    base = (16 * mult, 16 * mult)
    doubled = tuple(n * (2 if a == axis else 1) for a, n in enumerate(base))
    model = Model(spec)
    for ra, rb in zip(model.describe(base), model.describe(doubled)):
        # gate linears act on pooled 1x1 maps and do not scale
        if ra.kind.startswith("conv") and ".gate." not in ra.name:
            assert _row_flops(rb, convention, True) == 2 * _row_flops(ra, convention, True)


def test_grid_shape_and_table():
    grid = ablation_grid((2,), geometry=(128, 128))
    assert len(grid["rows"]) == 7
    assert [r["method"] for r in grid["rows"]].count("DMSC-Net") == 4
    text = format_table(grid)
    assert "U-Net" in text and "7x7 DWConv" in text
    assert json.loads(to_json(grid))["rows"][0]["geometry"] == [128, 128]


@pytest.mark.parametrize("convention", ["2mac", "mac-out"])
def test_table_orderings(convention):
    grid = ablation_grid((2, 3), convention=convention, include_norm=False)
    rows = {(r["rank"], r["design"]): r for r in grid["rows"]}
    for rank, k in ((2, ("5x5", "7x7")), (3, ("5x5x5", "7x7x7"))):
        assert rows[(rank, "2x2 AvgPool")]["params"] == rows[(rank, "4x4 AvgPool")]["params"]
        assert rows[(rank, "4x4 AvgPool")]["flops"] < rows[(rank, "2x2 AvgPool")]["flops"]
        for kk in k:
            for key in ("params", "flops"):
                assert rows[(rank, kk + " DWConv")][key] < rows[(rank, kk + " Conv")][key]
        for fam in (" Conv", " DWConv"):
            for key in ("params", "flops"):
                assert rows[(rank, k[1] + fam)][key] > rows[(rank, k[0] + fam)][key]
    assert rows[(3, "5x5x5 DWConv")]["flops"] < 0.5 * rows[(3, "5x5x5 Conv")]["flops"]


def test_plain_params_near_reference_values():
    grid = ablation_grid((2, 3), convention="mac-out", include_norm=False)
    params = {(r["rank"], r["method"], r["design"]): r["params"] / 1e6 for r in grid["rows"]}
    assert params[(2, "U-Net", "-")] == pytest.approx(22.80, abs=0.01)
    assert params[(2, "DMRC-Net", "4x4 AvgPool")] == pytest.approx(43.77, abs=0.01)
    assert params[(3, "U-Net", "-")] == pytest.approx(25.89, rel=0.01)
