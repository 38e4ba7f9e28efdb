import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from dmcnet.errors import DataError, DimensionError, GeometryError
from dmcnet.io import VolumeSample
from dmcnet.metrics import (
    MetricsRecord,
    average_ranks,
    dsc,
    evaluate,
    hausdorff,
    hd95,
    kfold_split,
    sliding_window_logits,
    summary,
    surface,
    wilcoxon_signed_rank,
    window_starts,
)


def _voxel(shape, *idx):
    m = np.zeros(shape, dtype=bool)
    for i in idx:
        m[i] = True
    return m


# -- overlap and distance ------------------------------------------------------


def test_dsc_examples():
    m = _voxel((4, 4), (0, 0), (1, 1))
    assert dsc(m, m) == 1.0
    assert dsc(m, _voxel((4, 4), (3, 3))) == 0.0
    gt = _voxel((4, 4), (0, 0), (1, 1), (2, 2), (3, 3))
    assert dsc(m, gt) == pytest.approx(2 * 2 / 6)
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(DimensionError):
        dsc(np.zeros((3, 3)), np.zeros((3, 4)))


def test_hd95_examples():
    m = _voxel((6, 6, 6), (1, 2, 3), (2, 2, 3))
    assert hd95(m, m, (1, 1, 1)) == 0.0
    assert hd95(_voxel((8, 4), (1, 1)), _voxel((8, 4), (4, 1)), (1.0, 1.0)) == 3.0
    assert hd95(_voxel((4, 4, 4), (1, 1, 1)), _voxel((4, 4, 4), (1, 1, 2)), (1, 1, 2.5)) == 2.5


def test_hd95_undefined_is_not_zero():
    empty = np.zeros((4, 4), dtype=bool)
    full = _voxel((4, 4), (1, 1))
    assert hd95(empty, full) is None and hd95(full, empty) is None
    assert hausdorff(empty, empty) is None
    with pytest.raises(DataError):
        hd95(full, full, (1.0, -1.0))


def test_surface_excludes_interior():
    m = np.zeros((5, 5, 5), dtype=bool)
    m[1:4, 1:4, 1:4] = True
    s = surface(m)
    assert not s[2, 2, 2] and s.sum() == 26


def test_hausdorff_dominates_hd95():
    a = np.zeros((10, 10), dtype=bool)
    b = np.zeros((10, 10), dtype=bool)
    a[1:4, 1:4] = True
    b[2:9, 2:5] = True
    assert hausdorff(a, b) >= hd95(a, b)
    assert hausdorff(a, b) == pytest.approx(oracles.hausdorff(a, b, (1.0, 1.0)))


masks = hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=3, min_side=1, max_side=6))


@settings(max_examples=60, deadline=None)
@given(masks, st.data())
def test_metrics_match_brute_force(a, data):
    b = data.draw(hnp.arrays(bool, a.shape))
    spacing = tuple(data.draw(st.sampled_from([0.5, 1.0, 1.7, 2.5])) for _ in range(a.ndim))
    assert dsc(a, b) == oracles.dsc(a, b)
    got, want = hd95(a, b, spacing), oracles.hd95(a, b, spacing)
    assert (got is None) == (want is None)
    if got is not None:
        assert got == pytest.approx(want, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(masks, st.data())
def test_metric_symmetry_and_range(a, data):
    b = data.draw(hnp.arrays(bool, a.shape))
    assert 0.0 <= dsc(a, b) <= 1.0 and dsc(a, b) == dsc(b, a)
    h = hd95(a, b)
    assert h is None or (h >= 0 and h == pytest.approx(hd95(b, a)))


# -- Wilcoxon ------------------------------------------------------------------


def test_constant_shift_smallest_p():
    a = np.arange(6.0)
    res = wilcoxon_signed_rank(a, a + 0.5)
    assert res.statistic == 0.0 and res.p_value == pytest.approx(2 / 64) and res.method == "exact"


def test_identical_samples_degenerate():
    res = wilcoxon_signed_rank(np.ones(7), np.ones(7))
    assert res.degenerate and math.isnan(res.p_value)
    assert res.to_dict()["p_value"] is None


def test_wilcoxon_input_errors():
    with pytest.raises(DataError):
        wilcoxon_signed_rank(np.zeros(4), np.arange(4.0) + 1)
    with pytest.raises(DimensionError):
        wilcoxon_signed_rank(np.zeros(5), np.zeros(6))


def test_average_ranks_ties():
    np.testing.assert_array_equal(average_ranks(np.array([3.0, 1.0, 3.0, 2.0])), [3.5, 1, 3.5, 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 10), st.integers(0, 10_000), st.integers(0, 2))
def test_wilcoxon_matches_enumeration(n, seed, decimals):
    rng = np.random.default_rng(seed)
    a = rng.random(n)
    d = np.round(rng.normal(0, 1, n), decimals)
    if np.count_nonzero(d) < 5:
        return
    res = wilcoxon_signed_rank(a, a + d)
    w, p = oracles.wilcoxon_p(a, a + d)
    assert res.statistic == pytest.approx(w, abs=1e-12)
    assert res.p_value == pytest.approx(p, abs=1e-12)


def test_normal_approximation_large_n():
    rng = np.random.default_rng(0)
    a = rng.random(40)
    res = wilcoxon_signed_rank(a, a + rng.normal(0.3, 1, 40))
    assert res.method == "normal" and 0 < res.p_value <= 1
    exact = wilcoxon_signed_rank(a[:20], a[:20] + 1.0, exact_max_n=25)
    assert exact.method == "exact"


# -- folds ---------------------------------------------------------------------


def test_kfold_partition():
    ids = [f"c{i}" for i in range(10)]
    folds = kfold_split(ids, 5, seed=3)
    assert [len(f) for f in folds] == [2] * 5
    assert sorted(sum(folds, [])) == sorted(ids)
    assert folds == kfold_split(ids, 5, seed=3)
    with pytest.raises(DataError):
        kfold_split(ids[:3], 5)


@settings(max_examples=30)
@given(st.integers(2, 40), st.integers(2, 7), st.integers(0, 100))
def test_kfold_sizes_balanced(n, k, seed):
    if n < k:
        return
    folds = kfold_split(range(n), k, seed)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1 and sorted(sum(folds, [])) == list(range(n))


# -- sliding-window evaluation -------------------------------------------------


def _case(seed=0, shape=(12, 10)):
    rng = np.random.default_rng(seed)
    label = np.zeros(shape, dtype=np.int64)
    label[3:8, 2:7] = 1
    label[5:7, 4:6] = 2
    return VolumeSample(rng.random(shape), label, (1.0, 0.8), f"case{seed}")


def _truth_model(case, num_classes=3):
    onehot = np.moveaxis(np.eye(num_classes)[case.label], -1, 0)

    def predict(batch):
        # find where this patch sits in the (unpadded, here exact-fit) volume by matching the image
        img = batch[0, 0]
        for start in np.ndindex(*(n - p + 1 for n, p in zip(case.image.shape, img.shape))):
            sl = tuple(slice(s, s + p) for s, p in zip(start, img.shape))
            if np.array_equal(case.image[sl], img):
                return onehot[(slice(None),) + sl][None]
        raise AssertionError("patch not found")
    return predict


def test_window_starts_cover_extent():
    assert window_starts(10, 4) == [0, 2, 4, 6]
    assert window_starts(9, 4) == [0, 2, 4, 5]
    assert window_starts(4, 4) == [0]
    with pytest.raises(GeometryError):
        window_starts(3, 4)


def test_oracle_model_scores_perfectly():
    case = _case()
    rec = evaluate(_truth_model(case), [case], (4, 4), num_classes=3)[0]
    assert rec.dsc == {1: 1.0, 2: 1.0} and rec.hd95 == {1: 0.0, 2: 0.0}


def test_background_model_gives_sentinel():
    case = _case(1)
    background = lambda batch: np.stack([np.ones(batch.shape[2:]), np.zeros(batch.shape[2:])])[None]
    rec = evaluate(background, [case], (4, 4), num_classes=2)[0]
    assert rec.dsc[1] == 0.0 and rec.hd95[1] is None
    s = summary([rec])
    assert s["1"]["hd95_undefined"] == 1 and s["1"]["hd95_median"] is None


def test_overlap_averaging_is_idempotent():
    img = np.random.default_rng(0).random((8, 8))
    const = lambda batch: np.full((1, 2) + batch.shape[2:], 0.25)
    one = sliding_window_logits(const, img, (8, 8), 2)
    many = sliding_window_logits(const, img, (4, 4), 2, overlap=0.5)
    np.testing.assert_array_equal(one, many)


def test_small_volume_is_padded_for_inference():
    img = np.random.default_rng(0).random((5, 6))
    ident = lambda batch: np.concatenate([batch, -batch], axis=1)
    out = sliding_window_logits(ident, img, (8, 8), 2)
    np.testing.assert_array_equal(out[0], img)


def test_summary_statistics():
    recs = [MetricsRecord(f"c{i}", {1: d}, {1: h}) for i, (d, h) in
            enumerate([(0.8, 1.0), (0.6, 3.0), (1.0, 2.0), (0.6, None)])]
    s = summary(recs)["1"]
    assert s["dsc_mean"] == pytest.approx(0.75)
    assert s["hd95_median"] == 2.0 and s["hd95_q1"] == 1.5 and s["hd95_q3"] == 2.5
    assert s["hd95_undefined"] == 1
    assert recs[0].to_dict() == {"case_id": "c0", "fold": None, "dsc": {"1": 0.8}, "hd95": {"1": 1.0}}
