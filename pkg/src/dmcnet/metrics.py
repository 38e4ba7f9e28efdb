"""Segmentation metrics, cross-validation folds, paired tests and evaluation.

Conventions:

* DSC of two empty masks is 1.0.
* hd95 of a pair where either mask is empty is undefined and returned as
  ``None``; summaries skip undefined values and report how many there were.
* Surfaces are foreground voxels with at least one face neighbour in the
  background (voxels outside the volume count as background).
* The 95th percentile interpolates linearly between order statistics of the
  pooled distances from both surfaces.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special

from .errors import DataError, DimensionError, GeometryError
from .tensor import Tensor, no_grad

EXACT_MAX_N = 25


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc(pred, gt):
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def surface(mask):
    """Foreground voxels with a face-adjacent background neighbour."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(padded)
    for axis in range(mask.ndim):
        interior &= np.roll(padded, 1, axis) & np.roll(padded, -1, axis)
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    return mask & ~interior[core]


def _surface_distances(pred, gt, spacing):
    sp = surface(pred)
    sg = surface(gt)
    # distance from every voxel to the nearest surface voxel of the other mask
    to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return np.concatenate([to_g[sp], to_p[sg]])


def _check_spacing(spacing, ndim):
    if spacing is None:
        return (1.0,) * ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim or any(not s > 0 for s in spacing):
        raise DataError(f"spacing must be {ndim} positive values, got {spacing}")
    return spacing


def hd95(pred, gt, spacing=None):
    """95th-percentile symmetric surface distance in mm, or ``None`` if a mask is empty."""
    pred, gt = _pair(pred, gt)
    spacing = _check_spacing(spacing, pred.ndim)
    if not pred.any() or not gt.any():
        return None
    return float(np.percentile(_surface_distances(pred, gt, spacing), 95))


def hausdorff(pred, gt, spacing=None):
    """Maximum symmetric surface distance, or ``None`` if a mask is empty."""
    pred, gt = _pair(pred, gt)
    spacing = _check_spacing(spacing, pred.ndim)
    if not pred.any() or not gt.any():
        return None
    return float(_surface_distances(pred, gt, spacing).max())


# -- Wilcoxon signed-rank ---------------------------------------------------------


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str
    degenerate: bool = False

    def to_dict(self):
        p = None if math.isnan(self.p_value) else self.p_value
        return {"statistic": self.statistic, "p_value": p, "n": self.n,
                "method": self.method, "degenerate": self.degenerate}


def average_ranks(values):
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_cdf(doubled_ranks, threshold):
    """P(sum of a random subset of ``doubled_ranks`` <= threshold), all 2^n subsets equally likely."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        counts[r:reach + r + 1] = counts[r:reach + r + 1] + counts[:reach + 1]
        reach += r
    hits = sum(counts[: int(threshold) + 1])
    return float(hits) / float(2 ** len(doubled_ranks))


def wilcoxon_signed_rank(a, b, exact_max_n=EXACT_MAX_N):
    """Two-sided paired test on ``b - a``.

    Zero differences are dropped. ``W = min(W+, W-)``; the p-value is
    ``min(1, 2 P(T <= W))`` with ``T`` the null distribution of the signed
    rank sum, computed exactly (by counting subsets) for ``n <= exact_max_n``
    and by the tie-corrected normal approximation above that.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired samples must be equal-length vectors, got {a.shape}, {b.shape}")
    d = b - a
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, math.nan, 0, "degenerate", degenerate=True)
    if n < 5:
        raise DataError(f"need at least 5 non-zero paired differences, got {n}")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = min(1.0, 2.0 * _exact_cdf(doubled, round(2 * w)))
        return WilcoxonResult(w, p, n, "exact")
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    z = (w - mean) / math.sqrt(var)
    p = min(1.0, 2.0 * special.ndtr(z))
    return WilcoxonResult(w, float(p), n, "normal")


# -- folds -------------------------------------------------------------------------


def kfold_split(case_ids, k=5, seed=0):
    """Shuffle with ``seed`` then cut into ``k`` contiguous folds; returns a list of id lists."""
    case_ids = list(case_ids)
    if k < 2:
        raise DataError(f"k must be at least 2, got {k}")
    if len(case_ids) < k:
        raise DataError(f"{len(case_ids)} cases cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    return [[case_ids[i] for i in part] for part in np.array_split(order, k)]


def fold_of(folds):
    return {cid: f for f, ids in enumerate(folds) for cid in ids}


# -- evaluation ----------------------------------------------------------------------


@dataclass
class MetricsRecord:
    case_id: str
    dsc: dict = field(default_factory=dict)
    hd95: dict = field(default_factory=dict)
    fold: int = None

    def to_dict(self):
        return {"case_id": self.case_id, "fold": self.fold,
                "dsc": {str(c): v for c, v in self.dsc.items()},
                "hd95": {str(c): v for c, v in self.hd95.items()}}


def window_starts(extent, size, overlap=0.5):
    """Window origins along one axis covering ``extent`` with the given overlap."""
    if size > extent:
        raise GeometryError(f"window {size} larger than extent {extent}")
    step = max(1, int(size * (1.0 - overlap)))
    starts = list(range(0, extent - size + 1, step))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def sliding_window_logits(predict, image, patch_size, num_classes, overlap=0.5):
    """Average per-window logits over every voxel; ``predict`` maps ``1 x 1 x patch`` to logits."""
    from .training import pad_to

    padded, before = pad_to(np.asarray(image, dtype=np.float64), patch_size)
    acc = np.zeros((num_classes,) + padded.shape)
    hits = np.zeros(padded.shape)
    grids = [window_starts(n, p, overlap) for n, p in zip(padded.shape, patch_size)]
    for origin in np.array(np.meshgrid(*grids, indexing="ij")).reshape(len(grids), -1).T:
        sl = tuple(slice(int(o), int(o) + p) for o, p in zip(origin, patch_size))
        logits = np.asarray(predict(padded[sl][None, None]))[0]
        acc[(slice(None),) + sl] += logits
        hits[sl] += 1.0
    acc /= hits
    crop = tuple(slice(b, b + n) for b, n in zip(before, np.shape(image)))
    return acc[(slice(None),) + crop]


def model_predictor(model):
    def predict(batch):
        with no_grad():
            return model.forward(Tensor(batch)).data
    return predict


def evaluate(model, cases, patch_size, num_classes=None, overlap=0.5, folds=None):
    """Per-case :class:`MetricsRecord` for every foreground class.

    ``model`` is a :class:`~dmcnet.networks.Model` or any callable mapping a
    ``1 x 1 x patch`` array to logits.
    """
    if num_classes is None:
        num_classes = model.spec.num_classes
    predict = model if not hasattr(model, "forward") else model_predictor(model)
    owner = fold_of(folds) if folds else {}
    records = []
    for case in cases:
        logits = sliding_window_logits(predict, case.image, tuple(patch_size), num_classes, overlap)
        pred = np.argmax(logits, axis=0)
        rec = MetricsRecord(case.case_id, fold=owner.get(case.case_id))
        for c in range(1, num_classes):
            rec.dsc[c] = dsc(pred == c, case.label == c)
            rec.hd95[c] = hd95(pred == c, case.label == c, case.spacing)
        records.append(rec)
    return records


def summary(records):
    """``{class: {dsc_mean, dsc_std, hd95_median, hd95_q1, hd95_q3, hd95_undefined}}``."""
    classes = sorted({c for r in records for c in r.dsc})
    out = {}
    for c in classes:
        d = np.array([r.dsc[c] for r in records if c in r.dsc])
        h = np.array([r.hd95[c] for r in records if r.hd95.get(c) is not None])
        undefined = sum(1 for r in records if c in r.hd95 and r.hd95[c] is None)
        entry = {
            "dsc_mean": float(d.mean()),
            "dsc_std": float(d.std()),
            "hd95_undefined": undefined,
        }
        if len(h):
            q1, med, q3 = np.percentile(h, [25, 50, 75])
            entry.update(hd95_median=float(med), hd95_q1=float(q1), hd95_q3=float(q3))
        else:
            entry.update(hd95_median=None, hd95_q1=None, hd95_q3=None)
        out[str(c)] = entry
    return out
