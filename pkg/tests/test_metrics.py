"""Metric oracles: brute-force surface distances, hand-counted overlaps,
analytic Jacobian cases, and the evaluation report plumbing."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchreg import dataio, models
from patchreg.metrics import (
    EmptyStructureError,
    EvalPair,
    boundary_pixels,
    dice,
    endpoint_error,
    evaluate_pairs,
    jacobian_stats,
    surface_distances,
    warp_mask,
)
from patchreg.svf import DISPLACEMENT, VectorField, identity_grid, random_smooth_velocity


def const_disp(h, w, dx, dy):
    arr = np.zeros((2, h, w))
    arr[0], arr[1] = dx, dy
    return VectorField(arr, DISPLACEMENT)


def random_mask(seed, size=24):
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), dtype=np.int64)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(4, size - 4, size=2)
        ry, rx = rng.uniform(2, 6, size=2)
        gy, gx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        mask[((gy - cy) / ry) ** 2 + ((gx - cx) / rx) ** 2 <= 1.0] = 1
    return mask


# ---------------------------------------------------------------------------
# warp_mask


def test_warp_mask_zero_displacement_identity():
    mask = random_mask(0)
    out = warp_mask(mask, const_disp(24, 24, 0.0, 0.0))
    assert np.array_equal(out, mask)


def test_warp_mask_integer_translation_matches_index_shift():
    mask = random_mask(1)
    out = warp_mask(mask, const_disp(24, 24, 2.0, 0.0))
    assert np.array_equal(out[:, : 24 - 2], mask[:, 2:])


def test_warp_mask_never_invents_labels():
    mask = random_mask(2)
    mask[5:9, 5:9] = 2
    mask[12:15, 12:15] = 3
    in_labels = set(np.unique(mask))
    for seed in range(100):
        disp = VectorField(random_smooth_velocity(seed, 24, 24, 3.0).array, DISPLACEMENT)
        out = warp_mask(mask, disp)
        assert set(np.unique(out)) <= in_labels


# ---------------------------------------------------------------------------
# dice


def test_dice_identical_masks():
    mask = random_mask(3)
    assert dice(mask, mask.copy(), 1) == 1.0


def test_dice_disjoint_sets():
    a = np.zeros((8, 8), dtype=int)
    b = np.zeros((8, 8), dtype=int)
    a[:2, :2] = 1
    b[5:, 5:] = 1
    assert dice(a, b, 1) == 0.0


def test_dice_hand_counted_half():
    a = np.zeros((6, 6), dtype=int)
    b = np.zeros((6, 6), dtype=int)
    a[2:4, 2:4] = 1  # 4 pixels
    b[2:4, 3:5] = 1  # shifted one column, overlap 2
    assert dice(a, b, 1) == 0.5


def test_dice_both_empty_is_one():
    z = np.zeros((5, 5), dtype=int)
    assert dice(z, z, 1) == 1.0


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_dice_symmetric(seed):
    a, b = random_mask(seed), random_mask(seed + 777)
    assert dice(a, b, 1) == dice(b, a, 1)


# ---------------------------------------------------------------------------
# surface distances


def brute_force_surface(a, b, label):
    """All-pairs distances over independently extracted boundaries."""

    def boundary(mask):
        h, w = mask.shape
        out = []
        for i in range(h):
            for j in range(w):
                if mask[i, j] != label:
                    continue
                edge = i == 0 or i == h - 1 or j == 0 or j == w - 1
                if not edge:
                    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        if mask[i + di, j + dj] != label:
                            edge = True
                            break
                if edge:
                    out.append((i, j))
        return out

    pa, pb = boundary(a), boundary(b)
    d_ab = [min(math.dist(p, q) for q in pb) for p in pa]
    d_ba = [min(math.dist(p, q) for q in pa) for p in pb]
    hd = max(max(d_ab), max(d_ba))
    msd = 0.5 * (sum(d_ab) / len(d_ab) + sum(d_ba) / len(d_ba))
    return hd, msd


def test_surface_distance_identical_masks():
    mask = random_mask(4)
    hd, msd = surface_distances(mask, mask.copy(), 1)
    assert hd == 0.0 and msd == 0.0


def test_surface_distance_three_four_five():
    a = np.zeros((8, 8), dtype=int)
    b = np.zeros((8, 8), dtype=int)
    a[0, 0] = 1
    b[3, 4] = 1
    hd, msd = surface_distances(a, b, 1)
    assert hd == 5.0 and msd == 5.0


@pytest.mark.parametrize("seed", range(25))
def test_surface_distance_matches_brute_force(seed):
    a, b = random_mask(seed + 50), random_mask(seed + 150)
    if not (a == 1).any() or not (b == 1).any():
        pytest.skip("degenerate draw")
    hd, msd = surface_distances(a, b, 1)
    ref_hd, ref_msd = brute_force_surface(a, b, 1)
    assert hd == pytest.approx(ref_hd, abs=0)
    assert msd == pytest.approx(ref_msd, rel=1e-12)


def test_surface_distance_empty_set_raises():
    a = np.zeros((5, 5), dtype=int)
    b = np.zeros((5, 5), dtype=int)
    b[2, 2] = 1
    with pytest.raises(EmptyStructureError):
        surface_distances(a, b, 1)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_hd_at_least_msd_at_least_zero(seed):
    a, b = random_mask(seed), random_mask(seed + 31)
    if not (a == 1).any() or not (b == 1).any():
        return
    hd, msd = surface_distances(a, b, 1)
    assert hd >= msd >= 0.0


def test_boundary_includes_image_border():
    mask = np.ones((4, 4), dtype=int)
    pts = boundary_pixels(mask, 1)
    assert len(pts) == 12  # border ring of a 4x4 block


# ---------------------------------------------------------------------------
# jacobian stats


def test_jacobian_stats_zero_field():
    roi = np.ones((10, 10), dtype=int)
    s = jacobian_stats(const_disp(10, 10, 0, 0), roi, 1)
    assert s.defined
    assert s.mean == pytest.approx(1.0)
    assert s.std == pytest.approx(0.0)
    assert s.min == pytest.approx(1.0)
    assert s.neg_frac == 0.0


def test_jacobian_stats_linear_expansion():
    h = w = 16
    grid = identity_grid(h, w)
    disp = VectorField(0.1 * grid.copy(), DISPLACEMENT)
    roi = np.zeros((h, w), dtype=int)
    roi[3:-3, 3:-3] = 2
    s = jacobian_stats(disp, roi, 2)
    assert s.mean == pytest.approx(1.21, abs=1e-3)


def test_jacobian_stats_empty_roi_is_undefined():
    s = jacobian_stats(const_disp(8, 8, 0, 0), np.zeros((8, 8), dtype=int), 2)
    assert not s.defined
    assert math.isnan(s.mean)


def test_endpoint_error_on_foreground():
    a = const_disp(8, 8, 1.0, 0.0)
    b = const_disp(8, 8, 0.0, 0.0)
    mask = np.zeros((8, 8), dtype=int)
    mask[2:4, 2:4] = 1
    assert endpoint_error(a, b, mask) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# evaluate_pairs


@pytest.fixture(scope="module")
def zero_model():
    return models.init_model(models.preset("pure_mlp_desk"))


def identity_eval_pairs(n):
    out = []
    for i in range(n):
        p = dataio.synth_pair(i, size=64, max_disp=0.0)
        out.append(EvalPair(f"pair{i}", p.fix, p.fix.copy(), p.fix_mask, p.fix_mask.copy()))
    return out


def test_identity_pairs_give_perfect_dice(zero_model):
    report = evaluate_pairs(zero_model, identity_eval_pairs(3), threads=1)
    assert len(report.jacobian_rows) == 3
    assert all(r.dice == 1.0 for r in report.rows)
    assert all(r.hd == 0.0 and r.msd == 0.0 for r in report.rows)


def test_report_row_count_matches_pairs(zero_model):
    pairs = identity_eval_pairs(4)
    report = evaluate_pairs(zero_model, pairs, threads=2)
    assert len(report.jacobian_rows) == len(pairs)
    assert len(report.rows) == 3 * len(pairs)
    assert [r.pair_id for r in report.jacobian_rows] == [p.pair_id for p in pairs]


def test_missing_mask_pairs_are_skipped(zero_model):
    pairs = identity_eval_pairs(2)
    pairs[1].es_mask = None
    report = evaluate_pairs(zero_model, pairs, threads=1)
    assert len(report.jacobian_rows) == 1
    assert report.skipped == [("pair1", "missing mask")]


def test_evaluate_with_precomputed_fields_needs_no_model():
    pairs = identity_eval_pairs(2)
    for p in pairs:
        p.disp_forward = const_disp(64, 64, 0.0, 0.0)
    report = evaluate_pairs(None, pairs, threads=1)
    assert len(report.jacobian_rows) == 2
    assert all(r.dice == 1.0 for r in report.rows)


def test_surface_distances_spacing_converts_units():
    a = np.zeros((8, 8), dtype=int)
    b = np.zeros((8, 8), dtype=int)
    a[0, 0] = 1
    b[3, 4] = 1
    hd, msd = surface_distances(a, b, 1, spacing=0.5)
    assert hd == 2.5 and msd == 2.5


def test_worker_count_respects_env(monkeypatch):
    from patchreg.metrics import worker_count

    monkeypatch.setenv("PATCHREG_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("PATCHREG_THREADS", "not-a-number")
    assert worker_count() >= 1
    monkeypatch.delenv("PATCHREG_THREADS")
    assert worker_count() >= 1


def test_report_write_and_aggregate(tmp_path, zero_model):
    report = evaluate_pairs(zero_model, identity_eval_pairs(3), threads=1)
    report.write(tmp_path)
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "pair_id,structure,dice,hd,msd"
    assert (
        tmp_path / "jacobian.csv"
    ).read_text().splitlines()[0] == "pair_id,jac_mean,jac_std,jac_min,jac_neg_frac"
    agg = report.aggregate()
    assert agg["n_pairs"] == 3
    assert agg["structures"]["myocardium"]["dice"]["mean"] == 1.0
    assert agg["jacobian"]["per_patient_mean"]["median"] == pytest.approx(1.0)
    assert {"mean", "std", "median", "q1", "q3"} <= set(
        agg["structures"]["lv_endo"]["hd"].keys()
    )
