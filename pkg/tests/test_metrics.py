import math

import numpy as np
import pytest

from mrisynth.errors import EmptyRegionError, ShapeError
from mrisynth.metrics import (
    CSV_FIELDS,
    MetricRow,
    evaluate_case,
    evaluate_global,
    masked_psnr,
    masked_ssim,
    mean_row,
    normalize_pair,
    read_metrics_csv,
    region_masks,
    ssim_map,
    write_metrics_csv,
)
from mrisynth.phantom import radial_phantom


@pytest.fixture(scope="module")
def ref():
    return radial_phantom((24, 24, 24))


def test_ssim_identity(ref):
    m = ref > 0.2
    assert masked_ssim(ref, ref, m) == pytest.approx(1.0, abs=1e-12)


def test_ssim_of_inverse_below_one(ref):
    assert masked_ssim(1 - ref, ref, ref > 0.05) < 1.0


def test_region_means_recombine(ref):
    rng = np.random.default_rng(0)
    pred = np.clip(ref + rng.normal(0, 0.05, ref.shape), 0, 1)
    brain = ref > 0.1
    tumor = brain & (ref > 0.6)
    healthy = brain & ~tumor
    smap = ssim_map(pred, ref)
    s_t, s_h = masked_ssim(pred, ref, tumor, smap), masked_ssim(pred, ref, healthy, smap)
    combined = (s_t * tumor.sum() + s_h * healthy.sum()) / brain.sum()
    assert combined == pytest.approx(masked_ssim(pred, ref, brain, smap), abs=1e-6)


def test_ssim_map_against_direct_window(ref):
    rng = np.random.default_rng(1)
    pred = np.clip(ref + rng.normal(0, 0.1, ref.shape), 0, 1)
    x = np.arange(11) - 5
    g = np.exp(-(x**2) / (2 * 1.5**2))
    g /= g.sum()
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    i, j, k = 12, 9, 14
    pa, pb = np.pad(pred, 5, mode="reflect"), np.pad(ref, 5, mode="reflect")
    wa, wb = pa[i : i + 11, j : j + 11, k : k + 11], pb[i : i + 11, j : j + 11, k : k + 11]
    ma, mb = (w * wa).sum(), (w * wb).sum()
    va, vb = (w * (wa - ma) ** 2).sum(), (w * (wb - mb) ** 2).sum()
    cov = (w * (wa - ma) * (wb - mb)).sum()
    c1, c2 = 1e-4, 9e-4
    expected = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    assert ssim_map(pred, ref)[i, j, k] == pytest.approx(expected, abs=1e-10)


def test_psnr_values(ref):
    m = ref > 0.2
    assert masked_psnr(ref, ref, m) == math.inf
    assert masked_psnr(ref + 0.1, ref, m) == pytest.approx(20.0, abs=1e-9)
    rng = np.random.default_rng(2)
    err = rng.normal(0, 0.1, ref.shape)
    a = masked_psnr(ref + err, ref, m)
    b = masked_psnr(ref + err / math.sqrt(2), ref, m)
    assert b - a == pytest.approx(10 * math.log10(2), abs=1e-9)


def test_empty_region_and_shape_errors(ref):
    with pytest.raises(EmptyRegionError):
        masked_ssim(ref, ref, np.zeros(ref.shape, bool))
    with pytest.raises(ShapeError):
        masked_psnr(ref, ref, np.ones((3, 3, 3), bool))


def test_region_masks(case):
    ref = case.sequences["t2w"].data
    tumor, healthy, brain = region_masks(ref, case.seg)
    assert np.array_equal(tumor, case.seg.labels > 0)
    assert not (tumor & healthy).any()
    assert np.array_equal(healthy | (tumor & brain), brain)


def test_normalize_pair_uses_reference_range():
    ref = np.array([2.0, 4.0, 6.0])
    pred = np.array([0.0, 4.0, 10.0])
    a, b = normalize_pair(pred, ref)
    assert np.array_equal(b, [0, 0.5, 1])
    assert np.array_equal(a, [0, 0.5, 1])


def test_identity_case_row(case):
    ref = case.sequences["t1c"].data
    row = evaluate_case(ref, ref, case.seg, case.case_id)
    assert (row.ssim_h, row.ssim_t, row.psnr_h, row.psnr_t) == (pytest.approx(1.0), pytest.approx(1.0), math.inf, math.inf)


def test_zero_prediction_row(case):
    ref = case.sequences["t1c"].data
    row = evaluate_case(np.zeros_like(ref), ref, case.seg)
    for v in (row.ssim_h, row.ssim_t):
        assert -1 <= v < 1
    assert math.isfinite(row.psnr_h) and math.isfinite(row.psnr_t)


def test_case_without_tumor_gives_nan_tumor_columns(case):
    ref = case.sequences["t1c"].data
    row = evaluate_case(ref, ref, np.zeros(ref.shape, np.uint16))
    assert math.isnan(row.ssim_t) and math.isnan(row.psnr_t)
    g = evaluate_global(ref * 0.9, ref)
    assert 0 < g.ssim_h < 1 and math.isnan(g.ssim_t)


def test_mean_row_rules():
    rows = [MetricRow("a", 0.5, math.nan, 10.0, math.inf), MetricRow("b", 0.7, 0.4, 20.0, 30.0)]
    m = mean_row(rows)
    assert m.case_id == "mean"
    assert m.ssim_h == pytest.approx(0.6) and m.ssim_t == 0.4 and m.psnr_h == 15.0 and m.psnr_t == math.inf


def test_csv_round_trip_and_stable_order(case, tmp_path):
    ref = case.sequences["t2f"].data
    rows = [evaluate_case(ref * s, ref, case.seg, f"c{i}") for i, s in enumerate((1.0, 0.8, 0.5))]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics_csv(rows, p1)
    write_metrics_csv(rows, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_text().splitlines()[0] == ",".join(CSV_FIELDS)
    back = read_metrics_csv(p1)
    assert [r.case_id for r in back] == ["c0", "c1", "c2", "mean"]
    assert back[0].psnr_h == math.inf
    assert back[1] == rows[1]
