import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mrisynth.errors import DegenerateHistogramError, DegenerateRangeError, FormatError
from mrisynth.preprocess import (
    DEFAULT_PERCENTILES,
    MinMaxScale,
    StandardScale,
    fit_landmarks,
    input_names,
    load_scales,
    minmax_apply,
    minmax_fit,
    minmax_fit_inputs,
    minmax_invert,
    normalize_case,
    save_scales,
    standardize,
)
from mrisynth.volume_io import Volume


def vol(values, shape=None):
    a = np.asarray(values, dtype=np.float32)
    return Volume(a.reshape(shape or (1, 1, a.size)))


def test_uniform_foreground_gives_linear_landmarks():
    rng = np.random.default_rng(0)
    sample = rng.uniform(0, 1, size=100_000)
    sample[sample == 0] = 1e-9
    scale = fit_landmarks([vol(sample, (100, 100, 10))])
    # oracle: percentiles of the sampled voxels, stretched so 1st -> 0 and 99th -> 100
    p = np.percentile(sample, DEFAULT_PERCENTILES)
    direct = (p - p[0]) / (p[-1] - p[0]) * 100
    assert np.allclose(scale.standard_landmarks, direct, atol=1e-6)
    ideal = (np.asarray(DEFAULT_PERCENTILES) - 1) / 98 * 100
    assert np.max(np.abs(np.asarray(scale.standard_landmarks) - ideal)) < 2.0


def test_identical_volumes_match_single(case):
    v = case.sequences["t2f"]
    assert fit_landmarks([v, v]).standard_landmarks == pytest.approx(fit_landmarks([v]).standard_landmarks, abs=1e-12)


def test_landmarks_span_standard_range(cases16):
    s = fit_landmarks([c.sequences["t1c"] for c in cases16])
    assert s.standard_landmarks[0] == 0.0
    assert s.standard_landmarks[-1] == pytest.approx(100.0)
    assert np.all(np.diff(s.standard_landmarks) > 0)


@pytest.mark.parametrize("data", [np.zeros((4, 4, 4)), np.full((4, 4, 4), 3.0)])
def test_degenerate_histogram(data):
    with pytest.raises(DegenerateHistogramError):
        fit_landmarks([Volume(data.astype(np.float32))])


def test_ties_broken_by_small_step():
    # 99% of the foreground at one value collapses most percentiles
    data = np.ones(1000, np.float32)
    data[:30] = 0.5
    data[-30:] = 2.0
    s = fit_landmarks([vol(data, (10, 10, 10))])
    assert np.all(np.diff(s.standard_landmarks) > 0)


def test_standardize_fixed_point():
    rng = np.random.default_rng(1)
    data = rng.uniform(1, 100, size=20_000).astype(np.float32)
    v = vol(data, (20, 20, 50))
    own = np.percentile(data.astype(np.float64), DEFAULT_PERCENTILES)
    out = standardize(v, StandardScale("t1n", DEFAULT_PERCENTILES, tuple(own)))
    assert np.max(np.abs(out.data - v.data)) < 1e-5


def test_standardize_absorbs_global_scale(case, scales16):
    v = case.sequences["t2w"]
    doubled = v.with_data(v.data * 2)
    a = standardize(v, scales16["t2w"]).data
    b = standardize(doubled, scales16["t2w"]).data
    # explicit oracle: both inputs map through their own percentiles onto the same landmarks
    assert np.max(np.abs(a - b)) < 1e-4


def test_standardize_keeps_background_and_clamps(case, scales16):
    v = case.sequences["t1c"]
    out = standardize(v, scales16["t1c"]).data
    assert np.all(out[v.data == 0] == 0)
    assert out.max() <= 1.5 * scales16["t1c"].standard_landmarks[-1] + 1e-4
    assert out.min() >= 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 200, elements=st.floats(0.01, 1000)))
def test_standardize_is_monotone(values):
    if np.unique(values).size < 2:
        return
    scale = StandardScale("x", DEFAULT_PERCENTILES, tuple(np.linspace(0, 100, len(DEFAULT_PERCENTILES))))
    v = vol(values, (1, 1, values.size))
    out = standardize(v, scale).data.ravel().astype(np.float64)
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(out[order]) >= -1e-4)


def test_standard_scale_validation():
    with pytest.raises(FormatError):
        StandardScale("x", (10, 5), (0, 1))
    with pytest.raises(FormatError):
        StandardScale("x", (10,), (0,))
    with pytest.raises(FormatError):
        StandardScale("x", (10, 20), (1, 1))


def test_minmax_joint_fit():
    vols = [vol([0, 5]), vol([1, 9]), vol([2, 7])]
    assert minmax_fit_inputs(vols) == MinMaxScale(0, 9)
    assert minmax_fit_inputs([vol([1]), vol([2]), vol([3])]) == MinMaxScale(1, 3)


def test_minmax_degenerate():
    with pytest.raises(DegenerateRangeError):
        minmax_fit_inputs([vol([4, 4])] * 3)
    with pytest.raises(DegenerateRangeError):
        minmax_fit_inputs([vol([1, 2]), vol([1, 2])])


def test_minmax_apply_and_clamped_invert():
    s = MinMaxScale(0, 2)
    assert minmax_apply(vol([1.0]), s).data.item() == 0.5
    assert minmax_invert(vol([-0.1]), s).data.item() == 0.0


def test_minmax_round_trip(case):
    v = case.sequences["t1n"]
    s = minmax_fit([v])
    back = minmax_invert(minmax_apply(v, s), s)
    assert np.max(np.abs(back.data.astype(np.float64) - v.data)) / s.hi < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.floats(-100, 100), st.floats(0.1, 100), arrays(np.float64, 16, elements=st.floats(0, 1)))
def test_minmax_invert_apply_identity(lo, width, u):
    s = MinMaxScale(lo, lo + width)
    data = (lo + u * width).reshape(2, 2, 4)
    v = Volume(data)
    back = minmax_invert(minmax_apply(v, s), s).data.astype(np.float64)
    assert np.allclose(back, np.maximum(data, 0), atol=1e-5 * max(1.0, abs(lo) + width))


def test_input_names_are_canonical():
    assert input_names("t1c") == ("t1n", "t2f", "t2w")
    assert input_names("t2w") == ("t1c", "t1n", "t2f")


def test_normalize_case_scales_inputs_jointly_target_separately(case, scales16):
    nc = normalize_case(case, "t2f", scales16)
    ins = [nc.case.sequences[n].data for n in ("t1c", "t1n", "t2w")]
    assert min(a.min() for a in ins) == 0.0
    assert max(a.max() for a in ins) == pytest.approx(1.0, abs=1e-6)
    t = nc.case.sequences["t2f"].data
    assert t.min() == 0.0 and t.max() == pytest.approx(1.0, abs=1e-6)
    assert nc.target_scale != nc.input_scale


def test_normalize_without_target(case, scales16):
    nc = normalize_case(case.without("t1n"), "t1n", scales16)
    assert nc.target_scale is None
    assert nc.case.present() == ("t1c", "t2f", "t2w")


def test_scales_file_round_trip(scales16, tmp_path):
    path = tmp_path / "landmarks.json"
    save_scales(scales16, path)
    assert load_scales(path) == scales16
    path.write_text("{not json")
    with pytest.raises(FormatError):
        load_scales(path)
