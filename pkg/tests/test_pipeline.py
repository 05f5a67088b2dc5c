import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from regfp.errors import InvalidInput, LayoutMismatch
from regfp.pipeline import io as rio
from regfp.pipeline.manifest import RunManifest, read_manifest, verify_manifest
from regfp.pipeline.preprocess import (
    GriddedSeries,
    PreprocessRules,
    aggregate_boxes,
    annual_means,
    center_reference,
    detrend,
    pentad_means,
    split_control,
    to_pentads,
    to_vector,
)

nan = math.nan


# -- persistence --------------------------------------------------------------

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=40)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.one_of(finite, st.just(nan))))
def test_binary_and_csv_round_trip_bit_exact(M):
    b = rio.decode_binary(rio.encode_binary(M))
    c = rio.decode_csv(rio.encode_csv(M))
    for out in (b, c):
        assert out.shape == M.shape
        np.testing.assert_array_equal(np.isnan(out), np.isnan(M))
        ok = ~np.isnan(M)
        assert out[ok].tobytes() == M[ok].tobytes()


def test_binary_layout():
    blob = rio.encode_binary([[1.0, 2.0, 3.0]])
    assert blob[:8] == b"DACCMAT1"
    assert blob[8:16] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(blob) == 16 + 24
    assert np.frombuffer(blob[16:24], "<f8")[0] == 1.0


def test_binary_errors():
    with pytest.raises(InvalidInput):
        rio.decode_binary(b"NOTAMAT1" + bytes(8))
    with pytest.raises(InvalidInput):
        rio.decode_binary(rio.encode_binary(np.eye(2))[:-1])


def test_csv_sentinel_and_header():
    text = rio.encode_csv([[1.5, nan]], header=["a", "b"])
    assert text == "a,b\n1.5,NA\n"
    M = rio.decode_csv(text)
    assert M[0, 0] == 1.5 and np.isnan(M[0, 1])


def test_csv_errors():
    with pytest.raises(InvalidInput):
        rio.decode_csv("1,2\n3\n")
    with pytest.raises(InvalidInput):
        rio.decode_csv("1,2\n3,x\n")
    with pytest.raises(InvalidInput):
        rio.decode_csv("\n")


def test_file_helpers(tmp_path):
    M = np.arange(6.0).reshape(2, 3)
    for name in ("m.bin", "m.csv"):
        p = rio.write_matrix(tmp_path / name, M)
        np.testing.assert_array_equal(rio.read_matrix(p), M)
    rio.write_matrix(tmp_path / "v.csv", [[1.0], [2.0]])
    np.testing.assert_array_equal(rio.read_vector(tmp_path / "v.csv"), [1.0, 2.0])
    with pytest.raises(InvalidInput):
        rio.read_vector(tmp_path / "m.csv")


def test_json_output_is_canonical(tmp_path):
    text = rio.dumps({"b": np.float64(nan), "a": np.arange(2)})
    assert text.endswith("\n")
    assert json.loads(text) == {"a": [0, 1], "b": None}
    assert text.index('"a"') < text.index('"b"')


# -- GriddedSeries ------------------------------------------------------------

def monthly(values, start_year=2000, **kw):
    return GriddedSeries.from_array(np.asarray(values, float), "monthly", start_year, **kw)


def test_series_validation():
    with pytest.raises(InvalidInput):
        GriddedSeries.from_array(np.zeros((2, 2)), "weekly")
    with pytest.raises(LayoutMismatch):
        GriddedSeries.from_array(np.zeros((2, 4)), "annual", grid=(3, 1))
    with pytest.raises(InvalidInput):
        GriddedSeries(np.array([[np.inf]]), np.array([[False]]), "annual")
    s = GriddedSeries.from_array([[1.0, nan]], "annual")
    assert s.values[0, 1] == 0.0 and s.missing[0, 1]
    np.testing.assert_array_equal(np.isnan(s.to_array()), [[False, True]])


# -- annual and 5-year means --------------------------------------------------

def test_annual_full_year():
    s = annual_means(monthly(np.arange(12.0)[:, None]))
    assert s.resolution == "annual" and s.values[0, 0] == 5.5 and not s.missing[0, 0]


def test_annual_threshold_boundary():
    v = np.arange(12.0)
    v8 = v.copy()
    v8[8:] = nan
    v9 = v.copy()
    v9[9:] = nan
    s = annual_means(monthly(np.column_stack([v8, v9])))
    assert s.missing[0, 0]
    assert not s.missing[0, 1] and s.values[0, 1] == pytest.approx(4.0)


def test_annual_errors():
    with pytest.raises(InvalidInput):
        annual_means(GriddedSeries.from_array(np.zeros((12, 1)), "annual"))
    with pytest.raises(InvalidInput):
        annual_means(monthly(np.zeros((13, 1))))


def annual(values, start_year=2000, **kw):
    return GriddedSeries.from_array(np.asarray(values, float), "annual", start_year, **kw)


def test_pentad_rules():
    cols = np.array([
        [1, 2, 3, 4, 5],
        [1, nan, 3, nan, 5],
        [nan, nan, 3, nan, 5],
    ], float).T
    s = pentad_means(annual(cols))
    assert s.resolution == "pentad"
    assert s.values[0, 0] == 3.0 and s.values[0, 1] == 3.0
    assert list(s.missing[0]) == [False, False, True]


def test_pentad_drops_partial_window_and_checks_resolution():
    s = pentad_means(annual(np.ones((12, 1))))
    assert s.n_time == 2
    with pytest.raises(InvalidInput):
        pentad_means(monthly(np.ones((12, 1))))


# -- aggregation --------------------------------------------------------------

def test_aggregate_identity():
    s = annual(np.arange(8.0).reshape(2, 4), grid=(2, 2))
    out = aggregate_boxes(s, (1, 1))
    np.testing.assert_array_equal(out.values, s.values)


def test_aggregate_two_by_one():
    s = annual([[1.0, 3.0]], grid=(2, 1), bounds=[[0, 5, 0, 5], [0, 5, 5, 10]])
    out = aggregate_boxes(s, (2, 1))
    assert out.values[0, 0] == 2.0 and out.grid == (1, 1)
    np.testing.assert_array_equal(out.bounds, [[0, 5, 0, 10]])


def test_aggregate_missing_sub_boxes():
    s = annual([[1.0, nan, 5.0, 3.0], [nan, nan, nan, nan]], grid=(2, 2))
    out = aggregate_boxes(s, (2, 2))
    assert out.values[0, 0] == 3.0 and not out.missing[0, 0]
    assert out.missing[1, 0]


def test_aggregate_errors():
    with pytest.raises(LayoutMismatch):
        aggregate_boxes(annual(np.zeros((1, 6)), grid=(3, 2)), (2, 1))
    with pytest.raises(LayoutMismatch):
        aggregate_boxes(annual(np.zeros((1, 4))), (2, 1))


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(1, 1), (2, 1), (1, 2), (2, 2)]))
def test_masking_commutes_with_aggregation(seed, factor):
    rng = np.random.default_rng(seed)
    grid = (4, 2)
    data = annual(rng.standard_normal((5, 8)), grid=grid)
    # mask whole target blocks so both orders agree
    target = rng.random((5, 8 // (factor[0] * factor[1]))) < 0.3
    g_lat, g_lon = grid[0] // factor[0], grid[1] // factor[1]
    blocks = target.reshape(5, g_lat, 1, g_lon, 1)
    fine = np.broadcast_to(blocks, (5, g_lat, factor[0], g_lon, factor[1])).reshape(5, 8)
    masked_then = aggregate_boxes(annual(np.where(fine, nan, data.values), grid=grid), factor)
    agg = aggregate_boxes(data, factor)
    then_masked = annual(np.where(target, nan, agg.values), grid=agg.grid)
    np.testing.assert_array_equal(masked_then.missing, then_masked.missing)
    np.testing.assert_allclose(masked_then.values, then_masked.values, atol=1e-12)


# -- centering ----------------------------------------------------------------

def test_center_constant_gives_zeros():
    out = center_reference(annual(np.full((6, 2), 4.2), start_year=1960), (1961, 1963))
    np.testing.assert_array_equal(out.values, 0.0)


def test_center_full_period_zero_mean():
    rng = np.random.default_rng(0)
    s = annual(rng.standard_normal((10, 3)), start_year=1950)
    out = center_reference(s, (1950, 1959))
    np.testing.assert_allclose(out.values.mean(axis=0), 0.0, atol=1e-15)


def test_center_three_box_toy():
    v = np.array([
        [1.0, 10.0, nan],
        [3.0, nan, 7.0],
        [5.0, 30.0, 9.0],
        [8.0, 40.0, 1.0],
    ])
    out = center_reference(annual(v, start_year=1990), (1990, 1992))
    # reference means: (1+3+5)/3 = 3, (10+30)/2 = 20, (7+9)/2 = 8
    np.testing.assert_allclose(out.to_array(), v - [3.0, 20.0, 8.0])


def test_center_idempotent():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((12, 4))
    v[rng.random(v.shape) < 0.2] = nan
    v[0] = 1.0
    once = center_reference(annual(v, start_year=1950), (1950, 1961))
    twice = center_reference(once, (1950, 1961))
    np.testing.assert_allclose(twice.values, once.values, atol=1e-14)
    np.testing.assert_array_equal(twice.missing, once.missing)


def test_center_pentads_use_whole_windows():
    s = GriddedSeries.from_array([[1.0], [2.0], [3.0]], "pentad", 1955)
    out = center_reference(s, (1956, 1969))
    # only 1960-64 and 1965-69 lie inside the period
    np.testing.assert_allclose(out.values[:, 0], [-1.5, -0.5, 0.5])


def test_center_missing_reference():
    with pytest.raises(InvalidInput):
        center_reference(annual([[1.0, nan], [2.0, 3.0]], start_year=2000), (2000, 2000))
    with pytest.raises(InvalidInput):
        center_reference(annual([[1.0]], start_year=2000), (1900, 1950))


# -- detrending and control splitting ----------------------------------------

def test_detrend_linear_to_zero():
    t = np.arange(40.0)
    v = np.column_stack([2 + 0.3 * t, -1 - 0.1 * t])
    v[5, 1] = nan
    out = detrend(annual(v))
    np.testing.assert_allclose(out.values, 0.0, atol=1e-11)
    assert out.missing[5, 1]


def control_run(years, boxes=3, seed=0, start=0):
    rng = np.random.default_rng(seed)
    t = np.arange(12 * years)
    v = rng.standard_normal((12 * years, boxes)) + 0.01 * t[:, None]
    return GriddedSeries.from_array(v, "monthly", start)


def test_split_130_years_gives_two_blocks():
    ens = split_control([control_run(130)])
    assert ens.n == 2 and ens.N == 3 * 12
    assert ens.centered
    np.testing.assert_allclose(ens.replicates.mean(axis=0), 0.0, atol=1e-12)


def test_split_matches_manual_pipeline():
    run = control_run(125, boxes=2, seed=3)
    rules = PreprocessRules()
    ens = split_control([run], rules)
    d = detrend(run)
    rows = []
    for b in range(2):
        sl = slice(b * 720, (b + 1) * 720)
        part = GriddedSeries(d.values[sl], d.missing[sl], "monthly")
        rows.append(to_vector(to_pentads(part, rules))[0])
    Z = np.array(rows)
    np.testing.assert_allclose(ens.replicates, Z - Z.mean(axis=0), atol=1e-12)


def test_split_mask_propagates():
    mask = np.zeros((720, 3), bool)
    mask[:48, 0] = True  # four missing years -> first pentad of box 0 missing
    mask[:12 * 5, 2] = True  # whole first pentad of box 2 missing
    mask[::12, 1] = True  # one month per year -> box 1 still complete
    ens = split_control([control_run(130, seed=1)], mask=mask)
    dropped = set(range(36)) - set(ens.columns.tolist())
    assert dropped == {0, 2 * 12}


def test_split_mask_shape_checked():
    with pytest.raises(LayoutMismatch):
        split_control([control_run(130)], mask=np.zeros((10, 3), bool))


def test_split_skips_short_runs_with_warning():
    with pytest.warns(UserWarning, match="skipped 1"):
        ens = split_control([control_run(60, seed=1), control_run(59, seed=2), control_run(60, seed=3)])
    assert ens.n == 2


def test_split_needs_two_blocks():
    with pytest.raises(InvalidInput):
        split_control([control_run(100)])


def test_rules_validation():
    with pytest.raises(InvalidInput):
        PreprocessRules(min_months_per_year=13)
    with pytest.raises(InvalidInput):
        PreprocessRules(max_missing_annuals_per_pentad=5)
    with pytest.raises(InvalidInput):
        PreprocessRules(aggregate=(0, 1))


# -- manifests ----------------------------------------------------------------

def test_manifest_verifies_and_detects_tampering(tmp_path):
    inp = rio.write_matrix(tmp_path / "in.csv", np.eye(2))
    out_dir = tmp_path / "out"
    out_dir.mkdir()
    out = rio.write_json(out_dir / "result.json", {"x": 1})
    m = RunManifest(command="fit", seed=3, rules={"a": 1})
    m.add_inputs([inp, None])
    m.add_outputs([out])
    path = m.write(out_dir)
    assert verify_manifest(path) == []
    again = read_manifest(path)
    assert again == m
    assert "timestamp" not in open(path).read()
    with open(out, "a") as fh:
        fh.write(" ")
    os.remove(inp)
    assert sorted(verify_manifest(path)) == sorted([str(inp), os.path.join(str(out_dir), "result.json")])
