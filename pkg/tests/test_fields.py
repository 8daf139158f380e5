import numpy as np
import pytest

from irregrid.errors import CoverageMismatch, MaskedRegion, OutOfDomain
from irregrid.fields import (FieldStack, GridSpec, NeighborhoodSpec,
                             TrackObservations, extract_patch,
                             neighborhood_query, sample_field, upsample)


# ---------------------------------------------------------------------------
# oracles


def bilinear_oracle(corner_vals, u, v):
    """Direct 4-term weighted sum: corners ordered (r0c0, r0c1, r1c0, r1c1)."""
    a, b, c, d = corner_vals
    return (1 - u) * (1 - v) * a + (1 - u) * v * b + u * (1 - v) * c + u * v * d


def brute_force_query(obs, t0, s0, spec):
    keep = []
    for i in range(len(obs)):
        if abs(obs.t[i] - t0) > spec.radius_days:
            continue
        if max(abs(obs.lat[i] - s0[0]), abs(obs.lon[i] - s0[1])) > spec.radius_deg:
            continue
        keep.append(i)
    return set(zip(obs.t[keep], obs.lat[keep], obs.lon[keep], obs.value[keep]))


def as_set(obs):
    return set(zip(obs.t, obs.lat, obs.lon, obs.value))


# ---------------------------------------------------------------------------
# grids and stacks


def test_grid_counts():
    g = GridSpec(36.5, 40.0, 1.5, 8.5, 0.05)
    assert g.n_rows == 71
    assert g.n_cols == 141
    assert np.isclose(g.lats()[-1], 40.0)
    assert np.isclose(g.lons()[-1], 8.5)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(1.0, 0.0, 0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        GridSpec(0.0, 1.0, 0.0, 1.0, 0.0)


def test_stack_validation():
    g = GridSpec(0, 1, 0, 1, 0.5)
    good = np.zeros((2, 3, 3))
    FieldStack(g, [0, 1], good)
    with pytest.raises(ValueError):
        FieldStack(g, [1, 1], good)  # not strictly increasing
    bad = good.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        FieldStack(g, [0, 1], bad)
    # NaN is fine when masked
    mask = np.zeros_like(good, dtype=bool)
    mask[0, 0, 0] = True
    FieldStack(g, [0, 1], bad, mask)


def test_observation_validation():
    with pytest.raises(ValueError):
        TrackObservations([0.0], [1.0], [2.0], [np.inf])
    obs = TrackObservations.empty()
    assert len(obs) == 0


# ---------------------------------------------------------------------------
# sample_field


def test_sample_constant_stack():
    g = GridSpec(0, 2, 0, 2, 0.5)
    st = FieldStack(g, [0, 1, 2], np.full((3, 5, 5), 5.0))
    for t, s in [(0.0, (0.3, 1.7)), (1.5, (1.0, 1.0)), (2.0, (2.0, 2.0))]:
        assert sample_field(st, t, s) == pytest.approx(5.0, abs=1e-14)


def test_sample_linear_in_lon_is_exact():
    g = GridSpec(0, 1, 0, 2, 0.5)
    lon = g.lons()
    vals = np.tile(lon, (g.n_rows, 1))[None, :, :]
    st = FieldStack(g, [0], vals)
    # midway between two nodes in lon
    assert sample_field(st, 0, (0.5, 0.75)) == pytest.approx(0.75, abs=1e-14)


def test_sample_cell_center_matches_weighted_sum_oracle():
    rng = np.random.default_rng(7)
    g = GridSpec(0, 1, 0, 1, 1.0)  # single 2x2 cell
    vals = rng.normal(size=(1, 2, 2))
    st = FieldStack(g, [0], vals)
    got = sample_field(st, 0, (0.5, 0.5))
    corners = (vals[0, 0, 0], vals[0, 0, 1], vals[0, 1, 0], vals[0, 1, 1])
    expect = bilinear_oracle(corners, 0.5, 0.5)
    assert got == pytest.approx(expect, abs=1e-14)
    assert got == pytest.approx(np.mean(vals), abs=1e-14)


def test_sample_offgrid_random_points_match_oracle():
    rng = np.random.default_rng(21)
    g = GridSpec(0, 2, 0, 3, 0.25)
    vals = rng.normal(size=(4, g.n_rows, g.n_cols))
    st = FieldStack(g, [0, 1, 3, 6], vals)
    for _ in range(50):
        lat = rng.uniform(0, 2)
        lon = rng.uniform(0, 3)
        t = rng.uniform(0, 6)
        # oracle: manual bracket + bilinear of each slice + linear blend
        times = np.array([0, 1, 3, 6])
        hi = int(np.searchsorted(times, t))
        if times[min(hi, 3)] == t:
            lo = hi
            w = 0.0
        else:
            lo = hi - 1
            w = (t - times[lo]) / (times[hi] - times[lo])
        r0 = min(int(lat // 0.25), g.n_rows - 2)
        c0 = min(int(lon // 0.25), g.n_cols - 2)
        u = lat / 0.25 - r0
        v = lon / 0.25 - c0

        def bl(i):
            return bilinear_oracle((vals[i, r0, c0], vals[i, r0, c0 + 1],
                                    vals[i, r0 + 1, c0], vals[i, r0 + 1, c0 + 1]),
                                   u, v)

        expect = (1 - w) * bl(lo) + w * bl(hi)
        assert sample_field(st, t, (lat, lon)) == pytest.approx(expect, abs=1e-12)


def test_sample_exact_at_nodes_and_days():
    rng = np.random.default_rng(3)
    g = GridSpec(10, 11, 20, 21, 0.25)
    vals = rng.normal(size=(3, g.n_rows, g.n_cols))
    st = FieldStack(g, [0, 2, 5], vals)
    for it, day in enumerate([0, 2, 5]):
        for r in range(g.n_rows):
            for c in range(g.n_cols):
                s = (10 + 0.25 * r, 20 + 0.25 * c)
                assert sample_field(st, day, s) == vals[it, r, c]


def test_sample_out_of_domain():
    g = GridSpec(0, 1, 0, 1, 0.5)
    st = FieldStack(g, [0, 1], np.zeros((2, 3, 3)))
    with pytest.raises(OutOfDomain):
        sample_field(st, 0, (1.5, 0.5))
    with pytest.raises(OutOfDomain):
        sample_field(st, 2.0, (0.5, 0.5))


def test_sample_masked_region():
    g = GridSpec(0, 1, 0, 1, 0.25)
    vals = np.ones((2, 5, 5))
    mask = np.zeros_like(vals, dtype=bool)
    mask[0, 2, 2] = True  # node (0.5, 0.5) on the first slice
    st = FieldStack(g, [0, 1], vals, mask)
    with pytest.raises(MaskedRegion):
        sample_field(st, 0, (0.4, 0.4))  # cell touching the masked node
    # a cell away from the masked node on the same slice is fine
    assert sample_field(st, 0, (0.1, 0.1)) == 1.0
    # masked node on the lo bracket slice poisons interpolated times too
    with pytest.raises(MaskedRegion):
        sample_field(st, 0.5, (0.4, 0.4))
    # exact query on the clean slice does not look at slice 0
    assert sample_field(st, 1, (0.4, 0.4)) == 1.0


# ---------------------------------------------------------------------------
# extract_patch


def test_patch_constant():
    g = GridSpec(0, 2, 0, 2, 0.5)
    st = FieldStack(g, [0], np.full((1, 5, 5), 3.25))
    patch = extract_patch(st, 0, (1.0, 1.0), 1)
    assert patch.shape == (9,)
    assert np.all(patch == 3.25)


def test_patch_node_exactness():
    rng = np.random.default_rng(5)
    g = GridSpec(0, 2, 0, 2, 0.5)
    vals = rng.normal(size=(2, 5, 5))
    st = FieldStack(g, [0, 1], vals)
    patch = extract_patch(st, 1, (1.0, 1.5), 1)  # node (2, 3)
    expect = vals[1, 1:4, 2:5].ravel()
    np.testing.assert_array_equal(patch, expect)


def test_patch_offnode_matches_per_entry_oracle():
    rng = np.random.default_rng(11)
    g = GridSpec(0, 2, 0, 2, 0.25)
    vals = rng.normal(size=(3, g.n_rows, g.n_cols))
    st = FieldStack(g, [0, 1, 2], vals)
    t, lat, lon = 0.7, 0.9, 1.1
    patch = extract_patch(st, t, (lat, lon), 1)
    idx = 0
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            expect = sample_field(st, t, (lat + 0.25 * i, lon + 0.25 * j))
            assert patch[idx] == pytest.approx(expect, abs=1e-14)
            idx += 1


def test_patch_center_equals_sample():
    rng = np.random.default_rng(13)
    g = GridSpec(0, 2, 0, 2, 0.25)
    st = FieldStack(g, [0, 4], rng.normal(size=(2, g.n_rows, g.n_cols)))
    for _ in range(20):
        t = rng.uniform(0, 4)
        lat = rng.uniform(0.3, 1.7)
        lon = rng.uniform(0.3, 1.7)
        patch = extract_patch(st, t, (lat, lon), 1)
        assert patch[4] == pytest.approx(sample_field(st, t, (lat, lon)), abs=1e-14)


def test_patch_footprint_out_of_domain():
    g = GridSpec(0, 1, 0, 1, 0.25)
    st = FieldStack(g, [0], np.zeros((1, 5, 5)))
    with pytest.raises(OutOfDomain):
        extract_patch(st, 0, (0.1, 0.5), 1)  # footprint leaves the south edge


# ---------------------------------------------------------------------------
# upsample


def test_upsample_constant():
    lr = FieldStack(GridSpec(0, 1, 0, 1, 0.5), [0], np.full((1, 3, 3), 2.5))
    hr = upsample(lr, GridSpec(0, 1, 0, 1, 0.1))
    assert np.allclose(hr.values, 2.5, atol=1e-14)


def test_upsample_identity():
    rng = np.random.default_rng(17)
    g = GridSpec(0, 1, 0, 1, 0.25)
    lr = FieldStack(g, [0, 1], rng.normal(size=(2, 5, 5)))
    hr = upsample(lr, g)
    np.testing.assert_array_equal(hr.values, lr.values)


def test_upsample_linear_ramp():
    g = GridSpec(0, 1, 0, 2, 0.5)
    lon = np.tile(g.lons(), (g.n_rows, 1))
    lr = FieldStack(g, [0], 3.0 * lon[None])
    hr_grid = GridSpec(0, 1, 0, 2, 0.1)
    hr = upsample(lr, hr_grid)
    expect = 3.0 * np.tile(hr_grid.lons(), (hr_grid.n_rows, 1))
    assert np.max(np.abs(hr.values[0] - expect)) < 1e-12


def test_upsample_round_trip_at_source_nodes():
    rng = np.random.default_rng(19)
    g = GridSpec(0, 1, 0, 1, 0.25)
    lr = FieldStack(g, [0], rng.normal(size=(1, 5, 5)))
    hr = upsample(lr, GridSpec(0, 1, 0, 1, 0.05))
    for r in range(5):
        for c in range(5):
            got = sample_field(hr, 0, (0.25 * r, 0.25 * c))
            assert got == pytest.approx(lr.values[0, r, c], abs=1e-12)


def test_upsample_coverage_mismatch():
    lr = FieldStack(GridSpec(0, 1, 0, 1, 0.5), [0], np.zeros((1, 3, 3)))
    with pytest.raises(CoverageMismatch):
        upsample(lr, GridSpec(0, 1.5, 0, 1, 0.5))


# ---------------------------------------------------------------------------
# neighborhood_query


def test_query_empty():
    spec = NeighborhoodSpec(1.0, 2.0)
    out = neighborhood_query(TrackObservations.empty(), 0.0, (0.0, 0.0), spec)
    assert len(out) == 0


def test_query_single_record_at_anchor():
    obs = TrackObservations([3.0], [1.0], [2.0], [9.0])
    out = neighborhood_query(obs, 3.0, (1.0, 2.0), NeighborhoodSpec(0.1, 0.0))
    assert len(out) == 1
    assert out.value[0] == 9.0


def test_query_matches_brute_force():
    rng = np.random.default_rng(23)
    obs = TrackObservations(rng.uniform(0, 10, 100), rng.uniform(0, 5, 100),
                            rng.uniform(0, 5, 100), rng.normal(size=100))
    spec = NeighborhoodSpec(1.2, 2.5)
    t0, s0 = 4.0, (2.5, 2.0)
    got = neighborhood_query(obs, t0, s0, spec)
    assert as_set(got) == brute_force_query(obs, t0, s0, spec)


def test_query_order_invariant():
    rng = np.random.default_rng(29)
    for trial in range(10):
        n = 60
        obs = TrackObservations(rng.uniform(0, 8, n), rng.uniform(-2, 2, n),
                                rng.uniform(-2, 2, n), rng.normal(size=n))
        perm = rng.permutation(n)
        shuffled = obs.subset(perm)
        spec = NeighborhoodSpec(rng.uniform(0.3, 2.0), rng.uniform(0.0, 3.0))
        t0 = rng.uniform(0, 8)
        s0 = (rng.uniform(-2, 2), rng.uniform(-2, 2))
        a = neighborhood_query(obs, t0, s0, spec)
        b = neighborhood_query(shuffled, t0, s0, spec)
        assert as_set(a) == as_set(b)
        assert as_set(a) == brute_force_query(obs, t0, s0, spec)
