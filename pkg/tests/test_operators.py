import numpy as np
import pytest

from irregrid.errors import (CoverageMismatch, DimensionMismatch,
                             InsufficientData, SingularSystem)
from irregrid.fields import FieldStack, GridSpec, TrackObservations
from irregrid.operators import (DesignSystem, OperatorPair, build_design,
                                fit_unconstrained, predict_detail)


def predict_oracle(op, lr_patch, aux_patch):
    """Explicit scalar loop over all 2*(2w+1)^2 terms."""
    total = 0.0
    for i in range(len(lr_patch)):
        total += op.kernel_lr[i] * lr_patch[i]
    for i in range(len(aux_patch)):
        total += op.kernel_aux[i] * aux_patch[i]
    return total


def make_stacks(seed=0, n_days=4, step=0.1):
    rng = np.random.default_rng(seed)
    g = GridSpec(0, 1, 0, 2, step)
    times = np.arange(n_days)
    aux = FieldStack(g, times, rng.normal(size=(n_days, g.n_rows, g.n_cols)))
    low = FieldStack(g, times, rng.normal(size=(n_days, g.n_rows, g.n_cols)))
    return aux, low


def scatter_obs(rng, grid, n, t_max, margin=0.15):
    return TrackObservations(
        rng.uniform(0, t_max, n),
        rng.uniform(grid.lat_min + margin, grid.lat_max - margin, n),
        rng.uniform(grid.lon_min + margin, grid.lon_max - margin, n),
        rng.normal(size=n))


# ---------------------------------------------------------------------------
# OperatorPair


def test_operator_pair_shapes():
    op = OperatorPair(1, np.arange(9.0), np.ones(9))
    assert op.joint.shape == (18,)
    back = OperatorPair.from_joint(op.joint)
    np.testing.assert_array_equal(back.kernel_lr, op.kernel_lr)
    assert back.half_width == 1
    with pytest.raises(DimensionMismatch):
        OperatorPair(1, np.zeros(8), np.zeros(9))


# ---------------------------------------------------------------------------
# build_design


def test_build_design_empty():
    aux, low = make_stacks()
    system = build_design(TrackObservations.empty(), aux, low, 1)
    assert system.n == 0
    assert system.m == 18
    assert system.n_dropped == 0


def test_build_design_node_row_is_stored_patches():
    aux, low = make_stacks(seed=2)
    # observation exactly on node (3, 5) at day 2
    obs = TrackObservations([2.0], [0.3], [0.5], [4.0])
    system = build_design(obs, aux, low, 1)
    assert system.n == 1
    row = system.rows[0]
    np.testing.assert_allclose(row[:9], low.values[2, 2:5, 4:7].ravel(),
                               atol=1e-14)
    np.testing.assert_allclose(row[9:], aux.values[2, 2:5, 4:7].ravel(),
                               atol=1e-14)
    assert system.rhs[0] == pytest.approx(4.0 - low.values[2, 3, 5], abs=1e-12)


def test_build_design_zero_detail_rhs():
    aux, low = make_stacks(seed=3)
    from irregrid.fields import sample_field
    t, s = 1.3, (0.45, 0.83)
    value = sample_field(low, t, s)
    obs = TrackObservations([t], [s[0]], [s[1]], [value])
    system = build_design(obs, aux, low, 1)
    assert system.rhs[0] == pytest.approx(0.0, abs=1e-12)


def test_build_design_drops_edge_footprints():
    aux, low = make_stacks(seed=4)
    obs = TrackObservations([0.0, 0.0], [0.05, 0.5], [1.0, 1.0], [1.0, 1.0])
    system = build_design(obs, aux, low, 1)
    assert system.n == 1
    assert system.n_dropped == 1
    np.testing.assert_array_equal(system.kept, [1])


def test_build_design_grid_mismatch():
    aux, _ = make_stacks(seed=5)
    other = FieldStack(GridSpec(0, 1, 0, 2, 0.2), [0, 1, 2, 3],
                       np.zeros((4, 6, 11)))
    with pytest.raises(CoverageMismatch):
        build_design(TrackObservations.empty(), aux, other, 1)


# ---------------------------------------------------------------------------
# fit_unconstrained


def test_fit_plant_and_recover():
    rng = np.random.default_rng(6)
    m = 18
    rows = rng.normal(size=(5 * m, m))
    target = rng.normal(size=m)
    system = DesignSystem(1, rows, rows @ target, np.arange(5 * m))
    op = fit_unconstrained(system, ridge=0.0)
    err = np.linalg.norm(op.joint - target) / np.linalg.norm(target)
    assert err < 1e-8


def test_fit_zero_rhs_gives_zero_operator():
    rng = np.random.default_rng(7)
    rows = rng.normal(size=(60, 18))
    system = DesignSystem(1, rows, np.zeros(60), np.arange(60))
    op = fit_unconstrained(system, ridge=1e-3)
    np.testing.assert_array_equal(op.joint, np.zeros(18))


def test_fit_insufficient_data():
    rng = np.random.default_rng(8)
    rows = rng.normal(size=(17, 18))
    system = DesignSystem(1, rows, rng.normal(size=17), np.arange(17))
    with pytest.raises(InsufficientData):
        fit_unconstrained(system, min_rows=18)


def test_fit_singular_without_ridge():
    rows = np.zeros((60, 18))
    rows[:, 0] = 1.0  # rank one
    system = DesignSystem(1, rows, np.ones(60), np.arange(60))
    with pytest.raises(SingularSystem):
        fit_unconstrained(system, ridge=0.0)


def test_fit_residual_small_on_consistent_system():
    rng = np.random.default_rng(9)
    for trial in range(5):
        rows = rng.normal(size=(80, 18))
        target = rng.normal(size=18)
        rhs = rows @ target
        system = DesignSystem(1, rows, rhs, np.arange(80))
        op = fit_unconstrained(system, ridge=0.0)
        assert np.linalg.norm(rows @ op.joint - rhs) <= 1e-8 * np.linalg.norm(rhs)


def test_ridge_monotonically_shrinks_solution():
    rng = np.random.default_rng(10)
    for trial in range(3):
        rows = rng.normal(size=(50, 18))
        rhs = rng.normal(size=50)
        system = DesignSystem(1, rows, rhs, np.arange(50))
        norms = []
        for ridge in (0.0, 1e-6, 1e-4, 1e-2, 1.0, 100.0):
            op = fit_unconstrained(system, ridge=ridge)
            norms.append(np.linalg.norm(op.joint))
        assert all(norms[i + 1] <= norms[i] + 1e-12 for i in range(len(norms) - 1))


# ---------------------------------------------------------------------------
# predict_detail


def test_predict_zero_operator():
    op = OperatorPair.zeros(1)
    rng = np.random.default_rng(11)
    assert predict_detail(op, rng.normal(size=9), rng.normal(size=9)) == 0.0


def test_predict_identity_kernel():
    kernel = np.zeros(9)
    kernel[4] = 1.0
    op = OperatorPair(1, kernel, np.zeros(9))
    lr_patch = np.arange(9.0)
    assert predict_detail(op, lr_patch, np.zeros(9)) == 4.0


def test_predict_matches_scalar_loop():
    rng = np.random.default_rng(12)
    for trial in range(10):
        op = OperatorPair(1, rng.normal(size=9), rng.normal(size=9))
        lr_patch = rng.normal(size=9)
        aux_patch = rng.normal(size=9)
        got = predict_detail(op, lr_patch, aux_patch)
        assert got == pytest.approx(predict_oracle(op, lr_patch, aux_patch),
                                    abs=1e-12)


def test_predict_dimension_mismatch():
    op = OperatorPair.zeros(1)
    with pytest.raises(DimensionMismatch):
        predict_detail(op, np.zeros(4), np.zeros(9))


def test_predict_linear_in_operator():
    rng = np.random.default_rng(13)
    a, b = 0.7, -2.1
    op1 = OperatorPair(1, rng.normal(size=9), rng.normal(size=9))
    op2 = OperatorPair(1, rng.normal(size=9), rng.normal(size=9))
    combo = OperatorPair.from_joint(a * op1.joint + b * op2.joint)
    lr_patch = rng.normal(size=9)
    aux_patch = rng.normal(size=9)
    lhs = predict_detail(combo, lr_patch, aux_patch)
    rhs = (a * predict_detail(op1, lr_patch, aux_patch)
           + b * predict_detail(op2, lr_patch, aux_patch))
    assert lhs == pytest.approx(rhs, abs=1e-12)


# ---------------------------------------------------------------------------
# consistency between calibration rows and operator application


def test_reconstruction_identity_at_observation_rows():
    rng = np.random.default_rng(14)
    aux, low = make_stacks(seed=14, step=0.05)
    obs = scatter_obs(rng, aux.grid, 90, t_max=3.0)
    system = build_design(obs, aux, low, 1)
    assert system.n >= 54
    op = fit_unconstrained(system)
    from irregrid.fields import eval_patches, sample_field
    kept = system.kept
    for i in range(0, system.n, 7):
        j = kept[i]
        t, lat, lon = obs.t[j], obs.lat[j], obs.lon[j]
        lr_patch, _ = eval_patches(low, t, lat, lon, 1)
        aux_patch, _ = eval_patches(aux, t, lat, lon, 1)
        pred = predict_detail(op, lr_patch[0], aux_patch[0])
        row_pred = float(system.rows[i] @ op.joint)
        assert pred == pytest.approx(row_pred, abs=1e-10)
        full = sample_field(low, t, (lat, lon)) + pred
        assert full == pytest.approx(
            sample_field(low, t, (lat, lon)) + row_pred, abs=1e-10)
