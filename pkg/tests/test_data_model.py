import numpy as np
import pytest

from miboot.data_model import (CompleteArrays, EstimatorKind, ImputedDataset,
                               ObservedDataset, ThetaParams, as_complete,
                               validate)


def small_dataset():
    X = np.array([[0.5, 1.0], [-0.2, 0.3]])
    return ObservedDataset(A=[0, 1], Y=[1.0, 2.0], X=X,
                           R=np.ones((2, 2), int), R_Y=[1, 1])


def test_smallest_valid_dataset_ok():
    assert validate(small_dataset()).ok


def test_mask_value_mismatch_reported():
    X = np.array([[0.5, 1.0], [-0.2, 0.3]])
    R = np.array([[1, 0], [1, 1]])   # X[0,1] holds a value but is masked
    ds = ObservedDataset(A=[0, 1], Y=[1.0, 2.0], X=X, R=R, R_Y=[1, 1])
    rep = validate(ds)
    assert not rep.ok
    assert any("mask/value mismatch at (0,1)" in v for v in rep.violations)


def test_empty_control_arm_reported():
    X = np.array([[0.5, 1.0], [-0.2, 0.3]])
    ds = ObservedDataset(A=[1, 1], Y=[1.0, 2.0], X=X,
                         R=np.ones((2, 2), int), R_Y=[1, 1])
    rep = validate(ds)
    assert any("empty control arm" in v for v in rep.violations)


def test_masked_positions_must_hold_nan():
    X = np.array([[0.5, np.nan], [-0.2, 0.3]])
    R = np.ones((2, 2), int)         # claims observed where NaN sits
    ds = ObservedDataset(A=[0, 1], Y=[1.0, 2.0], X=X, R=R, R_Y=[1, 1])
    assert not validate(ds).ok


def test_validate_is_idempotent_and_side_effect_free():
    ds = small_dataset()
    x_before = ds.X.copy()
    r1 = validate(ds)
    r2 = validate(ds)
    assert r1 == r2
    np.testing.assert_array_equal(ds.X, x_before)


def test_arrays_are_frozen():
    ds = small_dataset()
    with pytest.raises(ValueError):
        ds.X[0, 0] = 9.0


def test_imputed_dataset_copies_observed_entries_exactly():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, p = 8, 3
        X = rng.standard_normal((n, p))
        R = (rng.random((n, p)) < 0.7).astype(int)
        Xm = X.copy()
        Xm[R == 0] = np.nan
        base = ObservedDataset(A=rng.integers(0, 2, n), Y=rng.standard_normal(n),
                               X=Xm, R=R, R_Y=np.ones(n, int))
        Xstar = X + rng.standard_normal((n, p)) * (R == 0)
        Xstar[R == 1] = Xm[R == 1]
        imp = ImputedDataset(base=base, j=1, Xstar=Xstar, Ystar=base.Y)
        # bitwise equality on observed positions
        assert np.array_equal(imp.Xstar[R == 1], base.X[R == 1])
        assert np.array_equal(imp.Ystar, base.Y)


def test_estimator_kind_validation():
    with pytest.raises(ValueError):
        EstimatorKind("nearest")
    with pytest.raises(ValueError):
        EstimatorKind("matching", M=0)
    with pytest.raises(ValueError):
        EstimatorKind("matching", match_on="mahalanobis")
    k = EstimatorKind("matching", M=2, match_on="propensity")
    assert k.M == 2


def test_theta_params_validation():
    ok = dict(beta0=np.zeros(3), beta1=np.zeros(3), alpha=np.zeros(3),
              mu_x=np.zeros(2), sigma_x=np.eye(2))
    ThetaParams(sigma0=1.0, sigma1=1.0, **ok)
    with pytest.raises(ValueError):
        ThetaParams(sigma0=0.0, sigma1=1.0, **ok)
    with pytest.raises(ValueError):
        ThetaParams(sigma0=1.0, sigma1=1.0, beta0=np.zeros(3),
                    beta1=np.zeros(3), alpha=np.zeros(3), mu_x=np.zeros(2),
                    sigma_x=np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_as_complete_dispatch():
    ds = small_dataset()
    A, Y, X = as_complete(ds)
    np.testing.assert_array_equal(A, ds.A)
    ca = CompleteArrays(A=ds.A, Y=ds.Y, X=ds.X)
    A2, Y2, X2 = as_complete(ca)
    np.testing.assert_array_equal(Y2, ds.Y)
    incomplete = ObservedDataset(
        A=[0, 1], Y=[1.0, np.nan], X=ds.X, R=np.ones((2, 2), int), R_Y=[1, 0])
    with pytest.raises(ValueError):
        as_complete(incomplete)
