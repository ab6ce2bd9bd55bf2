import numpy as np
import pytest
from numpy.random import default_rng

from lpckit.errors import InvalidConfidence, RankDeficient
from lpckit.koopman import (
    LiftedLinearModel,
    SnapshotSet,
    collect_snapshots,
    fit_edmd,
    fit_model,
    gaussian_dictionary,
    hoeffding_epsilon,
    identity_dictionary,
    model_residuals,
    validate_residual_bounds,
    vdp_dictionary,
)
from lpckit.plants import get_plant, linear_test_spec


def _linear_snapshots(A, B, M, rng):
    n = A.shape[0]
    X = rng.uniform(-1, 1, (M, n))
    U = rng.uniform(-1, 1, (M, B.shape[1]))
    Xp = X @ A.T + U @ B.T
    return SnapshotSet(X=X, U=U, W=np.zeros((M, n)), Xp=Xp)


def test_edmd_exact_recovery_identity_lift():
    rng = default_rng(0)
    A = np.array([[0.9, 0.1], [-0.05, 0.8]])
    B = np.array([[0.0], [0.5]])
    data = _linear_snapshots(A, B, 200, rng)
    Ahat, Bhat, _ = fit_edmd(data, identity_dictionary(2), theta=0.0, fit_disturbance=False)
    assert np.linalg.norm(Ahat - A) <= 1e-8
    assert np.linalg.norm(Bhat - B) <= 1e-8


def test_edmd_rank_deficient_raises():
    X = np.zeros((10, 2))
    data = SnapshotSet(X=X, U=np.zeros((10, 1)), W=np.zeros((10, 2)), Xp=X)
    with pytest.raises(RankDeficient):
        fit_edmd(data, identity_dictionary(2), theta=0.0, fit_disturbance=False)


def test_ridge_shrinks_towards_zero():
    rng = default_rng(1)
    A = np.array([[0.7]])
    B = np.array([[1.0]])
    data = _linear_snapshots(A, B, 100, rng)
    A0, _, _ = fit_edmd(data, identity_dictionary(1), 0.0, fit_disturbance=False)
    A9, _, _ = fit_edmd(data, identity_dictionary(1), 1e4, fit_disturbance=False)
    assert abs(A9[0, 0]) < abs(A0[0, 0])


def test_vdp_dictionary_observables():
    d = vdp_dictionary()
    x = np.array([0.5, -2.0])
    s = d.lift(x)
    assert np.allclose(s, [0.5, -2.0, 0.25, -0.5])
    assert np.allclose(d.lift_many(np.array([x, x]))[1], s)
    assert np.allclose(d.lift(np.zeros(2)), 0.0)


def test_gaussian_dictionary_vanishes_at_origin():
    d = gaussian_dictionary(np.array([0.25, 2.0, 1.0, 2.0]), 7)
    assert d.lifted_dim == 7
    assert np.allclose(d.lift(np.zeros(4)), 0.0, atol=1e-12)


def test_dictionary_roundtrip():
    for d in (vdp_dictionary(), gaussian_dictionary(np.array([1.0, 1.0]), 5)):
        from lpckit.koopman import dictionary_from_dict

        d2 = dictionary_from_dict(d.to_dict())
        x = np.full(d.input_dim, 0.3)
        assert np.allclose(d.lift(x), d2.lift(x))


def test_collect_snapshots_respects_boxes():
    spec = get_plant("vdp")
    data = collect_snapshots(spec, 500, default_rng(0))
    assert data.count == 500
    assert np.all(np.abs(data.X) <= 2.5)
    assert np.all(np.abs(data.U) <= 10.0)
    assert np.all(np.abs(data.W) <= spec.disturbance_bound)
    # recorded successors also stay in the state box by construction
    assert np.all(np.abs(data.Xp) <= 2.5)


def test_model_fit_on_linear_plant_predicts():
    spec = linear_test_spec()
    data = collect_snapshots(spec, 300, default_rng(2))
    model = fit_model(data, identity_dictionary(1), theta=0.0, fit_disturbance=False)
    w, v = model_residuals(model, data)
    assert np.max(np.abs(w)) < 1e-10
    assert np.max(np.abs(v)) < 1e-10


def test_hoeffding_epsilon_value():
    # closed form at M = 1e4, delta = 0.01: sqrt(-ln(0.005) / 2e4)
    expected = np.sqrt(-np.log(0.005) / 2e4)
    assert hoeffding_epsilon(10_000, 0.01) == pytest.approx(expected, abs=1e-12)
    assert hoeffding_epsilon(10_000, 0.01) == pytest.approx(0.01628, abs=1e-5)
    with pytest.raises(InvalidConfidence):
        hoeffding_epsilon(100, 0.0)


def test_validate_residual_bounds_verdict():
    spec = linear_test_spec()
    data = collect_snapshots(spec, 10_000, default_rng(3))
    model = fit_model(data, identity_dictionary(1), theta=0.0, fit_disturbance=False)
    rep = validate_residual_bounds(model, data, 1e-8, 1e-8, 0.01, 0.1)
    # hand evaluation: zero empirical misses, so the verdict is just eps <= 0.1
    assert rep.empirical_risk == 0.0
    assert rep.epsilon == pytest.approx(0.01628, abs=1e-5)
    assert rep.passed == (rep.empirical_risk + rep.epsilon <= 0.1)
    assert rep.passed


def test_model_roundtrip():
    spec = get_plant("vdp")
    data = collect_snapshots(spec, 400, default_rng(4))
    model = fit_model(data, vdp_dictionary(), theta=100.0)
    m2 = LiftedLinearModel.from_dict(model.to_dict())
    assert np.allclose(m2.A, model.A)
    assert np.allclose(m2.lift(np.array([0.2, -0.4])), model.lift(np.array([0.2, -0.4])))
