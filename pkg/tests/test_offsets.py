import numpy as np
import pytest
import scipy.linalg

from cmfcold.cmf import CmfHyperparams, FactorPartition, lbfgs_fit
from cmfcold.data import RatingsMatrix, SideInfoMatrix
from cmfcold.offsets import (OffsetsModel, offsets_fit, offsets_objective, offsets_predict,
                             offsets_predict_new_user, offsets_two_stage_fit, offsets_user_vector)
from cmfcold.optimizer import SolverConfig, finite_difference_gradient
from cmfcold.pipeline import compute_global_mean

import oracles
from synthetic import planted_dataset, small_instance


def random_model(inst, k, seed, std=0.1, lam=0.05, lam_offsets=None):
    rng = np.random.default_rng(seed)
    X = inst.X
    p = inst.U.n_cols if inst.U is not None else 0
    q = inst.I.n_cols if inst.I is not None else 0
    return OffsetsModel(rng.normal(0, std, (X.n_users, k)), rng.normal(0, std, (X.n_items, k)),
                        rng.normal(0, std, (p, k)), rng.normal(0, std, (q, k)),
                        rng.normal(0, std, X.n_users), rng.normal(0, std, X.n_items),
                        compute_global_mean(X), lam, lam_offsets)


def pack(model):
    return np.concatenate([getattr(model, b).ravel() for b in ("A", "B", "m", "n", "C", "D")])


def unpack(model, theta):
    out, pos = {}, 0
    for b in ("A", "B", "m", "n", "C", "D"):
        arr = getattr(model, b)
        out[b] = theta[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return OffsetsModel(out["A"], out["B"], out["C"], out["D"], out["m"], out["n"], model.mu,
                        model.lambda_, model.lambda_offsets)


def entries_of(X):
    return list(zip(X.users.tolist(), X.items.tolist(), X.ratings.tolist()))


CASES = [
    # (seed, with_u, with_i, k, lambda_offsets)
    (0, True, True, 2, None), (1, True, True, 3, 0.5), (2, False, True, 2, None),
    (3, True, False, 2, None), (4, False, False, 3, None), (5, True, True, 1, None),
    (6, True, True, 4, 1.0), (7, False, True, 3, 0.2), (8, True, False, 2, None),
    (9, True, True, 2, None), (10, True, True, 3, None),
]


@pytest.mark.parametrize("case", CASES, ids=[f"instance{c[0]}" for c in CASES])
def test_gradient_matches_finite_differences(case):
    seed, wu, wi, k, lo = case
    inst = small_instance(seed, with_u=wu, with_i=wi, missing_u=1 if wu else 0)
    model = random_model(inst, k, seed, lam_offsets=lo)
    analytic = offsets_objective(model, inst.X, inst.U, inst.I).gradient

    def value(theta):
        return offsets_objective(unpack(model, theta), inst.X, inst.U, inst.I).value

    numeric = finite_difference_gradient(value, pack(model), step=1e-6)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-5


@pytest.mark.parametrize("case", CASES[:5], ids=[f"instance{c[0]}" for c in CASES[:5]])
def test_value_matches_loop_oracle(case):
    seed, wu, wi, k, lo = case
    inst = small_instance(seed, with_u=wu, with_i=wi)
    model = random_model(inst, k, seed, std=0.5, lam_offsets=lo)
    params = {b: getattr(model, b) for b in "ABCDmn"}
    want = oracles.offsets_value(entries_of(inst.X), None if inst.U is None else inst.U.values,
                                 None if inst.I is None else inst.I.values, params, model.mu,
                                 model.lambda_, lo)
    assert offsets_objective(model, inst.X, inst.U, inst.I).value == pytest.approx(want, rel=1e-12)


def test_without_side_info_is_plain_mf():
    inst = small_instance(3, with_u=False, with_i=False)
    model = random_model(inst, 2, 0)
    want = oracles.biased_mf_value(entries_of(inst.X), model.mu, model.A.tolist(), model.B.tolist(),
                                   model.m.tolist(), model.n.tolist(), model.lambda_)
    assert offsets_objective(model, inst.X).value == pytest.approx(want, rel=1e-13)


def test_zero_parameters_without_regularization():
    inst = small_instance(4)
    X = inst.X
    model = OffsetsModel(np.zeros((X.n_users, 2)), np.zeros((X.n_items, 2)), np.zeros((3, 2)),
                         np.zeros((4, 2)), np.zeros(X.n_users), np.zeros(X.n_items), 3.0, 0.0)
    want = sum((x - 3.0) ** 2 for x in X.ratings.tolist())
    assert offsets_objective(model, X, inst.U, inst.I).value == pytest.approx(want, rel=1e-14)


def test_shape_mismatch_rejected():
    inst = small_instance(5)
    model = random_model(inst, 2, 0)
    with pytest.raises(ValueError):
        offsets_objective(model, inst.X, SideInfoMatrix(np.zeros((inst.X.n_users, 9)), "continuous"),
                          inst.I)


# ---------------------------------------------------------------------------
# fitting

def test_zero_attributes_reproduce_plain_mf_trace_exactly():
    inst = small_instance(6, n_users=20, n_items=15, density=0.4, with_u=False, with_i=False)
    X = inst.X
    cfg = SolverConfig(max_iterations=80)
    zeros_u = SideInfoMatrix(np.zeros((X.n_users, 4)), "continuous")
    zeros_i = SideInfoMatrix(np.zeros((X.n_items, 3)), "continuous")
    off = offsets_fit(X, zeros_u, zeros_i, lambda_=0.05, k=3, config=cfg, init_seed=9)
    mf = lbfgs_fit(X, None, None, CmfHyperparams(0.05, float(X.nnz), 0.0, 0.0, FactorPartition(0, 3, 0)),
                   cfg, init_seed=9)
    assert off.trace == mf.trace
    np.testing.assert_array_equal(off.A, mf.A)


def test_zero_attributes_fit_as_well_as_plain_mf():
    inst = small_instance(7, n_users=15, n_items=12, density=0.5, with_u=False, with_i=False)
    X = inst.X
    zeros_u = SideInfoMatrix(np.zeros((X.n_users, 2)), "continuous")
    with_zero = offsets_fit(X, zeros_u, None, 0.1, 2, SolverConfig(max_iterations=300))
    plain = offsets_fit(X, None, None, 0.1, 2, SolverConfig(max_iterations=300))
    assert abs(with_zero.trace[-1] - plain.trace[-1]) <= 0.01 * plain.trace[-1]


def test_trace_is_monotone_and_cap_defaults_to_800():
    inst = small_instance(8, n_users=10, n_items=8)
    model = offsets_fit(inst.X, inst.U, inst.I, 0.1, 2, SolverConfig(max_iterations=50))
    assert all(b <= a for a, b in zip(model.trace, model.trace[1:]))
    assert SolverConfig().max_iterations == 800


def test_planted_model_recovers_held_out_ratings():
    sigma = 0.2
    data = planted_dataset(n_users=120, n_items=80, k=3, p=5, q=5, density=0.5, offset_scale=0.3,
                           noise=sigma, seed=3, round_ratings=False, clip=False)
    R = data.ratings
    rng = np.random.default_rng(0)
    test = rng.random(R.nnz) < 0.1
    train = R.subset(~test).with_ids(R.user_ids, R.item_ids)
    model = offsets_fit(train, data.user_side, data.item_side, lambda_=1.0, k=3,
                        config=SolverConfig(max_iterations=1500))
    pred = np.array([offsets_predict(model, u, i) for u, i in zip(R.users[test], R.items[test])])
    rmse = np.sqrt(np.mean((pred - R.ratings[test]) ** 2))
    assert rmse < 1.2 * sigma


def test_offsets_free_regularization_separate():
    inst = small_instance(9)
    model = random_model(inst, 2, 0, lam=0.1, lam_offsets=2.0)
    lams = model.lambdas()
    assert lams["A"] == lams["B"] == 2.0 and lams["C"] == lams["m"] == 0.1


# ---------------------------------------------------------------------------
# two-stage

def test_two_stage_identity_attributes_absorb_factors():
    inst = small_instance(10, n_users=5, n_items=6, density=0.8, with_u=False, with_i=False)
    X = inst.X
    U = SideInfoMatrix(np.eye(X.n_users), "continuous")
    cfg = SolverConfig(max_iterations=40)
    stage1 = offsets_fit(X, None, None, 0.0, 2, cfg)
    model = offsets_two_stage_fit(X, U, None, 0.0, 2, cfg)
    np.testing.assert_allclose(model.C, stage1.A, atol=1e-12)
    np.testing.assert_allclose(model.A, 0.0, atol=1e-12)


def test_two_stage_without_side_info_is_stage_one():
    inst = small_instance(11, with_u=False, with_i=False)
    cfg = SolverConfig(max_iterations=40)
    stage1 = offsets_fit(inst.X, None, None, 0.1, 2, cfg)
    model = offsets_two_stage_fit(inst.X, None, None, 0.1, 2, cfg)
    np.testing.assert_array_equal(model.A, stage1.A)
    assert model.C.shape == (0, 2)


def test_two_stage_singular_without_lambda():
    inst = small_instance(12, n_users=6, with_u=False, with_i=False)
    U = SideInfoMatrix(np.ones((6, 2)), "continuous")  # rank one
    with pytest.raises(np.linalg.LinAlgError):
        offsets_two_stage_fit(inst.X, U, None, 0.0, 2, SolverConfig(max_iterations=5))


def test_two_stage_vs_joint_comparison_is_reported(note):
    inst = small_instance(13, n_users=30, n_items=20, density=0.4)
    for seed in range(3):
        cfg = SolverConfig(max_iterations=400)
        joint = offsets_fit(inst.X, inst.U, inst.I, 0.1, 3, cfg, init_seed=seed)
        staged = offsets_two_stage_fit(inst.X, inst.U, inst.I, 0.1, 3, cfg, init_seed=seed)
        assert staged.trace[-1] == pytest.approx(
            offsets_objective(staged, inst.X, inst.U, inst.I).value, rel=1e-12)
        note(f"offsets seed {seed}: two-stage objective {staged.trace[-1]:.4f}, "
             f"joint {joint.trace[-1]:.4f}")


# ---------------------------------------------------------------------------
# cold-start prediction

@pytest.fixture(scope="module")
def fitted():
    inst = small_instance(14, n_users=9, n_items=8, p=3, q=4, density=0.6)
    model = offsets_fit(inst.X, inst.U, inst.I, 0.1, 3, SolverConfig(max_iterations=100))
    return inst, model


def test_user_vector_zero(fitted):
    _, model = fitted
    assert not offsets_user_vector(np.zeros(3), model).any()


def test_user_vector_one_hot_picks_row(fitted):
    _, model = fitted
    np.testing.assert_array_equal(offsets_user_vector([0.0, 1.0, 0.0], model), model.C[1])


def test_user_vector_matches_dense_multiply_exactly():
    # small integers keep every product and sum exact, so the oracle is unambiguous
    rng = np.random.default_rng(1)
    C = rng.integers(-4, 5, (6, 3)).astype(float)
    u = rng.integers(-3, 4, 6).astype(float)
    model = OffsetsModel(np.zeros((1, 3)), np.zeros((1, 3)), C, np.zeros((0, 3)), [0.0], [0.0], 0.0)
    want = [sum(u[j] * C[j, f] for j in range(6)) for f in range(3)]
    assert offsets_user_vector(u, model).tolist() == want


def test_user_vector_length_mismatch(fitted):
    with pytest.raises(ValueError):
        offsets_user_vector(np.zeros(5), fitted[1])


def test_new_user_zero_attributes_rank_by_bias(fitted):
    _, model = fitted
    np.testing.assert_allclose(offsets_predict_new_user(np.zeros(3), model), model.mu + model.n,
                               rtol=0, atol=1e-15)


def test_new_user_new_item_zero_attributes_score_mu(fitted):
    _, model = fitted
    out = offsets_predict_new_user(np.ones(3), model, item_subset=[], new_item_attrs=np.zeros((1, 4)))
    assert out.tolist() == [model.mu]


def test_new_user_scores_match_pointwise(fitted):
    inst, model = fitted
    u = np.random.default_rng(2).standard_normal(3)
    new_items = np.random.default_rng(3).standard_normal((2, 4))
    scores = offsets_predict_new_user(u, model, new_item_attrs=new_items)
    want = [offsets_predict(model, user_attrs=u, item=i) for i in range(model.B.shape[0])]
    want += [offsets_predict(model, user_attrs=u, item_attrs=v) for v in new_items]
    np.testing.assert_allclose(scores, want, rtol=0, atol=1e-12)


def test_new_user_prediction_is_pure(fitted):
    _, model = fitted
    u = np.array([0.3, -0.2, 1.1])
    first = offsets_predict_new_user(u, model)
    for _ in range(5):
        assert offsets_predict_new_user(u, model).tobytes() == first.tobytes()


def test_warm_prediction_matches_full_matrix(fitted):
    inst, model = fitted
    full = model.full_prediction()
    dense = (model.mu + model.m[:, None] + model.n[None, :]
             + (model.A + inst.U.values @ model.C) @ (model.B + inst.I.values @ model.D).T)
    for u in range(full.shape[0]):
        for i in range(full.shape[1]):
            assert offsets_predict(model, u, i) == pytest.approx(full[u, i], abs=1e-12)
            assert full[u, i] == pytest.approx(dense[u, i], abs=1e-12)


def test_unknown_user_without_attributes_scores_mu_plus_item_bias(fitted):
    _, model = fitted
    got = offsets_predict(model, user_attrs=np.zeros(3), item=2)
    assert got == pytest.approx(model.mu + model.n[2], abs=1e-15)


def test_predict_needs_each_side(fitted):
    _, model = fitted
    with pytest.raises(ValueError):
        offsets_predict(model, item=0)
    with pytest.raises(ValueError):
        offsets_predict(model, user=0)


def test_new_user_path_performs_no_solve(fitted, monkeypatch):
    _, model = fitted

    def forbidden(*args, **kwargs):
        raise AssertionError("linear solve called on the offsets fast path")

    for mod, name in [(np.linalg, "solve"), (np.linalg, "inv"), (np.linalg, "lstsq"),
                      (scipy.linalg, "solve"), (scipy.linalg, "lstsq"), (scipy.linalg, "inv"),
                      (scipy.linalg, "cho_solve"), (scipy.linalg, "lu_solve")]:
        monkeypatch.setattr(mod, name, forbidden)
    scores = offsets_predict_new_user(np.ones(3), model, new_item_attrs=np.ones((2, 4)))
    assert scores.shape == (model.B.shape[0] + 2,)


def test_scorer_uses_vector_matrix_fold_in(fitted):
    inst, model = fitted
    newcomer = SideInfoMatrix(np.array([[1.0, 2.0, -1.0]]), "continuous", row_ids=["new"])
    scorer = model.scorer(newcomer, None)
    got = scorer(["new"] * 3, ["0", "1", "2"])
    want = offsets_predict_new_user([1.0, 2.0, -1.0], model, item_subset=[0, 1, 2])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    assert scorer.supports("new-users") and not scorer.supports("new-items")
