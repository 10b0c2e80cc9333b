"""Losses, gradients, pair building, and the shared descent solver."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factree.factorization import (
    DivergenceError,
    Hyperparams,
    ObservationSet,
    USER_SIDE,
    ITEM_SIDE,
    bpr_loss,
    build_bpr_pairs,
    compile_problem,
    fit_factors,
    fit_rows,
    lambda_b_for_weight,
    objective,
    objective_gradients,
    pointwise_loss,
    relative_bpr_weight,
    subseed,
    uniform_init,
)


def loss_oracle(U, V, O, pairs, hp):
    """Direct per-term reimplementation of the combined objective."""
    total = 0.0
    for u, i, r in O:
        total += (r - float(np.dot(U[u], V[i]))) ** 2
    for u, user_pairs in enumerate(pairs):
        for j, l in user_pairs:
            x = float(np.dot(U[u], V[j]) - np.dot(U[u], V[l]))
            total -= hp.lambda_b * math.log(1.0 / (1.0 + math.exp(-x)))
    total += hp.lambda_u * float(np.sum(np.square(U)))
    total += hp.lambda_v * float(np.sum(np.square(V)))
    return total


def random_instance(rng, m=3, n=4, d=2):
    U = rng.normal(size=(m, d))
    V = rng.normal(size=(n, d))
    O = []
    for u in range(m):
        for i in rng.choice(n, size=rng.integers(1, n + 1), replace=False):
            O.append((u, int(i), float(rng.uniform(1, 5))))
    pairs = []
    for u in range(m):
        user_pairs = []
        for _ in range(rng.integers(0, 4)):
            j, l = rng.choice(n, size=2, replace=False)
            user_pairs.append((int(j), int(l)))
        pairs.append(np.array(user_pairs, dtype=np.int64).reshape(-1, 2))
    return U, V, O, pairs


class TestHyperparams:
    def test_rejects_bad_dim(self):
        with pytest.raises(ValueError):
            Hyperparams(d=0)

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            Hyperparams(lambda_b=-0.1)

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ValueError):
            Hyperparams(lr=0.0)

    def test_lam_for_side(self):
        hp = Hyperparams(lambda_u=0.3, lambda_v=0.7)
        assert hp.lam_for(USER_SIDE) == 0.3
        assert hp.lam_for(ITEM_SIDE) == 0.7


class TestSeeding:
    def test_subseed_reproducible(self):
        a = np.random.default_rng(subseed(3, 7)).integers(0, 1 << 30, 5)
        b = np.random.default_rng(subseed(3, 7)).integers(0, 1 << 30, 5)
        assert np.array_equal(a, b)

    def test_subseed_distinct_streams(self):
        a = np.random.default_rng(subseed(3, 7)).integers(0, 1 << 30, 5)
        b = np.random.default_rng(subseed(3, 8)).integers(0, 1 << 30, 5)
        assert not np.array_equal(a, b)

    def test_uniform_init_range_and_determinism(self):
        A = uniform_init(50, 4, subseed(1, 2))
        B = uniform_init(50, 4, subseed(1, 2))
        assert np.array_equal(A, B)
        assert np.all(np.abs(A) <= 0.01)


class TestLosses:
    def test_pointwise_matches_loop(self):
        rng = np.random.default_rng(0)
        U, V, O, _pairs = random_instance(rng)
        expected = sum((r - float(np.dot(U[u], V[i]))) ** 2 for u, i, r in O)
        assert pointwise_loss(U, V, O) == pytest.approx(expected, rel=1e-12)

    def test_pointwise_empty_is_zero(self):
        assert pointwise_loss(np.zeros((1, 2)), np.zeros((1, 2)), []) == 0.0

    def test_bpr_matches_loop_and_is_nonpositive(self):
        rng = np.random.default_rng(1)
        u = rng.normal(size=3)
        V = rng.normal(size=(5, 3))
        pairs = [(0, 1), (2, 4), (3, 0)]
        expected = sum(
            math.log(1.0 / (1.0 + math.exp(-float(np.dot(u, V[j] - V[l])))))
            for j, l in pairs
        )
        got = bpr_loss(u, V, pairs)
        assert got == pytest.approx(expected, rel=1e-10)
        assert got <= 0.0

    def test_bpr_extreme_gap_stays_finite(self):
        u = np.array([1000.0])
        V = np.array([[1.0], [-1.0]])
        assert math.isfinite(bpr_loss(u, V, [(1, 0)]))

    def test_objective_combines_terms(self):
        rng = np.random.default_rng(2)
        U, V, O, pairs = random_instance(rng)
        hp = Hyperparams(d=2, lambda_b=0.5, lambda_u=0.1, lambda_v=0.2)
        assert objective(U, V, O, pairs, hp) == pytest.approx(
            loss_oracle(U, V, O, pairs, hp), rel=1e-10
        )

    def test_objective_accepts_mapping_pairs(self):
        rng = np.random.default_rng(3)
        U, V, O, pairs = random_instance(rng)
        hp = Hyperparams(d=2)
        as_map = {u: p for u, p in enumerate(pairs)}
        assert objective(U, V, O, pairs, hp) == objective(U, V, O, as_map, hp)


class TestGradients:
    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        U, V, O, pairs = random_instance(rng)
        hp = Hyperparams(d=2, lambda_b=0.3, lambda_u=0.05, lambda_v=0.05)
        gU, gV = objective_gradients(U, V, O, pairs, hp)
        eps = 1e-6
        for mat, grad in ((U, gU), (V, gV)):
            flat_idx = rng.integers(0, mat.size, size=3)
            for fi in flat_idx:
                r, c = divmod(int(fi), mat.shape[1])
                orig = mat[r, c]
                mat[r, c] = orig + eps
                up = objective(U, V, O, pairs, hp)
                mat[r, c] = orig - eps
                down = objective(U, V, O, pairs, hp)
                mat[r, c] = orig
                fd = (up - down) / (2 * eps)
                assert grad[r, c] == pytest.approx(fd, rel=1e-4, abs=1e-6)

    def test_zero_lambda_b_ignores_pairs(self):
        rng = np.random.default_rng(4)
        U, V, O, pairs = random_instance(rng)
        hp = Hyperparams(d=2, lambda_b=0.0)
        gU1, gV1 = objective_gradients(U, V, O, pairs, hp)
        gU2, gV2 = objective_gradients(U, V, O, [np.empty((0, 2), int)] * len(U), hp)
        assert np.allclose(gU1, gU2)
        assert np.allclose(gV1, gV2)


class TestPairBuilding:
    def test_rated_pairs_enumerated_exactly(self):
        O = [(0, 0, 5.0), (0, 1, 3.0), (0, 2, 3.0), (0, 3, 1.0)]
        rng = np.random.default_rng(0)
        pairs = build_bpr_pairs(O, 0, negatives_per_positive=0, rng=rng, n_items=4)
        got = {tuple(p) for p in pairs}
        expected = {(j, l) for j, rj, in [(0, 5.0), (1, 3.0), (2, 3.0), (3, 1.0)]
                    for l, rl in [(0, 5.0), (1, 3.0), (2, 3.0), (3, 1.0)] if rj > rl}
        assert got == expected

    def test_equal_ratings_produce_no_pair(self):
        O = [(0, 0, 3.0), (0, 1, 3.0)]
        pairs = build_bpr_pairs(O, 0, 0, np.random.default_rng(0), n_items=2)
        assert len(pairs) == 0

    def test_negative_sampling_counts_and_membership(self):
        O = [(0, 0, 5.0), (0, 1, 2.0)]
        rng = np.random.default_rng(7)
        pairs = build_bpr_pairs(O, 0, negatives_per_positive=2, rng=rng, n_items=6)
        sampled = [tuple(p) for p in pairs if tuple(p) != (0, 1)]
        assert len(sampled) == 4  # 2 observed items x 2 negatives
        for j, l in sampled:
            assert j in (0, 1)
            assert l in (2, 3, 4, 5)

    def test_negatives_capped_by_availability(self):
        O = [(0, 0, 5.0)]
        pairs = build_bpr_pairs(O, 0, negatives_per_positive=9, rng=np.random.default_rng(0), n_items=3)
        assert {tuple(p) for p in pairs} == {(0, 1), (0, 2)}

    def test_deterministic_given_rng_state(self):
        O = [(0, i, float(i % 3) + 1) for i in range(5)]
        a = build_bpr_pairs(O, 0, 2, np.random.default_rng(subseed(9, 101, 0)), n_items=20)
        b = build_bpr_pairs(O, 0, 2, np.random.default_rng(subseed(9, 101, 0)), n_items=20)
        assert np.array_equal(a, b)

    def test_other_users_observations_ignored(self):
        O = [(0, 0, 5.0), (1, 1, 4.0), (1, 2, 1.0)]
        pairs = build_bpr_pairs(O, 1, 0, np.random.default_rng(0), n_items=3)
        assert {tuple(p) for p in pairs} == {(1, 2)}


class TestObservationSet:
    def test_arrays_match_dataset(self, small_ds):
        obs = ObservationSet.from_dataset(small_ds, negatives_per_positive=1, seed=3)
        assert obs.observations() == small_ds.observations()
        assert obs.n_users == small_ds.n_users
        assert len(obs.pairs) == small_ds.n_users

    def test_pair_sets_deterministic(self, small_ds):
        a = ObservationSet.from_dataset(small_ds, 2, seed=5)
        b = ObservationSet.from_dataset(small_ds, 2, seed=5)
        for pa, pb in zip(a.pairs, b.pairs):
            assert np.array_equal(pa, pb)

    def test_seed_changes_sampling(self):
        from conftest import record
        from factree.ingest import dataset_from_records

        recs = [record("u1", f"i{i:02d}", 3.0 + (i % 2), i) for i in range(12)]
        recs += [record("u2", "i00", 4.0, 99)]
        ds = dataset_from_records(recs)
        a = ObservationSet.from_dataset(ds, 3, seed=5)
        b = ObservationSet.from_dataset(ds, 3, seed=6)
        assert any(not np.array_equal(pa, pb) for pa, pb in zip(a.pairs, b.pairs))


def flat_problem(side, U, V, obs, hp):
    n = len(U) if side == USER_SIDE else len(V)
    counterpart = V if side == USER_SIDE else U
    row_of = np.arange(n, dtype=np.int64)
    offsets = np.zeros((n, hp.d))
    return compile_problem(side, counterpart, obs, row_of, offsets, hp.lam_for(side), hp.lambda_b)


class TestFitProblem:
    def test_user_side_objective_matches_global(self, small_ds):
        hp = Hyperparams(d=2, lambda_b=0.4, lambda_u=0.1, lambda_v=0.2, seed=0)
        obs = ObservationSet.from_dataset(small_ds, 2, seed=1)
        rng = np.random.default_rng(0)
        U = rng.normal(size=(small_ds.n_users, 2))
        V = rng.normal(size=(small_ds.n_items, 2))
        problem = flat_problem(USER_SIDE, U, V, obs, hp)
        got = problem.objective_at(U)
        want = objective(U, V, obs.observations(), obs.pairs, hp) - hp.lambda_v * float(
            np.sum(V**2)
        )
        assert got == pytest.approx(want, rel=1e-10)

    def test_item_side_keeps_only_inside_pairs(self, small_ds):
        hp = Hyperparams(d=2, lambda_b=0.4, seed=0)
        obs = ObservationSet.from_dataset(small_ds, 2, seed=1)
        row_of = np.full(small_ds.n_items, -1, dtype=np.int64)
        row_of[0] = 0  # only item 0 fitted
        U = np.random.default_rng(1).normal(size=(small_ds.n_users, 2))
        problem = compile_problem(
            ITEM_SIDE, U, obs, row_of, np.zeros((1, 2)), hp.lambda_v, hp.lambda_b
        )
        assert len(problem.pair_a) == 0  # no pair has both endpoints at item 0

    def test_gradient_matches_finite_difference(self, small_ds):
        hp = Hyperparams(d=2, lambda_b=0.3, lambda_u=0.07, seed=0)
        obs = ObservationSet.from_dataset(small_ds, 2, seed=2)
        rng = np.random.default_rng(3)
        U = rng.normal(size=(small_ds.n_users, 2))
        V = rng.normal(size=(small_ds.n_items, 2))
        problem = flat_problem(USER_SIDE, U, V, obs, hp)
        F = rng.normal(size=U.shape)
        g = problem.gradient_at(F)
        eps = 1e-6
        for r, c in ((0, 0), (1, 1), (3, 0)):
            orig = F[r, c]
            F[r, c] = orig + eps
            up = problem.objective_at(F)
            F[r, c] = orig - eps
            down = problem.objective_at(F)
            F[r, c] = orig
            assert g[r, c] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-7)


class TestFitRows:
    def test_never_worse_than_init(self, small_ds):
        hp = Hyperparams(d=2, epochs=5, lr=5.0, seed=0)  # absurd lr on purpose
        obs = ObservationSet.from_dataset(small_ds, 1, seed=1)
        U0 = np.zeros((small_ds.n_users, 2))
        V = np.random.default_rng(2).normal(size=(small_ds.n_items, 2))
        problem = flat_problem(USER_SIDE, U0, V, obs, hp)
        start = problem.objective_at(U0)
        _F, best = fit_rows(problem, hp, init=U0, seed=subseed(0, 1))
        assert best <= start

    def test_determinism(self, small_ds):
        hp = Hyperparams(d=2, epochs=8, n_bpr=3, seed=0)
        obs = ObservationSet.from_dataset(small_ds, 2, seed=1)
        V = np.random.default_rng(2).normal(size=(small_ds.n_items, 2))
        problem = flat_problem(USER_SIDE, np.zeros((small_ds.n_users, 2)), V, obs, hp)
        F1, o1 = fit_rows(problem, hp, seed=subseed(4, 2))
        F2, o2 = fit_rows(problem, hp, seed=subseed(4, 2))
        assert np.array_equal(F1, F2)
        assert o1 == o2

    def test_divergence_raises(self, small_ds):
        hp = Hyperparams(d=2, epochs=200, lr=1e12, seed=0, lambda_b=0.0)
        obs = ObservationSet.from_dataset(small_ds, 0, seed=1)
        V = np.full((small_ds.n_items, 2), 10.0)
        problem = flat_problem(USER_SIDE, np.zeros((small_ds.n_users, 2)), V, obs, hp)
        with np.errstate(over="ignore"), pytest.raises(DivergenceError, match="epoch"):
            fit_rows(problem, hp)

    def test_zero_epochs_returns_init(self, small_ds):
        hp = Hyperparams(d=2, epochs=0, seed=0)
        obs = ObservationSet.from_dataset(small_ds, 0, seed=1)
        V = np.random.default_rng(5).normal(size=(small_ds.n_items, 2))
        init = np.random.default_rng(6).normal(size=(small_ds.n_users, 2))
        problem = flat_problem(USER_SIDE, init, V, obs, hp)
        F, _ = fit_rows(problem, hp, init=init)
        assert np.array_equal(F, init)


class TestFitFactors:
    def test_rank1_single_user_closed_form(self):
        # One user, d=1, no reg, no ranking: minimizer is sum(r v)/sum(v^2).
        V = np.array([[1.0], [2.0], [-1.0]])
        O = [(0, 0, 2.0), (0, 1, 4.1), (0, 2, -1.9)]
        hp = Hyperparams(
            d=1, lambda_b=0.0, lambda_u=0.0, lambda_v=0.0, lr=0.2, epochs=300, seed=0
        )
        obs = ObservationSet(1, 3, *map(np.asarray, ([0, 0, 0], [0, 1, 2], [2.0, 4.1, -1.9])), [np.empty((0, 2), np.int64)])
        U = fit_factors(USER_SIDE, V, obs, hp)
        closed = sum(r * V[i, 0] for _u, i, r in O) / sum(V[i, 0] ** 2 for _u, i, r in O)
        assert U[0, 0] == pytest.approx(closed, rel=1e-3)

    def test_item_side_symmetry(self):
        U = np.array([[1.0], [3.0]])
        O = [(0, 0, 2.0), (1, 0, 6.0)]
        hp = Hyperparams(d=1, lambda_b=0.0, lambda_u=0.0, lambda_v=0.0, lr=0.2, epochs=300, seed=0)
        obs = ObservationSet(2, 1, np.array([0, 1]), np.array([0, 0]), np.array([2.0, 6.0]),
                             [np.empty((0, 2), np.int64)] * 2)
        V = fit_factors(ITEM_SIDE, U, obs, hp)
        closed = (2.0 * 1 + 6.0 * 3) / (1 + 9)
        assert V[0, 0] == pytest.approx(closed, rel=1e-3)


class TestBprWeight:
    def test_weight_formula(self):
        hp = Hyperparams(lambda_b=0.2, n_bpr=1000, epochs=10)
        assert relative_bpr_weight(hp, 20, 50) == pytest.approx(
            0.2 * 1000 * 10 / (20 * 50 * 50)
        )

    @given(
        st.floats(1e-6, 10.0),
        st.integers(1, 500),
        st.integers(1, 500),
    )
    @settings(max_examples=40, deadline=None)
    def test_inverse_roundtrip(self, phi, m, n):
        hp = Hyperparams(n_bpr=500, epochs=7)
        lam = lambda_b_for_weight(phi, hp, m, n)
        back = relative_bpr_weight(
            Hyperparams(lambda_b=lam, n_bpr=500, epochs=7), m, n
        )
        assert back == pytest.approx(phi, rel=1e-9)
