"""Latent-factor estimation.

Pointwise squared error over observed ratings, the pairwise log-sigmoid
ranking loss, their weighted combination, and the fixed-learning-rate
gradient-descent solver that both flat matrix factorization and tree node
fitting share. All randomness flows from explicit seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .ingest import Dataset, ITEM_SIDE, USER_SIDE


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite objective."""


@dataclass(frozen=True)
class Hyperparams:
    """Solver and objective settings.

    lambda_b weighs the pairwise ranking term, lambda_u / lambda_v the
    squared-L2 penalties on user and item factors. n_bpr caps the number of
    ranking pairs sampled per epoch; negatives_per_positive governs how many
    unobserved items each observed item outranks when pair sets are built.
    """

    d: int = 20
    lambda_b: float = 0.1
    lambda_u: float = 0.01
    lambda_v: float = 0.01
    lr: float = 0.05
    epochs: int = 40
    n_bpr: int = 100_000
    negatives_per_positive: int = 3
    seed: int = 0
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if min(self.lambda_b, self.lambda_u, self.lambda_v) < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.epochs < 0 or self.n_bpr < 0:
            raise ValueError("epochs and n_bpr must be >= 0")

    def lam_for(self, side: str) -> float:
        return self.lambda_u if side == USER_SIDE else self.lambda_v


def subseed(*parts: int) -> np.random.SeedSequence:
    """Deterministic, order-independent seed derivation."""
    return np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])


def uniform_init(rows: int, d: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.01, 0.01, size=(rows, d))


def _as_obs_arrays(O: Iterable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    triples = list(O)
    if not triples:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), np.empty(0)
    arr = np.asarray(triples, dtype=float)
    return arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2]


def pointwise_loss(U: np.ndarray, V: np.ndarray, O: Iterable) -> float:
    """Sum of squared rating errors over the observations (0 on empty O)."""
    ui, ij, r = _as_obs_arrays(O)
    if len(r) == 0:
        return 0.0
    pred = np.einsum("ij,ij->i", U[ui], V[ij])
    return float(np.sum((r - pred) ** 2))


def bpr_loss(u: np.ndarray, V: np.ndarray, pairs: Iterable) -> float:
    """Sum of log sigmoid(u.v_j - u.v_l) over ordered pairs; always <= 0.

    Stabilized through the log-sigmoid identity, so extreme score gaps stay
    finite.
    """
    arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    if len(arr) == 0:
        return 0.0
    diff = (V[arr[:, 0]] - V[arr[:, 1]]) @ np.asarray(u, dtype=float)
    return float(np.sum(log_expit(diff)))


def objective(
    U: np.ndarray,
    V: np.ndarray,
    O: Iterable,
    pairs: Mapping[int, Iterable] | Sequence,
    hp: Hyperparams,
) -> float:
    """Pointwise loss - lambda_b * sum of per-user pairwise losses + L2 penalties."""
    total = pointwise_loss(U, V, O)
    if hp.lambda_b:
        items = pairs.items() if isinstance(pairs, Mapping) else enumerate(pairs)
        for user, user_pairs in items:
            total -= hp.lambda_b * bpr_loss(U[user], V, user_pairs)
    total += hp.lambda_u * float(np.sum(np.asarray(U) ** 2))
    total += hp.lambda_v * float(np.sum(np.asarray(V) ** 2))
    return total


def objective_gradients(
    U: np.ndarray,
    V: np.ndarray,
    O: Iterable,
    pairs: Mapping[int, Iterable] | Sequence,
    hp: Hyperparams,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of objective() with respect to U and V."""
    ui, ij, r = _as_obs_arrays(O)
    gU = 2.0 * hp.lambda_u * np.asarray(U, dtype=float).copy()
    gV = 2.0 * hp.lambda_v * np.asarray(V, dtype=float).copy()
    if len(r):
        err = np.einsum("ij,ij->i", U[ui], V[ij]) - r
        np.add.at(gU, ui, 2.0 * err[:, None] * V[ij])
        np.add.at(gV, ij, 2.0 * err[:, None] * U[ui])
    if hp.lambda_b:
        items = pairs.items() if isinstance(pairs, Mapping) else enumerate(pairs)
        for user, user_pairs in items:
            arr = np.asarray(list(user_pairs), dtype=np.int64).reshape(-1, 2)
            if len(arr) == 0:
                continue
            pos, neg = arr[:, 0], arr[:, 1]
            diff = (V[pos] - V[neg]) @ U[user]
            w = hp.lambda_b * expit(-diff)
            gU[user] -= w @ (V[pos] - V[neg])
            np.add.at(gV, pos, -w[:, None] * U[user])
            np.add.at(gV, neg, w[:, None] * U[user])
    return gU, gV


def build_bpr_pairs(
    O: Iterable,
    user: int,
    negatives_per_positive: int,
    rng: np.random.Generator,
    n_items: int | None = None,
) -> np.ndarray:
    """Ordered item pairs (j, l) meaning j should outrank l for this user.

    Includes every observed pair with strictly higher rating, plus
    negatives_per_positive sampled unobserved items per observed item.
    Returns an (P, 2) int array; sampling is reproducible from rng.
    """
    mine = [(j, r) for (i, j, r) in O if i == user]
    items = np.array([j for j, _ in mine], dtype=np.int64)
    ratings = np.array([r for _, r in mine], dtype=float)
    if n_items is None:
        n_items = int(max((j for (_i, j, _r) in O), default=-1)) + 1

    rated = []
    order = np.argsort(items, kind="stable")
    items, ratings = items[order], ratings[order]
    for a in range(len(items)):
        for b in range(len(items)):
            if ratings[a] > ratings[b]:
                rated.append((items[a], items[b]))

    sampled = []
    unobserved = np.setdiff1d(np.arange(n_items, dtype=np.int64), items)
    if negatives_per_positive > 0 and len(unobserved):
        take = min(negatives_per_positive, len(unobserved))
        for j in items:
            negs = rng.choice(unobserved, size=take, replace=False)
            sampled.extend((j, l) for l in np.sort(negs))

    out = np.array(rated + sampled, dtype=np.int64).reshape(-1, 2)
    return out


@dataclass
class ObservationSet:
    """Ratings in array form plus the per-user ranking pair sets."""

    n_users: int
    n_items: int
    obs_user: np.ndarray
    obs_item: np.ndarray
    obs_rating: np.ndarray
    pairs: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_dataset(
        cls,
        ds: Dataset,
        negatives_per_positive: int = 0,
        seed: int = 0,
    ) -> "ObservationSet":
        obs = ds.observations()
        ou, oi, orr = _as_obs_arrays(obs)
        pairs = []
        for user in range(ds.n_users):
            rng = np.random.default_rng(subseed(seed, 101, user))
            pairs.append(build_bpr_pairs(obs, user, negatives_per_positive, rng, ds.n_items))
        return cls(ds.n_users, ds.n_items, ou, oi, orr, pairs)

    def observations(self) -> list[tuple[int, int, float]]:
        return [
            (int(u), int(i), float(r))
            for u, i, r in zip(self.obs_user, self.obs_item, self.obs_rating)
        ]


@dataclass
class FitProblem:
    """A compiled one-sided fit: a handful of rows against a frozen counterpart.

    Rows are the free vectors (one per group of tied entities). offsets holds
    each row's fixed base vector; predictions use offsets + F. For user-side
    problems pair columns are (row, pos_item, neg_item); for item-side
    problems they are (user, pos_row, neg_row) and every pair endpoint is a
    fitted row by construction.
    """

    side: str
    n_rows: int
    counterpart: np.ndarray
    offsets: np.ndarray
    lam: float
    lambda_b: float
    obs_row: np.ndarray
    obs_ctx: np.ndarray
    obs_r: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_c: np.ndarray

    def objective_at(self, F: np.ndarray, pair_idx: np.ndarray | None = None) -> float:
        A = self.offsets + F
        total = 0.0
        if len(self.obs_r):
            if self.side == USER_SIDE:
                pred = np.einsum("ij,ij->i", A[self.obs_row], self.counterpart[self.obs_ctx])
            else:
                pred = np.einsum("ij,ij->i", self.counterpart[self.obs_ctx], A[self.obs_row])
            total += float(np.sum((self.obs_r - pred) ** 2))
        a, b, c = self._pair_view(pair_idx)
        if len(a) and self.lambda_b:
            diff = self._pair_diff(A, a, b, c)
            total -= self.lambda_b * float(np.sum(log_expit(diff)))
        total += self.lam * float(np.sum(F**2))
        return total

    def gradient_at(self, F: np.ndarray, pair_idx: np.ndarray | None = None) -> np.ndarray:
        A = self.offsets + F
        g = 2.0 * self.lam * F.copy()
        if len(self.obs_r):
            if self.side == USER_SIDE:
                ctx = self.counterpart[self.obs_ctx]
                pred = np.einsum("ij,ij->i", A[self.obs_row], ctx)
            else:
                ctx = self.counterpart[self.obs_ctx]
                pred = np.einsum("ij,ij->i", ctx, A[self.obs_row])
            err = pred - self.obs_r
            np.add.at(g, self.obs_row, 2.0 * err[:, None] * ctx)
        a, b, c = self._pair_view(pair_idx)
        if len(a) and self.lambda_b:
            if self.side == USER_SIDE:
                delta = self.counterpart[b] - self.counterpart[c]
                w = self.lambda_b * expit(-np.einsum("ij,ij->i", A[a], delta))
                np.add.at(g, a, -w[:, None] * delta)
            else:
                uctx = self.counterpart[a]
                diff = np.einsum("ij,ij->i", uctx, A[b] - A[c])
                w = self.lambda_b * expit(-diff)
                np.add.at(g, b, -w[:, None] * uctx)
                np.add.at(g, c, w[:, None] * uctx)
        return g

    def _pair_view(self, idx):
        if idx is None:
            return self.pair_a, self.pair_b, self.pair_c
        return self.pair_a[idx], self.pair_b[idx], self.pair_c[idx]

    def _pair_diff(self, A, a, b, c):
        if self.side == USER_SIDE:
            return np.einsum("ij,ij->i", A[a], self.counterpart[b] - self.counterpart[c])
        return np.einsum("ij,ij->i", self.counterpart[a], A[b] - A[c])


def compile_problem(
    side: str,
    counterpart: np.ndarray,
    obs: ObservationSet,
    row_of: np.ndarray,
    offsets: np.ndarray,
    lam: float,
    lambda_b: float,
) -> FitProblem:
    """Restrict the observation set to entities with a row and wire up indices.

    row_of maps every entity of the fitted side to its row, -1 meaning "not
    part of this fit". Item-side ranking pairs are kept only when both items
    have rows, so every sub-fit decomposes exactly.
    """
    if side == USER_SIDE:
        fit_idx, ctx_idx = obs.obs_user, obs.obs_item
    else:
        fit_idx, ctx_idx = obs.obs_item, obs.obs_user
    mask = row_of[fit_idx] >= 0
    obs_row = row_of[fit_idx[mask]]
    obs_ctx = ctx_idx[mask]
    obs_r = obs.obs_rating[mask]

    pa, pb, pc = [], [], []
    for user in range(obs.n_users):
        arr = obs.pairs[user] if user < len(obs.pairs) else np.empty((0, 2), dtype=np.int64)
        if len(arr) == 0:
            continue
        if side == USER_SIDE:
            row = row_of[user]
            if row < 0:
                continue
            pa.append(np.full(len(arr), row, dtype=np.int64))
            pb.append(arr[:, 0])
            pc.append(arr[:, 1])
        else:
            keep = (row_of[arr[:, 0]] >= 0) & (row_of[arr[:, 1]] >= 0)
            if not keep.any():
                continue
            kept = arr[keep]
            pa.append(np.full(len(kept), user, dtype=np.int64))
            pb.append(row_of[kept[:, 0]])
            pc.append(row_of[kept[:, 1]])
    empty = np.empty(0, dtype=np.int64)
    pair_a = np.concatenate(pa) if pa else empty
    pair_b = np.concatenate(pb) if pb else empty.copy()
    pair_c = np.concatenate(pc) if pc else empty.copy()

    return FitProblem(
        side=side,
        n_rows=len(offsets),
        counterpart=np.asarray(counterpart, dtype=float),
        offsets=np.asarray(offsets, dtype=float),
        lam=lam,
        lambda_b=lambda_b,
        obs_row=obs_row,
        obs_ctx=obs_ctx,
        obs_r=obs_r,
        pair_a=pair_a,
        pair_b=pair_b,
        pair_c=pair_c,
    )


def fit_rows(
    problem: FitProblem,
    hp: Hyperparams,
    init: np.ndarray | None = None,
    seed=None,
) -> tuple[np.ndarray, float]:
    """Gradient descent on a compiled problem; returns the best iterate.

    The initial iterate participates in best-objective selection, so the
    result never scores worse than the starting point. Each row's step is
    scaled by its loss-term count, so a group row shared by many entities
    moves at the same per-term rate as a free row; selection still uses the
    true (unscaled) objective. Per epoch at most hp.n_bpr pairs feed the
    gradient; the tracked objective always uses the full pair set.
    Deterministic given the seed.
    """
    d = problem.offsets.shape[1]
    F = np.zeros((problem.n_rows, d)) if init is None else np.array(init, dtype=float)
    rng = np.random.default_rng(hp.seed if seed is None else seed)
    n_pairs = len(problem.pair_a)

    scale = np.ones(problem.n_rows)
    np.add.at(scale, problem.obs_row, 1.0)
    if problem.side == USER_SIDE:
        np.add.at(scale, problem.pair_a, hp.lambda_b)
    else:
        np.add.at(scale, problem.pair_b, hp.lambda_b)
        np.add.at(scale, problem.pair_c, hp.lambda_b)
    scale = scale[:, None]

    best_obj = problem.objective_at(F)
    if not np.isfinite(best_obj):
        raise DivergenceError("non-finite objective at epoch 0")
    best_F = F.copy()
    for epoch in range(1, hp.epochs + 1):
        idx = None
        if 0 < hp.n_bpr < n_pairs:
            idx = np.sort(rng.choice(n_pairs, size=hp.n_bpr, replace=False))
        g = problem.gradient_at(F, idx)
        F -= hp.lr * g / scale
        obj = problem.objective_at(F)
        if not np.isfinite(obj):
            raise DivergenceError(f"non-finite objective at epoch {epoch}")
        if obj < best_obj:
            best_obj = obj
            best_F = F.copy()
    return best_F, float(best_obj)


def fit_factors(
    side: str,
    counterpart: np.ndarray,
    obs: ObservationSet,
    hp: Hyperparams,
    init: np.ndarray | None = None,
    row_of: np.ndarray | None = None,
    offsets: np.ndarray | None = None,
    lam: float | None = None,
    seed=None,
) -> np.ndarray:
    """Fit one side's factors with the other side frozen.

    By default every entity of the side gets its own free row (flat matrix
    factorization step). row_of/offsets support tied-group and residual
    fits on top of fixed base vectors.
    """
    n_entities = obs.n_users if side == USER_SIDE else obs.n_items
    if row_of is None:
        row_of = np.arange(n_entities, dtype=np.int64)
        n_rows = n_entities
    else:
        row_of = np.asarray(row_of, dtype=np.int64)
        n_rows = int(row_of.max()) + 1 if (row_of >= 0).any() else 0
    if offsets is None:
        offsets = np.zeros((n_rows, hp.d))
    if lam is None:
        lam = hp.lam_for(side)
    problem = compile_problem(side, counterpart, obs, row_of, offsets, lam, hp.lambda_b)
    F, _ = fit_rows(problem, hp, init=init, seed=seed)
    return F


def relative_bpr_weight(hp: Hyperparams, m: int, n: int) -> float:
    """Normalized weight of the ranking term: lambda_b * n_bpr * epochs / (m * n^2)."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    return hp.lambda_b * hp.n_bpr * hp.epochs / (m * n * n)


def lambda_b_for_weight(phi: float, hp: Hyperparams, m: int, n: int) -> float:
    """Inverse of relative_bpr_weight: the lambda_b that yields the given weight."""
    denom = hp.n_bpr * hp.epochs
    if denom == 0:
        raise ValueError("n_bpr and epochs must be positive to target a weight")
    return phi * m * n * n / denom
