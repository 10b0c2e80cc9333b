"""Ranking metrics, cross-validation, baselines, parameter sweeps, and a
planted-cluster synthetic generator for desk-scale experiments.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .factorization import (
    Hyperparams,
    ObservationSet,
    lambda_b_for_weight,
    subseed,
)
from .ingest import Dataset, FeatureProfile, normalize_profiles
from .recommend import cold_start_profile
from .train import FacTModel, TrainConfig, alternate, fit_flat_mf
from .tree import route

SWEEP_AXES = ("depth", "latent_dim", "phi", "n_features", "parent_factors")
GAIN_MODES = ("rating", "binary")
ALGOS = ("fact", "mf", "bpr-mf", "most-popular")


def ndcg_at_k(ranking: Sequence[int], relevance: Mapping[int, float], k: int) -> float:
    """Normalized discounted cumulative gain over the top k of a ranking.

    Args:
      ranking: item indexes, best first.
      relevance: gain per relevant item; items absent from the map gain 0.
      k: cutoff, >= 1.

    Returns:
      DCG divided by the ideal DCG of the relevance map, in [0, 1]. Zero
      when no relevant item appears in the top k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevance:
        raise ValueError("relevance map must be nonempty")
    if any(g < 0 for g in relevance.values()):
        raise ValueError("gains must be >= 0")
    dcg = 0.0
    for rank, item in enumerate(ranking[:k], start=1):
        gain = relevance.get(item)
        if gain:
            dcg += gain / math.log2(rank + 1)
    ideal = sorted(relevance.values(), reverse=True)[:k]
    idcg = sum(g / math.log2(r + 1) for r, g in enumerate(ideal, start=1))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


class MostPopularRanker:
    """Static frequency ranking: items by training review count, ties by index."""

    def __init__(self, ds: Dataset):
        counts = np.zeros(ds.n_items, dtype=int)
        for r in ds.reviews:
            counts[r.item_id] += 1
        self.counts = counts
        self.order = np.lexsort((np.arange(ds.n_items), -counts))

    def rank(self, user: int, exclude: frozenset = frozenset()) -> list[int]:
        return [int(j) for j in self.order if int(j) not in exclude]


class FactorRanker:
    """Ranks by inner product of explicit factor matrices."""

    def __init__(self, U: np.ndarray, V: np.ndarray):
        self.U = U
        self.V = V

    def rank(self, user: int, exclude: frozenset = frozenset()) -> list[int]:
        scores = self.V @ self.U[user]
        order = np.lexsort((np.arange(len(scores)), -scores))
        return [int(j) for j in order if int(j) not in exclude]


def baseline_most_popular(ds: Dataset) -> MostPopularRanker:
    return MostPopularRanker(ds)


def baseline_flat_mf(
    ds: Dataset, hp: Hyperparams, with_bpr: bool = True, rounds: int = 8
) -> FactorRanker:
    """Plain matrix factorization with free per-entity factors.

    with_bpr=False demands lambda_b == 0 so the objective is purely
    pointwise; with_bpr=True is the BPR-MF comparator.
    """
    if not with_bpr and hp.lambda_b != 0.0:
        raise ValueError("with_bpr=False requires lambda_b == 0")
    obs = ObservationSet.from_dataset(ds, hp.negatives_per_positive, hp.seed)
    U, V, _history = fit_flat_mf(obs, hp, rounds=rounds)
    return FactorRanker(U, V)


def fact_ranker(model: FacTModel) -> FactorRanker:
    return FactorRanker(model.user_factors(), model.item_factors())


def _fold_assignment(ds: Dataset, folds: int, seed: int) -> tuple[np.ndarray, int]:
    """Fold index per review; users with fewer observations than folds stay
    train-only (fold -1 for all their reviews). Returns the count of such users.
    """
    fold_of = np.full(len(ds.reviews), -1, dtype=int)
    per_user: dict[int, list[int]] = {}
    for idx, r in enumerate(ds.reviews):
        per_user.setdefault(r.user_id, []).append(idx)
    train_only = 0
    for user in sorted(per_user):
        indices = per_user[user]
        if len(indices) < folds:
            train_only += 1
            continue
        rng = np.random.default_rng(subseed(seed, 201, user))
        perm = rng.permutation(len(indices))
        for pos, which in enumerate(perm):
            fold_of[indices[which]] = pos % folds
    return fold_of, train_only


def _train_subset(ds: Dataset, keep: np.ndarray) -> Dataset:
    reviews = tuple(r for r, k in zip(ds.reviews, keep) if k)
    return Dataset(
        ds.user_ids, ds.item_ids, ds.feature_names, reviews, ds.rating_scale
    )


def _make_ranker(train_ds: Dataset, cfg: TrainConfig, algo: str):
    if algo == "fact":
        return fact_ranker(alternate(train_ds, cfg))
    if algo == "bpr-mf":
        return baseline_flat_mf(train_ds, cfg.hp, with_bpr=True, rounds=cfg.mf_rounds)
    if algo == "mf":
        hp = replace(cfg.hp, lambda_b=0.0)
        return baseline_flat_mf(train_ds, hp, with_bpr=False, rounds=cfg.mf_rounds)
    if algo == "most-popular":
        return baseline_most_popular(train_ds)
    raise ValueError(f"unknown algo '{algo}'; expected one of {ALGOS}")


def cross_validate(
    ds: Dataset,
    cfg: TrainConfig,
    folds: int = 5,
    ks: Sequence[int] = (10, 20, 50, 100),
    algo: str = "fact",
    seed: int | None = None,
    gain_mode: str = "rating",
) -> dict:
    """User-stratified k-fold ranking evaluation.

    Each user's reviews are permuted (seeded per user) and dealt round-robin
    into folds; per fold the model trains on the remainder and is scored by
    mean NDCG over users holding at least one test review, ranking all items
    except that user's training items.

    Returns a dict with per-fold means, the overall mean and std per cutoff,
    and the count of users too sparse to ever be tested.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if gain_mode not in GAIN_MODES:
        raise ValueError(f"gain_mode must be one of {GAIN_MODES}")
    if seed is None:
        seed = cfg.hp.seed
    fold_of, train_only = _fold_assignment(ds, folds, seed)

    per_fold: list[dict[int, float]] = []
    evaluated: list[int] = []
    for f in range(folds):
        train_ds = _train_subset(ds, fold_of != f)
        ranker = _make_ranker(train_ds, cfg, algo)
        train_items: dict[int, set[int]] = {}
        for r in train_ds.reviews:
            train_items.setdefault(r.user_id, set()).add(r.item_id)
        test: dict[int, dict[int, float]] = {}
        for idx, r in enumerate(ds.reviews):
            if fold_of[idx] == f:
                gain = r.rating if gain_mode == "rating" else 1.0
                test.setdefault(r.user_id, {})[r.item_id] = gain
        scores: dict[int, list[float]] = {k: [] for k in ks}
        for user in sorted(test):
            ranking = ranker.rank(user, frozenset(train_items.get(user, ())))
            for k in ks:
                scores[k].append(ndcg_at_k(ranking, test[user], k))
        per_fold.append({k: float(np.mean(scores[k])) if scores[k] else 0.0 for k in ks})
        evaluated.append(len(test))

    mean = {k: float(np.mean([pf[k] for pf in per_fold])) for k in ks}
    std = {k: float(np.std([pf[k] for pf in per_fold])) for k in ks}
    return {
        "algo": algo,
        "folds": folds,
        "ks": list(ks),
        "gain_mode": gain_mode,
        "per_fold": per_fold,
        "mean": mean,
        "std": std,
        "train_only_users": train_only,
        "evaluated_users_per_fold": evaluated,
    }


def cold_start_eval(
    ds: Dataset,
    cfg: TrainConfig,
    k_values: Sequence[int] = tuple(range(6)),
    test_frac: float = 0.05,
    cutoff: int = 50,
    seed: int | None = None,
) -> dict:
    """Cold-user protocol: hold out a user slice, vary the observation budget.

    A seeded 95/5 user split removes the test users' reviews from training.
    For each budget k, every test user with more than k reviews contributes:
    their first k reviews (by timestamp) build a profile that routes through
    the trained user tree, and the remaining reviews are the ground truth
    for NDCG@cutoff over all unseen items. Users with <= k reviews are
    skipped and counted; an empty cohort reports None for that k.
    """
    if not 0.0 < test_frac < 1.0:
        raise ValueError("test_frac must be in (0, 1)")
    if seed is None:
        seed = cfg.hp.seed
    rng = np.random.default_rng(subseed(seed, 301))
    n_test = max(1, int(round(test_frac * ds.n_users)))
    test_users = sorted(int(u) for u in rng.permutation(ds.n_users)[:n_test])
    test_set = set(test_users)

    train_ds = _train_subset(
        ds, np.array([r.user_id not in test_set for r in ds.reviews])
    )
    model = alternate(train_ds, cfg)
    item_factors = model.item_factors()

    by_user: dict[int, list] = {u: [] for u in test_users}
    for r in ds.reviews:
        if r.user_id in test_set:
            by_user[r.user_id].append(r)

    ndcg: dict[int, float | None] = {}
    skipped: dict[int, int] = {}
    for k in k_values:
        vals = []
        skip = 0
        for user in test_users:
            reviews = sorted(by_user[user], key=lambda r: r.timestamp)
            if len(reviews) <= k:
                skip += 1
                continue
            profile = cold_start_profile(reviews, k)
            profile = normalize_profiles([profile], cfg.normalize)[0]
            leaf = route(model.user_tree, profile)[-1]
            scores = item_factors @ leaf.accumulated
            seen = frozenset(r.item_id for r in reviews[:k])
            order = np.lexsort((np.arange(len(scores)), -scores))
            ranking = [int(j) for j in order if int(j) not in seen]
            relevance = {r.item_id: r.rating for r in reviews[k:]}
            vals.append(ndcg_at_k(ranking, relevance, cutoff))
        ndcg[int(k)] = float(np.mean(vals)) if vals else None
        skipped[int(k)] = skip

    return {
        "k_values": [int(k) for k in k_values],
        "cutoff": cutoff,
        "ndcg": ndcg,
        "skipped": skipped,
        "test_users": test_users,
        "n_test_users": len(test_users),
    }


def _truncate_features(ds: Dataset, n_features: int) -> Dataset:
    """Keep the n most-mentioned features (ties by name), remapping ids."""
    counts: dict[int, int] = {}
    for r in ds.reviews:
        for m in r.mentions:
            counts[m.feature_id] = counts.get(m.feature_id, 0) + 1
    ranked = sorted(
        range(ds.n_features),
        key=lambda f: (-counts.get(f, 0), ds.feature_names[f]),
    )[:n_features]
    keep = sorted(ranked, key=lambda f: ds.feature_names[f])
    remap = {old: new for new, old in enumerate(keep)}
    reviews = tuple(
        replace(
            r,
            mentions=tuple(
                replace(m, feature_id=remap[m.feature_id])
                for m in r.mentions
                if m.feature_id in remap
            ),
        )
        for r in ds.reviews
    )
    names = tuple(ds.feature_names[f] for f in keep)
    return Dataset(ds.user_ids, ds.item_ids, names, reviews, ds.rating_scale)


def _sweep_cell(ds: Dataset, cfg: TrainConfig, axis: str, value) -> tuple[Dataset, TrainConfig]:
    if axis == "depth":
        return ds, replace(cfg, h=int(value))
    if axis == "latent_dim":
        return ds, replace(cfg, hp=replace(cfg.hp, d=int(value)))
    if axis == "phi":
        lam = lambda_b_for_weight(float(value), cfg.hp, ds.n_users, ds.n_items)
        return ds, replace(cfg, hp=replace(cfg.hp, lambda_b=lam))
    if axis == "n_features":
        return _truncate_features(ds, int(value)), cfg
    if axis == "parent_factors":
        return ds, replace(cfg, use_parent_factors=bool(value))
    raise ValueError(f"unknown sweep axis '{axis}'; expected one of {SWEEP_AXES}")


def _config_delta(a: TrainConfig, b: TrainConfig) -> set[str]:
    changed = set()
    for name in vars(a):
        va, vb = getattr(a, name), getattr(b, name)
        if name == "hp":
            changed |= {f"hp.{n}" for n in vars(va) if getattr(va, n) != getattr(vb, n)}
        elif va != vb:
            changed.add(name)
    return changed


_AXIS_FIELDS = {
    "depth": {"h"},
    "latent_dim": {"hp.d"},
    "phi": {"hp.lambda_b"},
    "n_features": set(),
    "parent_factors": {"use_parent_factors"},
}


def sweep(
    ds: Dataset,
    cfg: TrainConfig,
    axis: str,
    values: Sequence,
    out_dir: str | Path | None = None,
    folds: int = 3,
    ks: Sequence[int] = (10, 50),
) -> dict:
    """One experiment per value along a single axis, all else fixed.

    Each cell trains on the full dataset (recording the final objective)
    and cross-validates for NDCG. Cell failures are recorded and the sweep
    continues. With out_dir set, writes sweep_<axis>.csv with rows
    (axis, value, metric, mean, std, folds) and a JSON summary alongside.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis '{axis}'; expected one of {SWEEP_AXES}")
    cells = []
    for value in values:
        cell: dict = {"value": value if axis != "parent_factors" else bool(value)}
        try:
            ds_v, cfg_v = _sweep_cell(ds, cfg, axis, value)
            delta = _config_delta(cfg, cfg_v)
            if not delta <= _AXIS_FIELDS[axis]:
                raise RuntimeError(f"sweep touched unexpected config fields {delta}")
            model = alternate(ds_v, cfg_v)
            objectives = model.training_report["convergence"]["objectives"]
            cell["objective"] = objectives[-1]
            cv = cross_validate(ds_v, cfg_v, folds=folds, ks=ks, algo="fact")
            cell["ndcg_mean"] = cv["mean"]
            cell["ndcg_std"] = cv["std"]
            cell["error"] = None
        except Exception as exc:  # noqa: BLE001 - per-cell isolation is the contract
            cell["error"] = f"{type(exc).__name__}: {exc}"
        cells.append(cell)

    summary = {"axis": axis, "values": list(values), "folds": folds, "ks": list(ks), "cells": cells}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"sweep_{axis}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["axis", "value", "metric", "mean", "std", "folds"])
            for cell in cells:
                if cell["error"] is not None:
                    continue
                writer.writerow([axis, cell["value"], "objective", cell["objective"], 0.0, 1])
                for k in ks:
                    writer.writerow(
                        [axis, cell["value"], f"ndcg@{k}",
                         cell["ndcg_mean"][k], cell["ndcg_std"][k], folds]
                    )
        (out_dir / f"sweep_{axis}.json").write_text(
            json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )
        summary["csv_path"] = str(csv_path)
    return summary


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-cluster review generator settings.

    Users and items are assigned to clusters round-robin; the rating of a
    (user, item) pair is its cluster-block mean, plus a fixed per-item
    quality offset (uniform in +/- item_quality/2), plus Gaussian noise,
    clipped to the rating scale. Each review mentions the user cluster's
    taste features (frequency mention_rate +/- mention_jitter) and the item
    cluster's aspect feature once, with sentiment following the rating.
    """

    n_users: int = 200
    n_items: int = 100
    user_clusters: int = 2
    item_clusters: int = 2
    features_per_user_cluster: int = 1
    features_per_item_cluster: int = 1
    block_means: tuple[tuple[float, ...], ...] = ((4.5, 1.5), (1.5, 4.5))
    noise: float = 0.3
    seed: int = 0
    reviews_per_user: int = 20
    mention_rate: int = 2
    mention_jitter: int = 1
    item_quality: float = 1.0
    rating_scale: tuple[float, float] = (1.0, 5.0)

    def __post_init__(self):
        if self.noise < 0 or self.item_quality < 0:
            raise ValueError("noise and item_quality must be >= 0")
        if min(self.user_clusters, self.item_clusters) < 1:
            raise ValueError("cluster counts must be >= 1")
        if len(self.block_means) != self.user_clusters or any(
            len(row) != self.item_clusters for row in self.block_means
        ):
            raise ValueError("block_means must be user_clusters x item_clusters")
        if self.reviews_per_user < 1 or self.reviews_per_user > self.n_items:
            raise ValueError("reviews_per_user must be in [1, n_items]")
        if self.mention_rate < 1 or self.mention_jitter < 0:
            raise ValueError("mention_rate >= 1 and mention_jitter >= 0 required")
        if self.mention_jitter >= self.mention_rate:
            raise ValueError("mention_jitter must be < mention_rate")


def synth_generate(spec: SyntheticSpec) -> Dataset:
    """Generate a planted-cluster Dataset, fully determined by spec.seed."""
    from .ingest import dataset_from_records

    lo, hi = spec.rating_scale
    mid = (lo + hi) / 2.0
    qrng = np.random.default_rng(subseed(spec.seed, 402))
    quality = qrng.uniform(-spec.item_quality / 2, spec.item_quality / 2, size=spec.n_items)
    records = []
    width = len(str(max(spec.n_users, spec.n_items)))
    for u in range(spec.n_users):
        uc = u % spec.user_clusters
        rng = np.random.default_rng(subseed(spec.seed, 401, u))
        items = rng.choice(spec.n_items, size=spec.reviews_per_user, replace=False)
        for t, item in enumerate(int(i) for i in items):
            ic = item % spec.item_clusters
            mean = spec.block_means[uc][ic] + quality[item]
            rating = float(np.clip(mean + spec.noise * rng.standard_normal(), lo, hi))
            polarity = 1 if rating >= mid else -1
            mentions = []
            for j in range(spec.features_per_user_cluster):
                count = int(
                    spec.mention_rate
                    + rng.integers(-spec.mention_jitter, spec.mention_jitter + 1)
                )
                mentions += [
                    {"feature": f"taste_c{uc}_f{j}", "polarity": polarity}
                ] * max(count, 1)
            for j in range(spec.features_per_item_cluster):
                mentions.append({"feature": f"aspect_c{ic}_f{j}", "polarity": polarity})
            records.append(
                {
                    "user": f"u{u:0{width}d}",
                    "item": f"i{item:0{width}d}",
                    "rating": round(rating, 6),
                    "ts": t,
                    "mentions": mentions,
                }
            )
    return dataset_from_records(records, spec.rating_scale)
