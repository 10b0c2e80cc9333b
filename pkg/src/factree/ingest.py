"""Review ingestion and feature-profile construction.

Reads JSON-lines review data (one review per line with sentiment-tagged
feature mentions), assigns deterministic integer ids, and builds the
per-user mention-frequency profiles and per-item signed sentiment profiles
that drive predicate induction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

USER_SIDE = "user"
ITEM_SIDE = "item"

NORMALIZE_MODES = ("none", "per-entity-total")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class SentimentMention:
    """One tagged feature mention inside a review.

    polarity is +1 or -1; the opinion phrase is display-only.
    """

    feature_id: int
    polarity: int
    opinion: str | None = None


@dataclass(frozen=True)
class Review:
    user_id: int
    item_id: int
    rating: float
    timestamp: int
    mentions: tuple[SentimentMention, ...] = ()


@dataclass
class FeatureProfile:
    """Sparse feature -> value map for one entity.

    An absent key means "unknown", which is distinct from a stored 0.
    total_mentions counts every mention (positive and negative) the entity
    produced or received; it is the denominator for per-entity-total
    normalization.
    """

    entries: dict[int, float]
    side: str
    total_mentions: int = 0

    def copy(self) -> "FeatureProfile":
        return FeatureProfile(dict(self.entries), self.side, self.total_mentions)


@dataclass
class Dataset:
    """Deduplicated reviews plus the id maps that anchor every index."""

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    feature_names: tuple[str, ...]
    reviews: tuple[Review, ...]
    rating_scale: tuple[float, float] = (1.0, 5.0)
    user_profiles: list[FeatureProfile] | None = None
    item_profiles: list[FeatureProfile] | None = None

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def observations(self) -> list[tuple[int, int, float]]:
        return [(r.user_id, r.item_id, r.rating) for r in self.reviews]

    def reviews_by_user(self) -> list[list[Review]]:
        per_user: list[list[Review]] = [[] for _ in range(self.n_users)]
        for r in self.reviews:
            per_user[r.user_id].append(r)
        return per_user

    def user_index(self) -> dict[str, int]:
        return {key: i for i, key in enumerate(self.user_ids)}

    def item_index(self) -> dict[str, int]:
        return {key: j for j, key in enumerate(self.item_ids)}


def _validate_record(rec: dict, line_no: int, rating_scale: tuple[float, float]) -> None:
    for key in ("user", "item", "rating", "ts"):
        if key not in rec:
            raise DataError(f"line {line_no}: missing field '{key}'")
    if not isinstance(rec["user"], str) or not isinstance(rec["item"], str):
        raise DataError(f"line {line_no}: user and item must be strings")
    rating = rec["rating"]
    if not isinstance(rating, (int, float)) or isinstance(rating, bool):
        raise DataError(f"line {line_no}: rating must be a number")
    lo, hi = rating_scale
    if not (lo <= float(rating) <= hi):
        raise DataError(f"line {line_no}: rating {rating} outside scale [{lo}, {hi}]")
    if not isinstance(rec["ts"], int) or isinstance(rec["ts"], bool):
        raise DataError(f"line {line_no}: ts must be an integer")
    for m in rec.get("mentions", []):
        if not isinstance(m, dict) or "feature" not in m or "polarity" not in m:
            raise DataError(f"line {line_no}: malformed mention {m!r}")
        if m["polarity"] not in (1, -1):
            raise DataError(f"line {line_no}: polarity must be +1 or -1, got {m['polarity']!r}")


def dataset_from_records(
    records: list[dict],
    rating_scale: tuple[float, float] = (1.0, 5.0),
    vocab: list[str] | None = None,
) -> Dataset:
    """Assemble a Dataset from parsed review dicts.

    Duplicate (user, item) pairs keep the latest timestamp (ties: the later
    record wins). Ids are assigned by lexicographic order of the raw keys.
    """
    latest: dict[tuple[str, str], tuple[int, int, dict]] = {}
    for order, rec in enumerate(records):
        key = (rec["user"], rec["item"])
        ts = rec["ts"]
        if key not in latest or (ts, order) >= latest[key][:2]:
            latest[key] = (ts, order, rec)

    users = sorted({u for (u, _i) in latest})
    items = sorted({i for (_u, i) in latest})
    if vocab is not None:
        feature_names = sorted(vocab)
        known = set(feature_names)
        for _ts, _order, rec in latest.values():
            for m in rec.get("mentions", []):
                if m["feature"] not in known:
                    raise DataError(f"feature '{m['feature']}' not in vocabulary")
    else:
        feature_names = sorted(
            {m["feature"] for (_t, _o, rec) in latest.values() for m in rec.get("mentions", [])}
        )

    uidx = {u: i for i, u in enumerate(users)}
    iidx = {i: j for j, i in enumerate(items)}
    fidx = {f: l for l, f in enumerate(feature_names)}

    reviews = []
    for (u, i), (_ts, _order, rec) in sorted(latest.items()):
        mentions = tuple(
            SentimentMention(fidx[m["feature"]], int(m["polarity"]), m.get("opinion"))
            for m in rec.get("mentions", [])
        )
        reviews.append(Review(uidx[u], iidx[i], float(rec["rating"]), int(rec["ts"]), mentions))

    return Dataset(tuple(users), tuple(items), tuple(feature_names), tuple(reviews), rating_scale)


def parse_dataset(
    path: str | Path,
    schema: str = "jsonl",
    vocab_path: str | Path | None = None,
    rating_scale: tuple[float, float] = (1.0, 5.0),
) -> Dataset:
    """Parse a JSON-lines review file into a Dataset.

    Raises DataError with the offending line number on malformed input.
    """
    if schema != "jsonl":
        raise DataError(f"unknown schema '{schema}'")
    vocab = None
    if vocab_path is not None:
        vocab = json.loads(Path(vocab_path).read_text(encoding="utf-8"))
        if not isinstance(vocab, list) or not all(isinstance(x, str) for x in vocab):
            raise DataError("vocab file must be a JSON array of feature names")

    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DataError(f"line {line_no}: expected an object")
            _validate_record(rec, line_no, rating_scale)
            records.append(rec)
    return dataset_from_records(records, rating_scale, vocab)


def write_jsonl(ds: Dataset, path: str | Path) -> None:
    """Serialize a Dataset back to the JSON-lines review format (deterministic bytes)."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in ds.reviews:
            rec = {
                "user": ds.user_ids[r.user_id],
                "item": ds.item_ids[r.item_id],
                "rating": r.rating,
                "ts": r.timestamp,
                "mentions": [
                    {"feature": ds.feature_names[m.feature_id], "polarity": m.polarity}
                    | ({"opinion": m.opinion} if m.opinion else {})
                    for m in r.mentions
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _count_mentions(ds: Dataset, group_by: str) -> list[dict[int, tuple[int, int]]]:
    """Per-entity (positive, negative) mention counts keyed by feature."""
    size = ds.n_users if group_by == USER_SIDE else ds.n_items
    counts: list[dict[int, tuple[int, int]]] = [dict() for _ in range(size)]
    for r in ds.reviews:
        entity = r.user_id if group_by == USER_SIDE else r.item_id
        bucket = counts[entity]
        for m in r.mentions:
            p, n = bucket.get(m.feature_id, (0, 0))
            if m.polarity > 0:
                p += 1
            else:
                n += 1
            bucket[m.feature_id] = (p, n)
    return counts


def build_user_profiles(ds: Dataset) -> list[FeatureProfile]:
    """Mention-frequency profiles: value = positive + negative mention counts."""
    profiles = []
    for bucket in _count_mentions(ds, USER_SIDE):
        entries = {fid: float(p + n) for fid, (p, n) in sorted(bucket.items())}
        total = sum(p + n for p, n in bucket.values())
        profiles.append(FeatureProfile(entries, USER_SIDE, total))
    return profiles


def build_item_profiles(ds: Dataset) -> list[FeatureProfile]:
    """Signed sentiment profiles: value = positive - negative mention counts.

    A feature with equal positive and negative counts stores 0, which is a
    known value and distinct from an absent key.
    """
    profiles = []
    for bucket in _count_mentions(ds, ITEM_SIDE):
        entries = {fid: float(p - n) for fid, (p, n) in sorted(bucket.items())}
        total = sum(p + n for p, n in bucket.values())
        profiles.append(FeatureProfile(entries, ITEM_SIDE, total))
    return profiles


def normalize_profiles(profiles: list[FeatureProfile], mode: str) -> list[FeatureProfile]:
    """Normalize known values; unknown entries stay unknown.

    per-entity-total divides each value by the entity's total mention count,
    preserving sign. mode "none" is the identity.
    """
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"unknown normalization mode '{mode}'")
    if mode == "none":
        return [p.copy() for p in profiles]
    out = []
    for p in profiles:
        if p.entries and p.total_mentions <= 0:
            raise RuntimeError("profile has present keys but zero total mentions")
        scale = float(p.total_mentions) if p.total_mentions else 1.0
        out.append(FeatureProfile({f: v / scale for f, v in p.entries.items()}, p.side, p.total_mentions))
    return out


def candidate_thresholds(profiles: list[FeatureProfile], bins: int) -> dict[int, tuple[float, ...]]:
    """Per-feature candidate split thresholds.

    Thresholds are midpoints between consecutive distinct observed values.
    When more than `bins` midpoints exist, `bins` of them are kept by
    equal-frequency quantile selection over the known values (duplicates
    weigh in). A feature with one distinct value gets that value itself.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    by_feature: dict[int, list[float]] = {}
    for p in profiles:
        for fid, v in p.entries.items():
            by_feature.setdefault(fid, []).append(v)

    out: dict[int, tuple[float, ...]] = {}
    for fid, vals in sorted(by_feature.items()):
        vals.sort()
        distinct = sorted(set(vals))
        if len(distinct) == 1:
            out[fid] = (distinct[0],)
            continue
        midpoints = [(a + b) / 2.0 for a, b in zip(distinct, distinct[1:])]
        if len(midpoints) <= bins:
            out[fid] = tuple(midpoints)
            continue
        # Equal-frequency pick: the b-th threshold sits at the first distinct
        # value whose cumulative count reaches b/(bins+1) of the mass, clamped
        # so the chosen midpoint indices stay strictly increasing.
        cum = []
        running = 0
        k = 0
        for dv in distinct:
            while k < len(vals) and vals[k] <= dv:
                running += 1
                k += 1
            cum.append(running)
        chosen: list[int] = []
        prev = -1
        for b in range(1, bins + 1):
            target = b * len(vals) / (bins + 1)
            idx = next(i for i, c in enumerate(cum) if c >= target)
            idx = max(idx, prev + 1)
            # Leave room for the remaining bins - b picks above this one.
            idx = min(idx, len(midpoints) - 1 - (bins - b))
            chosen.append(idx)
            prev = idx
        out[fid] = tuple(midpoints[i] for i in chosen)
    return out


@dataclass
class DiscretizationSpec:
    """Candidate threshold lists for both sides plus the normalization context."""

    user_thresholds: dict[int, tuple[float, ...]]
    item_thresholds: dict[int, tuple[float, ...]]
    mode: str
    bins: int

    @classmethod
    def build(
        cls,
        user_profiles: list[FeatureProfile],
        item_profiles: list[FeatureProfile],
        bins: int,
        mode: str,
    ) -> "DiscretizationSpec":
        return cls(
            candidate_thresholds(user_profiles, bins),
            candidate_thresholds(item_profiles, bins),
            mode,
            bins,
        )

    def for_side(self, side: str) -> dict[int, tuple[float, ...]]:
        return self.user_thresholds if side == USER_SIDE else self.item_thresholds


def filter_dataset(
    ds: Dataset,
    min_feature_freq: int = 0,
    min_reviews_per_user: int = 0,
    min_reviews_per_item: int = 0,
) -> Dataset:
    """Recursively drop sparse features, users, and items until a fixed point.

    Each round removes features mentioned fewer than min_feature_freq times,
    then reviews of removed entities, then users and items below their review
    thresholds. Surviving ids are re-assigned compactly (original lexicographic
    order preserved). Raises DataError when nothing survives.
    """
    if min(min_feature_freq, min_reviews_per_user, min_reviews_per_item) < 0:
        raise ValueError("thresholds must be >= 0")

    reviews = list(ds.reviews)
    live_features = set(range(ds.n_features))
    live_users = set(range(ds.n_users))
    live_items = set(range(ds.n_items))

    changed = True
    while changed:
        changed = False
        feature_freq: dict[int, int] = {}
        for r in reviews:
            for m in r.mentions:
                if m.feature_id in live_features:
                    feature_freq[m.feature_id] = feature_freq.get(m.feature_id, 0) + 1
        drop_features = {f for f in live_features if feature_freq.get(f, 0) < min_feature_freq}
        if drop_features:
            live_features -= drop_features
            reviews = [
                replace(r, mentions=tuple(m for m in r.mentions if m.feature_id in live_features))
                for r in reviews
            ]
            changed = True

        kept = [r for r in reviews if r.user_id in live_users and r.item_id in live_items]
        if len(kept) != len(reviews):
            reviews = kept
            changed = True

        user_count: dict[int, int] = {}
        item_count: dict[int, int] = {}
        for r in reviews:
            user_count[r.user_id] = user_count.get(r.user_id, 0) + 1
            item_count[r.item_id] = item_count.get(r.item_id, 0) + 1
        drop_users = {u for u in live_users if user_count.get(u, 0) < min_reviews_per_user}
        if drop_users:
            live_users -= drop_users
            reviews = [r for r in reviews if r.user_id in live_users]
            changed = True
        drop_items = {i for i in live_items if item_count.get(i, 0) < min_reviews_per_item}
        if drop_items:
            live_items -= drop_items
            reviews = [r for r in reviews if r.item_id in live_items]
            changed = True

    if not reviews or not live_users or not live_items:
        raise DataError("dataset empty after filtering")

    users = sorted(live_users)
    items = sorted(live_items)
    features = sorted(live_features)
    umap = {u: i for i, u in enumerate(users)}
    imap = {i: j for j, i in enumerate(items)}
    fmap = {f: l for l, f in enumerate(features)}
    new_reviews = tuple(
        Review(
            umap[r.user_id],
            imap[r.item_id],
            r.rating,
            r.timestamp,
            tuple(SentimentMention(fmap[m.feature_id], m.polarity, m.opinion) for m in r.mentions),
        )
        for r in reviews
    )
    return Dataset(
        tuple(ds.user_ids[u] for u in users),
        tuple(ds.item_ids[i] for i in items),
        tuple(ds.feature_names[f] for f in features),
        new_reviews,
        ds.rating_scale,
    )


def profile_matrix(profiles: list[FeatureProfile], n_features: int) -> np.ndarray:
    """Dense (entities x features) value matrix with NaN marking unknown."""
    mat = np.full((len(profiles), n_features), np.nan)
    for row, p in enumerate(profiles):
        for fid, v in p.entries.items():
            mat[row, fid] = v
    return mat
