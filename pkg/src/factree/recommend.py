"""Prediction, top-K ranking, rule-path explanations, and the cold-start interview.

Explanations are literal: the features named are exactly the predicates on
the routed user and item paths. The interview walks the user tree, asking
one feature question per node; like/dislike/unknown select the three
branches.
"""
from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass, field

import numpy as np

from .ingest import Dataset, FeatureProfile, Review, USER_SIDE
from .train import FacTModel
from .tree import FactorTree, TreeNode, route

ANSWERS = ("like", "dislike", "unknown")
BRANCH_OF_ANSWER = {"like": 0, "dislike": 1, "unknown": 2}
OUTCOME_NAMES = ("L", "R", "E")

DEFAULT_TEMPLATES = {
    "match": "We recommend this item to you because {clauses}.",
    "guess": "We guess you would like this item because of {clauses}.",
    "generic": "We recommend this item because it is popular with users similar to you.",
}


class RecommendError(ValueError):
    """Unresolvable user or item reference."""


class InterviewStateError(RuntimeError):
    """Interview operation invalid in the session's current state."""


@dataclass
class ScoredItem:
    index: int
    item_id: str
    score: float


@dataclass
class PathStep:
    """One predicate question on a routed path and the branch taken."""

    feature_id: int
    threshold: float
    outcome: str
    depth: int


@dataclass
class Explanation:
    shared_features: list[tuple[str, str, str, int]]
    fallback_features: list[tuple[str, str | None, str | None, int]]
    rendered: str

    def feature_names(self) -> list[str]:
        names = [f[0] for f in self.shared_features]
        names += [f[0] for f in self.fallback_features if f[0] not in names]
        return names


@dataclass
class InterviewSession:
    session_id: str
    model: FacTModel
    current_id: int
    log: list[tuple[str, str]] = field(default_factory=list)
    status: str = "active"

    @property
    def finished(self) -> bool:
        return self.status == "finished"

    def current_node(self) -> TreeNode:
        return self.model.user_tree.nodes[self.current_id]

    def question(self) -> dict | None:
        node = self.current_node()
        if node.is_leaf:
            return None
        feature = self.model.feature_vocab[node.predicate.feature_id]
        return {"feature": feature, "prompt": f"How do you like this {feature}?"}


def predict(model: FacTModel, user_factor: np.ndarray, item_factor: np.ndarray) -> float:
    """Predicted rating: inner product of the two factors."""
    u = np.asarray(user_factor, dtype=float)
    v = np.asarray(item_factor, dtype=float)
    if u.shape != (model.d,) or v.shape != (model.d,):
        raise ValueError(f"factor dims must both be ({model.d},)")
    return float(u @ v)


def _resolve_user(model: FacTModel, user) -> tuple[np.ndarray, int | None]:
    """User factor plus the internal index when the user is known."""
    if isinstance(user, FeatureProfile) or isinstance(user, dict):
        path = route(model.user_tree, user)
        return path[-1].accumulated.copy(), None
    if isinstance(user, str):
        try:
            idx = model.user_ids.index(user)
        except ValueError:
            raise RecommendError(
                f"unknown user id '{user}'; cold users should go through the interview flow"
            ) from None
        return model.user_factor(idx), idx
    idx = int(user)
    if not 0 <= idx < len(model.user_ids):
        raise RecommendError(
            f"unknown user index {idx}; cold users should go through the interview flow"
        )
    return model.user_factor(idx), idx


def _resolve_item(model: FacTModel, item) -> int:
    if isinstance(item, str):
        try:
            return model.item_ids.index(item)
        except ValueError:
            raise RecommendError(f"unknown item id '{item}'") from None
    idx = int(item)
    if not 0 <= idx < len(model.item_ids):
        raise RecommendError(f"unknown item index {idx}")
    return idx


def rank_items(
    model: FacTModel,
    user_factor: np.ndarray,
    k: int | None = None,
    exclude: frozenset | set = frozenset(),
) -> list[ScoredItem]:
    """All items sorted by predicted rating descending, ties by item index."""
    scores = model.item_factors() @ np.asarray(user_factor, dtype=float)
    order = np.lexsort((np.arange(len(scores)), -scores))
    out = []
    for j in order:
        j = int(j)
        if j in exclude:
            continue
        out.append(ScoredItem(j, model.item_ids[j], float(scores[j])))
        if k is not None and len(out) >= k:
            break
    return out


def recommend_topk(
    model: FacTModel,
    user,
    k: int,
    exclude_seen: bool = False,
    dataset: Dataset | None = None,
) -> list[ScoredItem]:
    """Top-k items for a known user id or a feature profile.

    exclude_seen drops the items the user has rated in the given dataset;
    asking for more items than remain returns what exists.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    factor, idx = _resolve_user(model, user)
    exclude: set[int] = set()
    if exclude_seen:
        if dataset is None:
            raise ValueError("exclude_seen requires the dataset of observed ratings")
        if idx is not None:
            exclude = {r.item_id for r in dataset.reviews if r.user_id == idx}
    return rank_items(model, factor, k, frozenset(exclude))


def _path_steps(path: list[TreeNode]) -> list[PathStep]:
    steps = []
    for node, nxt in zip(path, path[1:]):
        branch = node.children.index(nxt.node_id)
        steps.append(
            PathStep(node.predicate.feature_id, node.predicate.threshold,
                     OUTCOME_NAMES[branch], node.depth)
        )
    return steps


def _stable_digit(*parts) -> int:
    text = "|".join(str(p) for p in parts)
    return hashlib.md5(text.encode("utf-8")).digest()[0]


def _clause(feature: str, user_outcome: str | None, item_outcome: str | None) -> str:
    bits = []
    if item_outcome == "L":
        word = "excellent" if _stable_digit("mod", feature) % 2 else "good"
        bits.append(f"its {word} {feature}")
    elif item_outcome == "R":
        bits.append(f"its debated {feature}")
    if user_outcome == "L":
        bits.append(f"your emphasis on {feature}")
    elif user_outcome == "R":
        bits.append(f"your passing interest in {feature}")
    if not bits:
        return f"the {feature}"
    return " matching ".join(bits)


def build_explanation(
    model: FacTModel,
    user_steps: list[PathStep],
    item_steps: list[PathStep],
    user_key,
    item_key,
    min_features: int = 1,
    templates: dict | None = None,
    max_clauses: int = 3,
) -> Explanation:
    """Combine the two rule paths into a rendered explanation.

    Features on both paths are preferred; when fewer than min_features are
    shared, the union fills in, deeper (more specific) questions first.
    """
    templates = {**DEFAULT_TEMPLATES, **(templates or {})}
    vocab = model.feature_vocab

    def last_by_feature(steps: list[PathStep]) -> dict[int, PathStep]:
        out: dict[int, PathStep] = {}
        for s in steps:
            out[s.feature_id] = s
        return out

    u_by_f = last_by_feature(user_steps)
    i_by_f = last_by_feature(item_steps)
    shared_ids = sorted(
        set(u_by_f) & set(i_by_f),
        key=lambda f: (-max(u_by_f[f].depth, i_by_f[f].depth), vocab[f]),
    )
    shared = [
        (vocab[f], u_by_f[f].outcome, i_by_f[f].outcome, max(u_by_f[f].depth, i_by_f[f].depth))
        for f in shared_ids
    ]

    fallback: list[tuple[str, str | None, str | None, int]] = []
    if len(shared) < min_features:
        union_ids = sorted(
            (set(u_by_f) | set(i_by_f)) - set(shared_ids),
            key=lambda f: (
                -max(
                    u_by_f[f].depth if f in u_by_f else -1,
                    i_by_f[f].depth if f in i_by_f else -1,
                ),
                vocab[f],
            ),
        )
        fallback = [
            (
                vocab[f],
                u_by_f[f].outcome if f in u_by_f else None,
                i_by_f[f].outcome if f in i_by_f else None,
                max(
                    u_by_f[f].depth if f in u_by_f else -1,
                    i_by_f[f].depth if f in i_by_f else -1,
                ),
            )
            for f in union_ids
        ]

    used = shared if shared else fallback
    if not used:
        return Explanation([], [], templates["generic"])
    clauses = [_clause(name, uo, io) for name, uo, io, _lvl in used[:max_clauses]]
    joined = clauses[0] if len(clauses) == 1 else ", ".join(clauses[:-1]) + " and " + clauses[-1]
    pattern = "match" if _stable_digit(user_key, item_key) % 2 == 0 else "guess"
    return Explanation(shared, fallback, templates[pattern].format(clauses=joined))


def explain(
    model: FacTModel,
    user,
    item,
    min_features: int = 1,
    templates: dict | None = None,
) -> Explanation:
    """Explanation for (user, item) from their routed tree paths."""
    if isinstance(user, (FeatureProfile, dict)):
        user_path = route(model.user_tree, user)
        user_key = "profile"
    else:
        _factor, idx = _resolve_user(model, user)
        user_path = model.user_tree.path_for(idx)
        user_key = model.user_ids[idx]
    item_idx = _resolve_item(model, item)
    item_path = model.item_tree.path_for(item_idx)
    return build_explanation(
        model,
        _path_steps(user_path),
        _path_steps(item_path),
        user_key,
        model.item_ids[item_idx],
        min_features=min_features,
        templates=templates,
    )


def explanation_is_sound(model: FacTModel, explanation: Explanation, user, item) -> bool:
    """Every named feature must be a predicate on one of the routed paths."""
    if isinstance(user, (FeatureProfile, dict)):
        user_path = route(model.user_tree, user)
    elif isinstance(user, list):
        # Interview case: the caller passes the path steps directly.
        user_path = None
        user_features = {model.feature_vocab[s.feature_id] for s in user}
    else:
        _f, idx = _resolve_user(model, user)
        user_path = model.user_tree.path_for(idx)
    if user_path is not None:
        user_features = {
            model.feature_vocab[n.predicate.feature_id] for n in user_path if not n.is_leaf
        }
    item_path = model.item_tree.path_for(_resolve_item(model, item))
    item_features = {
        model.feature_vocab[n.predicate.feature_id] for n in item_path if not n.is_leaf
    }
    allowed = user_features | item_features
    return all(name in allowed for name in explanation.feature_names())


def interview_start(model: FacTModel) -> InterviewSession:
    """New session at the user-tree root; finished immediately on a leaf root."""
    session = InterviewSession(
        session_id=secrets.token_hex(16),
        model=model,
        current_id=model.user_tree.root_id,
    )
    if session.current_node().is_leaf:
        session.status = "finished"
    return session


def interview_answer(session: InterviewSession, answer: str) -> InterviewSession:
    """Apply one answer: like -> L child, dislike -> R, unknown -> E."""
    if session.finished:
        raise InterviewStateError("session already finished")
    if answer not in ANSWERS:
        raise ValueError(f"answer must be one of {ANSWERS}, got {answer!r}")
    node = session.current_node()
    feature = session.model.feature_vocab[node.predicate.feature_id]
    session.current_id = node.children[BRANCH_OF_ANSWER[answer]]
    session.log.append((feature, answer))
    if session.current_node().is_leaf:
        session.status = "finished"
    return session


def interview_path_steps(session: InterviewSession) -> list[PathStep]:
    """The interview's root-to-current path as predicate steps."""
    tree = session.model.user_tree
    node = tree.root()
    steps = []
    for feature, answer in session.log:
        steps.append(
            PathStep(
                node.predicate.feature_id,
                node.predicate.threshold,
                OUTCOME_NAMES[BRANCH_OF_ANSWER[answer]],
                node.depth,
            )
        )
        node = tree.nodes[node.children[BRANCH_OF_ANSWER[answer]]]
    return steps


def interview_recommend(
    session: InterviewSession, k: int
) -> list[tuple[ScoredItem, Explanation]]:
    """Top-k for the interviewed user with explanations from the interview path."""
    if not session.finished:
        raise InterviewStateError("session still active; answer the remaining questions")
    model = session.model
    factor = session.current_node().accumulated
    items = rank_items(model, factor, k)
    user_steps = interview_path_steps(session)
    out = []
    for scored in items:
        item_path = model.item_tree.path_for(scored.index)
        # Key wording by the reached leaf, not the session id: sessions that
        # answered identically must render identical explanations.
        expl = build_explanation(
            model,
            user_steps,
            _path_steps(item_path),
            f"interview:{session.current_id}",
            scored.item_id,
        )
        out.append((scored, expl))
    return out


def cold_start_profile(reviews: list[Review], k: int | None = None) -> FeatureProfile:
    """Mention-frequency profile from a user's first k reviews (unnormalized).

    With k=None the given reviews are used as-is; otherwise they are sorted
    by timestamp and truncated. k=0 yields the empty profile, which routes
    through the unknown branch at every level.
    """
    if k is not None:
        if k < 0:
            raise ValueError("k must be >= 0")
        reviews = sorted(reviews, key=lambda r: r.timestamp)[:k]
    entries: dict[int, float] = {}
    total = 0
    for r in reviews:
        for m in r.mentions:
            entries[m.feature_id] = entries.get(m.feature_id, 0.0) + 1.0
            total += 1
    return FeatureProfile(dict(sorted(entries.items())), USER_SIDE, total)
