"""Explanation-rule induction.

Grows ternary decision trees over feature profiles: each node tests one
(feature, threshold) predicate, sending entities with value >= threshold
left, below-threshold right, and unknown to the third branch. Every node
carries a latent-factor residual; an entity's factor is the sum of
residuals along its root path. Predicate selection exhaustively scores
candidates by refitting the three child vectors and keeping the lowest
combined objective.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .factorization import (
    FitProblem,
    Hyperparams,
    ObservationSet,
    compile_problem,
    fit_rows,
    subseed,
)
from .ingest import DiscretizationSpec, FeatureProfile, USER_SIDE


class NoValidSplit(Exception):
    """Every candidate predicate routes all entities into a single child."""


@dataclass(frozen=True)
class Predicate:
    feature_id: int
    threshold: float


@dataclass
class TreeNode:
    node_id: int
    depth: int
    members: tuple[int, ...]
    residual: np.ndarray
    accumulated: np.ndarray
    predicate: Predicate | None = None
    children: tuple[int, int, int] | None = None
    parent_id: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.predicate is None

    def member_set(self) -> frozenset:
        cache = self.__dict__.get("_member_cache")
        if cache is None:
            cache = frozenset(self.members)
            self.__dict__["_member_cache"] = cache
        return cache


@dataclass
class SplitResult:
    predicate: Predicate
    residuals: np.ndarray
    accumulated: np.ndarray
    objective: float
    sizes: tuple[int, int, int]
    groups: tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass
class SplitAudit:
    """One executed split: the objective before and after fitting children."""

    node_id: int
    depth: int
    predicate: Predicate
    unsplit_objective: float
    split_objective: float
    sizes: tuple[int, int, int]


@dataclass
class FactorTree:
    side: str
    max_depth: int
    nodes: list[TreeNode] = field(default_factory=list)
    root_id: int = 0
    audits: list[SplitAudit] = field(default_factory=list)

    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.nodes if n.is_leaf]

    def path_for(self, entity: int) -> list[TreeNode]:
        """Root-to-leaf path of nodes whose member sets contain the entity."""
        node = self.root()
        if entity not in node.member_set():
            raise KeyError(f"entity {entity} is not a member of this tree")
        path = [node]
        while not node.is_leaf:
            nxt = None
            for cid in node.children:
                child = self.nodes[cid]
                if entity in child.member_set():
                    nxt = child
                    break
            if nxt is None:
                raise KeyError(f"entity {entity} is not a member of any leaf")
            path.append(nxt)
            node = nxt
        return path

    def leaf_for(self, entity: int) -> TreeNode:
        """The unique leaf whose member set contains the entity."""
        return self.path_for(entity)[-1]

    def leaf_factors(self, n_entities: int) -> np.ndarray:
        """Per-entity accumulated vectors harvested from the leaves."""
        d = len(self.root().accumulated)
        out = np.zeros((n_entities, d))
        for leaf in self.leaves():
            for e in leaf.members:
                out[e] = leaf.accumulated
        return out


def partition(
    entities: np.ndarray,
    values: np.ndarray,
    predicate: Predicate,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Three-way split of entities by one feature test.

    values is the dense (entities x features) profile matrix with NaN for
    unknown. Returns (L, R, E) = (>= threshold, < threshold, unknown), each
    sorted ascending; together they partition the input set.
    """
    entities = np.asarray(entities, dtype=np.int64)
    vals = values[entities, predicate.feature_id]
    known = ~np.isnan(vals)
    left = entities[known & (vals >= predicate.threshold)]
    right = entities[known & (vals < predicate.threshold)]
    unknown = entities[~known]
    return np.sort(left), np.sort(right), np.sort(unknown)


def _node_problem(
    side: str,
    entities: np.ndarray,
    groups: tuple[np.ndarray, ...],
    counterpart: np.ndarray,
    offsets: np.ndarray,
    obs: ObservationSet,
    hp: Hyperparams,
) -> FitProblem:
    n_entities = obs.n_users if side == USER_SIDE else obs.n_items
    row_of = np.full(n_entities, -1, dtype=np.int64)
    for row, group in enumerate(groups):
        row_of[group] = row
    return compile_problem(side, counterpart, obs, row_of, offsets, hp.lam_for(side), hp.lambda_b)


def group_objective(
    side: str,
    entities: np.ndarray,
    vector: np.ndarray,
    counterpart: np.ndarray,
    obs: ObservationSet,
    hp: Hyperparams,
) -> float:
    """Objective of keeping all entities in one group at a fixed vector, zero residual."""
    entities = np.asarray(entities, dtype=np.int64)
    offsets = np.asarray(vector, dtype=float).reshape(1, -1)
    problem = _node_problem(side, entities, (entities,), counterpart, offsets, obs, hp)
    return problem.objective_at(np.zeros_like(offsets))


def evaluate_split(
    entities: np.ndarray,
    predicate: Predicate,
    counterpart_factors: np.ndarray,
    parent_accumulated: np.ndarray,
    O: ObservationSet,
    hp: Hyperparams,
    *,
    side: str,
    values: np.ndarray,
    use_parent_factors: bool = True,
    seed=None,
) -> SplitResult:
    """Partition by the predicate and jointly fit the three child vectors.

    Children are residual-parameterized on top of parent_accumulated (or free
    vectors when the parent-factor ablation is off). The returned objective is
    the best iterate of the joint fit, which includes the zero-residual start,
    so it never exceeds the unsplit objective.
    """
    entities = np.asarray(entities, dtype=np.int64)
    groups = partition(entities, values, predicate)
    parent = np.asarray(parent_accumulated, dtype=float)
    base = parent if use_parent_factors else np.zeros_like(parent)
    offsets = np.tile(base, (3, 1))
    problem = _node_problem(side, entities, groups, counterpart_factors, offsets, O, hp)
    residuals, best = fit_rows(problem, hp, seed=seed if seed is not None else hp.seed)
    return SplitResult(
        predicate=predicate,
        residuals=residuals,
        accumulated=offsets + residuals,
        objective=best,
        sizes=tuple(len(g) for g in groups),
        groups=groups,
    )


def candidate_predicates(
    spec: DiscretizationSpec, side: str
) -> list[Predicate]:
    out = []
    for fid in sorted(spec.for_side(side)):
        for t in spec.for_side(side)[fid]:
            out.append(Predicate(fid, float(t)))
    return out


def select_predicate(
    entities: np.ndarray,
    spec: DiscretizationSpec,
    counterpart_factors: np.ndarray,
    parent_accumulated: np.ndarray,
    O: ObservationSet,
    hp: Hyperparams,
    *,
    side: str,
    values: np.ndarray,
    use_parent_factors: bool = True,
    seed=None,
    threads: int = 1,
) -> SplitResult:
    """Exhaustively score every candidate predicate and return the argmin.

    Degenerate candidates (all entities in one child) are skipped; if none
    remain, NoValidSplit is raised. Ties break on (feature_id, threshold),
    which the ascending candidate order makes a strict < comparison. The
    candidate list is evaluated with a deterministic reduction, so thread
    count never changes the result.
    """
    entities = np.asarray(entities, dtype=np.int64)
    if len(entities) == 0:
        raise ValueError("entities must be nonempty")
    total = len(entities)
    viable = []
    for pred in candidate_predicates(spec, side):
        sizes = [len(g) for g in partition(entities, values, pred)]
        if max(sizes) < total:
            viable.append(pred)
    if not viable:
        raise NoValidSplit(f"no candidate separates the {total} entities")

    def score(pred: Predicate) -> SplitResult:
        return evaluate_split(
            entities,
            pred,
            counterpart_factors,
            parent_accumulated,
            O,
            hp,
            side=side,
            values=values,
            use_parent_factors=use_parent_factors,
            seed=seed,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, viable))
    else:
        results = [score(p) for p in viable]

    best = results[0]
    for res in results[1:]:
        if res.objective < best.objective:
            best = res
    return best


def grow(
    side: str,
    entities: np.ndarray,
    spec: DiscretizationSpec,
    counterpart_factors: np.ndarray,
    O: ObservationSet,
    hp: Hyperparams,
    h: int,
    *,
    values: np.ndarray,
    min_node_size: int = 1,
    use_parent_factors: bool = True,
    threads: int = 1,
) -> FactorTree:
    """Grow one side's tree to depth at most h.

    The root residual is fitted over the full entity set; recursion stops at
    the depth cap, when a node has min_node_size or fewer members, or when no
    candidate predicate separates the members. Every executed split is
    audited with its unsplit-versus-split objectives.
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    entities = np.asarray(entities, dtype=np.int64)
    d = hp.d
    tree = FactorTree(side=side, max_depth=h)

    zero = np.zeros(d)
    root_problem = _node_problem(side, entities, (entities,), counterpart_factors,
                                 zero.reshape(1, -1), O, hp)
    root_res, _ = fit_rows(root_problem, hp, seed=subseed(hp.seed, 11))
    root = TreeNode(0, 0, tuple(int(e) for e in entities),
                    root_res[0].copy(), root_res[0].copy())
    tree.nodes.append(root)

    stack = [0]
    while stack:
        nid = stack.pop()
        node = tree.nodes[nid]
        if node.depth + 1 >= h or len(node.members) <= min_node_size:
            continue
        member_arr = np.asarray(node.members, dtype=np.int64)
        try:
            result = select_predicate(
                member_arr,
                spec,
                counterpart_factors,
                node.accumulated,
                O,
                hp,
                side=side,
                values=values,
                use_parent_factors=use_parent_factors,
                seed=subseed(hp.seed, 12),
                threads=threads,
            )
        except NoValidSplit:
            continue
        unsplit = group_objective(side, member_arr, node.accumulated, counterpart_factors, O, hp)
        tree.audits.append(
            SplitAudit(nid, node.depth, result.predicate, unsplit, result.objective, result.sizes)
        )
        node.predicate = result.predicate
        child_ids = []
        for g in range(3):
            cid = len(tree.nodes)
            child_ids.append(cid)
            tree.nodes.append(
                TreeNode(
                    cid,
                    node.depth + 1,
                    tuple(int(e) for e in result.groups[g]),
                    result.residuals[g].copy(),
                    result.accumulated[g].copy(),
                    parent_id=nid,
                )
            )
        node.children = tuple(child_ids)
        for cid in reversed(child_ids):
            stack.append(cid)
    return tree


def route(tree: FactorTree, profile: FeatureProfile | dict) -> list[TreeNode]:
    """Follow the branch rules from the root; returns the full node path.

    Unknown feature values take the third branch at every level, so an empty
    profile lands in the all-unknown leaf.
    """
    entries = profile.entries if isinstance(profile, FeatureProfile) else profile
    node = tree.root()
    path = [node]
    while not node.is_leaf:
        value = entries.get(node.predicate.feature_id)
        if value is None:
            branch = 2
        elif value >= node.predicate.threshold:
            branch = 0
        else:
            branch = 1
        node = tree.nodes[node.children[branch]]
        path.append(node)
    return path


def fit_personal_residuals(
    tree: FactorTree,
    O: ObservationSet,
    counterpart_factors: np.ndarray,
    hp: Hyperparams,
) -> np.ndarray:
    """Per-entity residuals on top of each leaf's accumulated vector.

    Each entity is fitted alone, warm-started at zero over its own data;
    entities with nothing to fit keep a zero residual (factor = leaf vector).
    """
    n_entities = O.n_users if tree.side == USER_SIDE else O.n_items
    out = np.zeros((n_entities, hp.d))
    for leaf in tree.leaves():
        offsets = leaf.accumulated.reshape(1, -1)
        for entity in leaf.members:
            single = np.array([entity], dtype=np.int64)
            problem = _node_problem(tree.side, single, (single,), counterpart_factors,
                                    offsets, O, hp)
            if len(problem.obs_r) == 0 and len(problem.pair_a) == 0:
                continue
            res, _ = fit_rows(problem, hp, seed=subseed(hp.seed, 13, entity))
            out[entity] = res[0]
    return out
