"""Training orchestration and model persistence.

Bootstraps item factors with flat matrix factorization, then alternates:
grow the user tree against fixed item factors, harvest per-user factors
from its leaves, grow the item tree against those, harvest item factors,
and repeat until the combined objective stabilizes. The trained model
serializes to a single JSON document with base64 float arrays and a
sha256 checksum.
"""
from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .factorization import (
    Hyperparams,
    ObservationSet,
    fit_factors,
    objective,
    subseed,
    uniform_init,
)
from .ingest import (
    Dataset,
    DataError,
    DiscretizationSpec,
    ITEM_SIDE,
    USER_SIDE,
    build_item_profiles,
    build_user_profiles,
    normalize_profiles,
    profile_matrix,
)
from .tree import FactorTree, Predicate, SplitAudit, TreeNode, fit_personal_residuals, grow

MODEL_VERSION = 2
COMPATIBLE_VERSIONS = (1, 2)


class ModelIOError(Exception):
    """Base class for model persistence failures."""


class ModelChecksumError(ModelIOError):
    """Payload integrity check failed (corrupt, truncated, or tampered file)."""


class ModelVersionError(ModelIOError):
    """Model file written by an unsupported format version."""


class ModelSchemaError(ModelIOError):
    """Model file is well-formed JSON but violates the expected schema."""


@dataclass
class TrainConfig:
    """Everything a training run needs besides the data itself."""

    h: int = 6
    max_alternations: int = 5
    alt_tol: float = 1e-3
    use_parent_factors: bool = True
    use_personal_residuals: bool = True
    hp: Hyperparams = field(default_factory=Hyperparams)
    normalize: str = "per-entity-total"
    bins: int = 8
    min_node_size: int = 1
    mf_rounds: int = 8
    threads: int = 1

    def __post_init__(self) -> None:
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if self.max_alternations < 1:
            raise ValueError("max_alternations must be >= 1")
        if not self.alt_tol > 0:
            raise ValueError("alt_tol must be > 0")
        if isinstance(self.hp, dict):
            self.hp = Hyperparams(**self.hp)


@dataclass
class ConvergenceReport:
    objectives: list[float] = field(default_factory=list)
    stop_reason: str = ""
    phase_seconds: list[dict] = field(default_factory=list)
    mf_objective: float = 0.0

    def to_dict(self) -> dict:
        return {
            "objectives": self.objectives,
            "stop_reason": self.stop_reason,
            "phase_seconds": self.phase_seconds,
            "mf_objective": self.mf_objective,
        }


@dataclass
class FacTModel:
    """A trained pair of factor trees plus everything needed to serve them."""

    user_tree: FactorTree
    item_tree: FactorTree
    hp: Hyperparams
    feature_vocab: tuple[str, ...]
    spec: DiscretizationSpec
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    rating_scale: tuple[float, float] = (1.0, 5.0)
    personal_user_residuals: np.ndarray | None = None
    personal_item_residuals: np.ndarray | None = None
    training_report: dict = field(default_factory=dict)
    version: int = MODEL_VERSION

    @property
    def d(self) -> int:
        return self.hp.d

    def user_factor(self, user: int) -> np.ndarray:
        vec = self.user_tree.leaf_for(user).accumulated.copy()
        if self.personal_user_residuals is not None:
            vec += self.personal_user_residuals[user]
        return vec

    def user_factors(self) -> np.ndarray:
        out = self.user_tree.leaf_factors(len(self.user_ids))
        if self.personal_user_residuals is not None:
            out = out + self.personal_user_residuals
        return out

    def item_factors(self) -> np.ndarray:
        cached = self.__dict__.get("_item_factor_cache")
        if cached is None:
            cached = self.item_tree.leaf_factors(len(self.item_ids))
            if self.personal_item_residuals is not None:
                cached = cached + self.personal_item_residuals
            self.__dict__["_item_factor_cache"] = cached
        return cached


def prepare_profiles(ds: Dataset, cfg: TrainConfig) -> tuple[Dataset, DiscretizationSpec]:
    """Attach normalized profiles to the dataset and build the threshold lists."""
    user_raw = build_user_profiles(ds)
    item_raw = build_item_profiles(ds)
    ds.user_profiles = normalize_profiles(user_raw, cfg.normalize)
    ds.item_profiles = normalize_profiles(item_raw, cfg.normalize)
    spec = DiscretizationSpec.build(ds.user_profiles, ds.item_profiles, cfg.bins, cfg.normalize)
    return ds, spec


def fit_flat_mf(
    obs: ObservationSet,
    hp: Hyperparams,
    rounds: int = 8,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Alternating free-factor fits (no trees); the plain-MF engine."""
    U = uniform_init(obs.n_users, hp.d, subseed(hp.seed, 1))
    V = uniform_init(obs.n_items, hp.d, subseed(hp.seed, 2))
    triples = obs.observations()
    history = [objective(U, V, triples, obs.pairs, hp)]
    for r in range(rounds):
        U = fit_factors(USER_SIDE, V, obs, hp, init=U, seed=subseed(hp.seed, 3, r))
        V = fit_factors(ITEM_SIDE, U, obs, hp, init=V, seed=subseed(hp.seed, 4, r))
        history.append(objective(U, V, triples, obs.pairs, hp))
        prev, cur = history[-2], history[-1]
        if abs(prev - cur) <= hp.tol * max(abs(prev), 1e-12):
            break
    return U, V, history


def init_item_factors(ds: Dataset, hp: Hyperparams, rounds: int = 8) -> np.ndarray:
    """Initial item factors from plain matrix factorization; seeded."""
    if not ds.reviews:
        raise DataError("cannot initialize factors on an empty dataset")
    obs = ObservationSet.from_dataset(ds, hp.negatives_per_positive, hp.seed)
    _U, V, _hist = fit_flat_mf(obs, hp, rounds)
    return V


def alternate(ds: Dataset, cfg: TrainConfig) -> FacTModel:
    """Full training loop; returns the trained model with its convergence report."""
    if not ds.reviews:
        raise DataError("cannot train on an empty dataset")
    hp = cfg.hp
    ds, spec = prepare_profiles(ds, cfg)
    user_values = profile_matrix(ds.user_profiles, ds.n_features)
    item_values = profile_matrix(ds.item_profiles, ds.n_features)
    obs = ObservationSet.from_dataset(ds, hp.negatives_per_positive, hp.seed)
    triples = obs.observations()
    users = np.arange(ds.n_users, dtype=np.int64)
    items = np.arange(ds.n_items, dtype=np.int64)

    report = ConvergenceReport()
    audits: list[dict] = []
    t0 = time.perf_counter()
    U, V, mf_history = fit_flat_mf(obs, hp, cfg.mf_rounds)
    report.mf_objective = mf_history[-1]
    report.phase_seconds.append({"phase": "mf-init", "seconds": time.perf_counter() - t0})

    prev_obj = report.mf_objective
    user_tree = item_tree = None
    personal_u = personal_v = None
    stop_reason = "max_alternations"
    for t in range(1, cfg.max_alternations + 1):
        t1 = time.perf_counter()
        user_tree = grow(
            USER_SIDE, users, spec, V, obs, hp, cfg.h,
            values=user_values,
            min_node_size=cfg.min_node_size,
            use_parent_factors=cfg.use_parent_factors,
            threads=cfg.threads,
        )
        U = user_tree.leaf_factors(ds.n_users)
        if cfg.use_personal_residuals:
            personal_u = fit_personal_residuals(user_tree, obs, V, hp)
            U = U + personal_u
        t2 = time.perf_counter()
        item_tree = grow(
            ITEM_SIDE, items, spec, U, obs, hp, cfg.h,
            values=item_values,
            min_node_size=cfg.min_node_size,
            use_parent_factors=cfg.use_parent_factors,
            threads=cfg.threads,
        )
        V = item_tree.leaf_factors(ds.n_items)
        if cfg.use_personal_residuals:
            personal_v = fit_personal_residuals(item_tree, obs, U, hp)
            V = V + personal_v
        t3 = time.perf_counter()

        obj = objective(U, V, triples, obs.pairs, hp)
        report.objectives.append(obj)
        report.phase_seconds.append(
            {"alternation": t, "user_tree": t2 - t1, "item_tree": t3 - t2}
        )
        audits.append(
            {
                "alternation": t,
                "user": [_audit_dict(a) for a in user_tree.audits],
                "item": [_audit_dict(a) for a in item_tree.audits],
            }
        )
        rel = abs(obj - prev_obj) / max(abs(prev_obj), 1e-12)
        prev_obj = obj
        if rel < cfg.alt_tol:
            stop_reason = "tolerance"
            break
    report.stop_reason = stop_reason

    return FacTModel(
        user_tree=user_tree,
        item_tree=item_tree,
        hp=hp,
        feature_vocab=ds.feature_names,
        spec=spec,
        user_ids=ds.user_ids,
        item_ids=ds.item_ids,
        rating_scale=ds.rating_scale,
        personal_user_residuals=personal_u,
        personal_item_residuals=personal_v,
        training_report={"convergence": report.to_dict(), "splits": audits},
    )


def _audit_dict(a: SplitAudit) -> dict:
    return {
        "node_id": a.node_id,
        "depth": a.depth,
        "feature_id": a.predicate.feature_id,
        "threshold": a.predicate.threshold,
        "unsplit_objective": a.unsplit_objective,
        "split_objective": a.split_objective,
        "sizes": list(a.sizes),
    }


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(text: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def _tree_payload(tree: FactorTree) -> dict:
    return {
        "side": tree.side,
        "max_depth": tree.max_depth,
        "root_id": tree.root_id,
        "nodes": [
            {
                "id": n.node_id,
                "depth": n.depth,
                "parent": n.parent_id,
                "members": list(n.members),
                "residual": _b64(n.residual),
                "accumulated": _b64(n.accumulated),
                "predicate": (
                    {"feature_id": n.predicate.feature_id, "threshold": n.predicate.threshold}
                    if n.predicate
                    else None
                ),
                "children": list(n.children) if n.children else None,
            }
            for n in tree.nodes
        ],
    }


def _tree_from_payload(payload: dict, d: int) -> FactorTree:
    tree = FactorTree(side=payload["side"], max_depth=payload["max_depth"],
                      root_id=payload["root_id"])
    for raw in payload["nodes"]:
        pred = raw["predicate"]
        tree.nodes.append(
            TreeNode(
                node_id=raw["id"],
                depth=raw["depth"],
                members=tuple(raw["members"]),
                residual=_unb64(raw["residual"], (d,)),
                accumulated=_unb64(raw["accumulated"], (d,)),
                predicate=Predicate(pred["feature_id"], pred["threshold"]) if pred else None,
                children=tuple(raw["children"]) if raw["children"] else None,
                parent_id=raw["parent"],
            )
        )
    return tree


def _hp_payload(hp: Hyperparams) -> dict:
    return {
        "d": hp.d,
        "lambda_b": hp.lambda_b,
        "lambda_u": hp.lambda_u,
        "lambda_v": hp.lambda_v,
        "lr": hp.lr,
        "epochs": hp.epochs,
        "n_bpr": hp.n_bpr,
        "negatives_per_positive": hp.negatives_per_positive,
        "seed": hp.seed,
        "tol": hp.tol,
    }


def _spec_payload(spec: DiscretizationSpec) -> dict:
    return {
        "mode": spec.mode,
        "bins": spec.bins,
        "user_thresholds": {str(k): list(v) for k, v in sorted(spec.user_thresholds.items())},
        "item_thresholds": {str(k): list(v) for k, v in sorted(spec.item_thresholds.items())},
    }


def _spec_from_payload(payload: dict) -> DiscretizationSpec:
    return DiscretizationSpec(
        user_thresholds={int(k): tuple(v) for k, v in payload["user_thresholds"].items()},
        item_thresholds={int(k): tuple(v) for k, v in payload["item_thresholds"].items()},
        mode=payload["mode"],
        bins=payload["bins"],
    )


def _checksum(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _sanitized_report(report: dict) -> dict:
    """Persisted copy of the training report without wall-clock timings.

    Dropping phase timings keeps same-seed training runs byte-identical on
    disk; everything else in the report is deterministic.
    """
    out = {k: v for k, v in report.items() if k != "phase_seconds"}
    conv = out.get("convergence")
    if isinstance(conv, dict):
        out["convergence"] = {k: v for k, v in conv.items() if k != "phase_seconds"}
    return out


def model_payload(model: FacTModel) -> dict:
    payload = {
        "format": "factree-model",
        "version": MODEL_VERSION,
        "hp": _hp_payload(model.hp),
        "vocab": list(model.feature_vocab),
        "user_ids": list(model.user_ids),
        "item_ids": list(model.item_ids),
        "rating_scale": list(model.rating_scale),
        "spec": _spec_payload(model.spec),
        "user_tree": _tree_payload(model.user_tree),
        "item_tree": _tree_payload(model.item_tree),
        "training_report": _sanitized_report(model.training_report),
    }
    if model.personal_user_residuals is not None:
        payload["personal_user_residuals"] = _b64(model.personal_user_residuals)
    if model.personal_item_residuals is not None:
        payload["personal_item_residuals"] = _b64(model.personal_item_residuals)
    payload["checksum"] = _checksum({k: v for k, v in payload.items() if k != "checksum"})
    return payload


def save_model(model: FacTModel, path: str | Path) -> None:
    """Write the model as one JSON document; factor bytes survive exactly."""
    Path(path).write_text(
        json.dumps(model_payload(model), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def load_model(path: str | Path) -> FacTModel:
    """Load and verify a model file.

    Unparseable files fail the integrity check (checksum error); parseable
    files with a wrong digest likewise; unsupported versions and schema
    violations raise their own error types.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelChecksumError(f"model file corrupt or truncated: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ModelChecksumError("model file corrupt: top-level value is not an object")
    stated = payload.get("checksum")
    if stated is None:
        raise ModelChecksumError("model file has no checksum")
    actual = _checksum({k: v for k, v in payload.items() if k != "checksum"})
    if stated != actual:
        raise ModelChecksumError("model checksum mismatch")

    version = payload.get("version")
    if version not in COMPATIBLE_VERSIONS:
        raise ModelVersionError(
            f"model version {version!r} unsupported (this build reads {COMPATIBLE_VERSIONS})"
        )
    migration_note = None
    if version == 1:
        # Version 1 predates the stored rating scale; assume the 1-5 default.
        payload = dict(payload)
        payload.setdefault("rating_scale", [1.0, 5.0])
        migration_note = "migrated v1 payload: rating_scale defaulted to [1.0, 5.0]"

    try:
        hp = Hyperparams(**payload["hp"])
        report = payload.get("training_report", {})
        if migration_note:
            report = dict(report)
            report["migration"] = migration_note
        model = FacTModel(
            user_tree=_tree_from_payload(payload["user_tree"], hp.d),
            item_tree=_tree_from_payload(payload["item_tree"], hp.d),
            hp=hp,
            feature_vocab=tuple(payload["vocab"]),
            spec=_spec_from_payload(payload["spec"]),
            user_ids=tuple(payload["user_ids"]),
            item_ids=tuple(payload["item_ids"]),
            rating_scale=tuple(payload["rating_scale"]),
            training_report=report,
            version=MODEL_VERSION,
        )
        n_users, n_items = len(model.user_ids), len(model.item_ids)
        if "personal_user_residuals" in payload:
            model.personal_user_residuals = _unb64(
                payload["personal_user_residuals"], (n_users, hp.d)
            )
        if "personal_item_residuals" in payload:
            model.personal_item_residuals = _unb64(
                payload["personal_item_residuals"], (n_items, hp.d)
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelSchemaError(f"model schema violation: {exc}") from exc
    return model
