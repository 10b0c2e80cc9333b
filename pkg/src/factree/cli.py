"""Command-line entry point.

Verbs: ingest, synth, train, evaluate, sweep, recommend, explain,
interview, serve. Exit code 0 on success, 1 on validation errors
(including bad flags), 2 on runtime failures. Data goes to stdout,
diagnostics to stderr. FACT_LOG selects the log level.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .evaluation import (
    ALGOS,
    SWEEP_AXES,
    SyntheticSpec,
    cross_validate,
    ndcg_at_k,
    sweep,
    synth_generate,
)
from .ingest import DataError, filter_dataset, parse_dataset, write_jsonl
from .recommend import (
    ANSWERS,
    RecommendError,
    explain,
    interview_answer,
    interview_recommend,
    interview_start,
    recommend_topk,
)
from .train import TrainConfig, alternate, load_model, save_model

log = logging.getLogger("factree")

LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class CliUsageError(Exception):
    """Bad flags or arguments; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise CliUsageError(f"{message}\n{self.format_usage()}")


def _setup_logging() -> None:
    level = os.environ.get("FACT_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        level = "warn"
    logging.basicConfig(
        stream=sys.stderr,
        level=LOG_LEVELS[level],
        format="%(levelname)s %(name)s: %(message)s",
    )


def load_train_config(path: str | Path | None) -> TrainConfig:
    """TrainConfig from a TOML or JSON file mapping fields one to one.

    The nested [hp] table fills Hyperparams. Unknown keys are rejected.
    """
    if path is None:
        return TrainConfig()
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(text.decode("utf-8"))
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("config file must contain a table/object")
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**data)


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    hp = cfg.hp
    if getattr(args, "seed", None) is not None:
        hp = replace(hp, seed=args.seed)
    if getattr(args, "dim", None) is not None:
        hp = replace(hp, d=args.dim)
    cfg = replace(cfg, hp=hp)
    if getattr(args, "depth", None) is not None:
        cfg = replace(cfg, h=args.depth)
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise CliUsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise CliUsageError("--k values must be positive integers")
    return ks


def _effective_config_path(model_path: str | Path) -> Path:
    return Path(model_path).with_suffix(".config.json")


def _dump_effective_config(cfg: TrainConfig, model_path: str | Path) -> Path:
    payload = asdict(cfg)
    out = _effective_config_path(model_path)
    out.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def cmd_ingest(args) -> int:
    ds = parse_dataset(args.data, vocab_path=args.vocab)
    if args.min_feature_freq or args.min_user_reviews or args.min_item_reviews:
        ds = filter_dataset(
            ds,
            min_feature_freq=args.min_feature_freq,
            min_reviews_per_user=args.min_user_reviews,
            min_reviews_per_item=args.min_item_reviews,
        )
    write_jsonl(ds, args.out)
    stats = {
        "users": ds.n_users,
        "items": ds.n_items,
        "features": ds.n_features,
        "reviews": len(ds.reviews),
        "out": str(args.out),
    }
    if args.json:
        print(json.dumps(stats, sort_keys=True))
    else:
        print(
            f"wrote {stats['reviews']} reviews ({stats['users']} users, "
            f"{stats['items']} items, {stats['features']} features) to {args.out}"
        )
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_users=args.users,
        n_items=args.items,
        reviews_per_user=args.reviews_per_user,
        noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    ds = synth_generate(spec)
    write_jsonl(ds, args.out)
    log.info("synthetic dataset: %d reviews to %s", len(ds.reviews), args.out)
    if args.json:
        print(json.dumps({"reviews": len(ds.reviews), "out": str(args.out)}, sort_keys=True))
    else:
        print(f"wrote {len(ds.reviews)} synthetic reviews to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_train_config(args.config), args)
    ds = parse_dataset(args.data)
    model = alternate(ds, cfg)
    save_model(model, args.out)
    cfg_path = _dump_effective_config(cfg, args.out)
    report = model.training_report.get("convergence", {})
    log.info("stop reason: %s", report.get("stop_reason"))
    if args.json:
        print(
            json.dumps(
                {
                    "model": str(args.out),
                    "config": str(cfg_path),
                    "objectives": report.get("objectives", []),
                    "stop_reason": report.get("stop_reason"),
                },
                sort_keys=True,
            )
        )
    else:
        print(f"model written to {args.out} (config: {cfg_path})")
    return 0


def _score_model_csv(model, ds, ks, json_mode: bool) -> int:
    """Rank with a trained model; the data file is the ground truth."""
    index = {u: i for i, u in enumerate(model.user_ids)}
    item_index = {it: j for j, it in enumerate(model.item_ids)}
    relevant: dict[str, dict[int, float]] = {}
    for r in ds.reviews:
        uid = ds.user_ids[r.user_id]
        item = ds.item_ids[r.item_id]
        if uid in index and item in item_index:
            relevant.setdefault(uid, {})[item_index[item]] = r.rating
    per_user: dict[str, dict[int, float]] = {}
    for uid in sorted(relevant):
        ranked = [s.index for s in recommend_topk(model, uid, k=max(ks))]
        per_user[uid] = {k: ndcg_at_k(ranked, relevant[uid], k) for k in ks}
    means = {
        k: sum(v[k] for v in per_user.values()) / len(per_user) if per_user else 0.0
        for k in ks
    }
    if json_mode:
        print(json.dumps({"per_user": per_user, "mean": means}, sort_keys=True))
        return 0
    writer = csv.writer(sys.stdout)
    writer.writerow(["user"] + [f"ndcg@{k}" for k in ks])
    for uid, row in per_user.items():
        writer.writerow([uid] + [f"{row[k]:.6f}" for k in ks])
    writer.writerow(["MEAN"] + [f"{means[k]:.6f}" for k in ks])
    return 0


def cmd_evaluate(args) -> int:
    ks = _parse_ks(args.k)
    ds = parse_dataset(args.data)
    if args.folds is None:
        if args.model is None:
            raise CliUsageError("evaluate needs --model (or --folds for cross-validation)")
        model = load_model(args.model)
        return _score_model_csv(model, ds, ks, args.json)
    cfg = _apply_overrides(load_train_config(args.config), args)
    result = cross_validate(ds, cfg, folds=args.folds, ks=tuple(ks), algo=args.algo,
                            gain_mode=args.gain_mode)
    if args.json:
        print(json.dumps(result, sort_keys=True))
        return 0
    writer = csv.writer(sys.stdout)
    writer.writerow(["fold"] + [f"ndcg@{k}" for k in ks])
    for f, row in enumerate(result["per_fold"]):
        writer.writerow([f] + [f"{row[k]:.6f}" for k in ks])
    writer.writerow(["MEAN"] + [f"{result['mean'][k]:.6f}" for k in ks])
    writer.writerow(["STD"] + [f"{result['std'][k]:.6f}" for k in ks])
    return 0


def _parse_axis_values(axis: str, text: str) -> list:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise CliUsageError("--values must list at least one value")
    if axis == "parent_factors":
        mapping = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}
        try:
            return [mapping[p.lower()] for p in parts]
        except KeyError:
            raise CliUsageError("parent_factors values must be on/off") from None
    if axis == "phi":
        return [float(p) for p in parts]
    return [int(p) for p in parts]


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_train_config(args.config), args)
    ds = parse_dataset(args.data)
    values = _parse_axis_values(args.axis, args.values)
    ks = tuple(_parse_ks(args.k)) if args.k else (10, 50)
    summary = sweep(ds, cfg, args.axis, values, out_dir=args.out, folds=args.folds, ks=ks)
    if args.json:
        print(json.dumps(summary, sort_keys=True, default=str))
    else:
        for cell in summary["cells"]:
            if cell["error"]:
                print(f"{args.axis}={cell['value']}: ERROR {cell['error']}")
            else:
                shown = ", ".join(f"ndcg@{k}={cell['ndcg_mean'][k]:.4f}" for k in ks)
                print(f"{args.axis}={cell['value']}: objective={cell['objective']:.4f}, {shown}")
    return 0


def cmd_recommend(args) -> int:
    model = load_model(args.model)
    ds = parse_dataset(args.data) if args.data else None
    items = recommend_topk(
        model, args.user, k=args.k, exclude_seen=args.exclude_seen, dataset=ds
    )
    if args.json:
        print(
            json.dumps(
                [{"item": s.item_id, "score": s.score} for s in items],
                sort_keys=True,
            )
        )
    else:
        for rank, s in enumerate(items, start=1):
            print(f"{rank}\t{s.item_id}\t{s.score:.4f}")
    return 0


def cmd_explain(args) -> int:
    model = load_model(args.model)
    expl = explain(model, args.user, args.item)
    if args.json:
        print(
            json.dumps(
                {
                    "user": args.user,
                    "item": args.item,
                    "text": expl.rendered,
                    "features": expl.feature_names(),
                },
                sort_keys=True,
            )
        )
    else:
        print(expl.rendered)
    return 0


def cmd_interview(args) -> int:
    model = load_model(args.model)
    session = interview_start(model)
    stdin = sys.stdin
    while not session.finished:
        q = session.question()
        if args.json:
            print(json.dumps({"question": q, "answered": len(session.log)}, sort_keys=True))
        else:
            print(f"{q['prompt']} [{'/'.join(ANSWERS)}]")
        sys.stdout.flush()
        line = stdin.readline()
        if not line:
            print("interview aborted (end of input)", file=sys.stderr)
            return 2
        answer = line.strip().lower()
        shorthand = {"l": "like", "d": "dislike", "u": "unknown", "?": "unknown"}
        answer = shorthand.get(answer, answer)
        try:
            interview_answer(session, answer)
        except ValueError as exc:
            print(f"{exc}", file=sys.stderr)
            continue
    results = interview_recommend(session, args.k)
    if args.json:
        print(
            json.dumps(
                {
                    "answers": [list(step) for step in session.log],
                    "items": [
                        {"item": s.item_id, "score": s.score, "explanation": e.rendered}
                        for s, e in results
                    ],
                },
                sort_keys=True,
            )
        )
    else:
        for rank, (s, e) in enumerate(results, start=1):
            print(f"{rank}\t{s.item_id}\t{s.score:.4f}\t{e.rendered}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    host, sep, port = args.bind.rpartition(":")
    if not sep or not port.isdigit():
        raise CliUsageError(f"--bind expects host:port, got {args.bind!r}")
    serve(
        args.model,
        host=host or "127.0.0.1",
        port=int(port),
        data_path=args.data,
        ui_dir=args.ui,
    )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="factree", description="Factorization-tree recommender toolkit")
    sub = parser.add_subparsers(dest="verb", metavar="verb")

    p = sub.add_parser("ingest", help="parse, validate, and filter a review file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab")
    p.add_argument("--min-feature-freq", type=int, default=0)
    p.add_argument("--min-user-reviews", type=int, default=0)
    p.add_argument("--min-item-reviews", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("synth", help="generate a planted-cluster synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--reviews-per-user", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model from a review file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a model, or cross-validate with --folds")
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--config")
    p.add_argument("--k", default="10,20,50,100")
    p.add_argument("--folds", type=int)
    p.add_argument("--algo", choices=ALGOS, default="fact")
    p.add_argument("--gain-mode", choices=("rating", "binary"), default="rating")
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="vary one training axis, hold the rest")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--k")
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("recommend", help="top-k items for a known user")
    p.add_argument("--model", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--data")
    p.add_argument("--exclude-seen", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_recommend)

    p = sub.add_parser("explain", help="explain a (user, item) recommendation")
    p.add_argument("--model", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("interview", help="terminal cold-start interview loop")
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_interview)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--model", required=True)
    p.add_argument("--bind", default="127.0.0.1:8410")
    p.add_argument("--data")
    p.add_argument("--ui")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            raise CliUsageError(parser.format_usage())
        return args.fn(args)
    except CliUsageError as exc:
        print(str(exc).strip(), file=sys.stderr)
        return 1
    except (ValueError, DataError, RecommendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
