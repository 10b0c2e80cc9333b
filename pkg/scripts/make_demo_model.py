"""Build a small demo dataset and trained model for serving.

Writes a reviews file, a trained model, and its effective config next to
each other so `factree serve` (or the interview UI) has something to load:

    python3 scripts/make_demo_model.py --dir demo
    factree serve --model demo/model.json --data demo/reviews.jsonl
"""

import argparse
import json
import sys
from pathlib import Path

from factree.evaluation import SyntheticSpec, synth_generate
from factree.factorization import Hyperparams
from factree.ingest import write_jsonl
from factree.recommend import interview_start
from factree.train import TrainConfig, alternate, save_model


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dir", default="demo", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--depth", type=int, default=3)
    args = ap.parse_args(argv)

    out = Path(args.dir)
    out.mkdir(parents=True, exist_ok=True)

    spec = SyntheticSpec(
        n_users=60, n_items=30, reviews_per_user=10,
        noise=0.25, seed=args.seed, item_quality=0.8,
    )
    ds = synth_generate(spec)
    write_jsonl(ds, out / "reviews.jsonl")

    hp = Hyperparams(d=4, epochs=20, n_bpr=2000, seed=args.seed, lr=0.1, lambda_b=0.1)
    cfg = TrainConfig(h=args.depth, max_alternations=2, hp=hp, bins=6)
    model = alternate(ds, cfg)
    save_model(model, out / "model.json")

    session = interview_start(model)
    first = session.question()
    summary = {
        "users": len(ds.user_ids),
        "items": len(ds.item_ids),
        "reviews": len(ds.reviews),
        "stop_reason": model.training_report["convergence"]["stop_reason"],
        "first_question": None if first is None else first["prompt"],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    print(f"wrote {out / 'reviews.jsonl'}, {out / 'model.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
