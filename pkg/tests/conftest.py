"""Shared fixtures: tiny hand datasets and a small trained model."""
from __future__ import annotations

import pytest

from factree.evaluation import SyntheticSpec, synth_generate
from factree.factorization import Hyperparams
from factree.ingest import dataset_from_records
from factree.train import TrainConfig, alternate


def record(user, item, rating, ts, mentions=()):
    return {
        "user": user,
        "item": item,
        "rating": rating,
        "ts": ts,
        "mentions": [
            {"feature": f, "polarity": p} for f, p in mentions
        ],
    }


@pytest.fixture
def small_ds():
    """Four users, three items, three features with known mention counts."""
    records = [
        record("u1", "i1", 5.0, 10, [("screen", 1), ("screen", 1), ("battery", -1)]),
        record("u1", "i2", 3.0, 11, [("screen", 1)]),
        record("u2", "i1", 2.0, 12, [("battery", -1), ("battery", 1)]),
        record("u2", "i3", 4.0, 13, [("price", 1)]),
        record("u3", "i2", 1.0, 14, [("price", -1), ("battery", -1)]),
        record("u4", "i3", 5.0, 15, []),
    ]
    return dataset_from_records(records)


@pytest.fixture(scope="session")
def planted_ds():
    spec = SyntheticSpec(
        n_users=30,
        n_items=16,
        reviews_per_user=6,
        noise=0.2,
        seed=11,
        item_quality=0.8,
    )
    return synth_generate(spec)


@pytest.fixture(scope="session")
def quick_cfg():
    return TrainConfig(
        h=3,
        max_alternations=1,
        hp=Hyperparams(d=3, epochs=12, n_bpr=800, seed=5, lr=0.1),
        bins=4,
    )


@pytest.fixture(scope="session")
def trained_model(planted_ds, quick_cfg):
    return alternate(planted_ds, quick_cfg)
