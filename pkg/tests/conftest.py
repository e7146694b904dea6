import sys

import numpy as np
import pytest
from hypothesis import settings

from modpool.data import SyntheticDomainSpec, aggregate_classes, gen_synthetic_domain, split_classes
from modpool.pool import ADAPTER, BackboneSpec, ModelPool
from modpool.train import TrainConfig, train_base, train_modulator

settings.register_profile("modpool", deadline=None, max_examples=50)
settings.load_profile("modpool")

SMALL_SPECS = [
    SyntheticDomainSpec("masked", 8, 12, 20, 0.6, "axis_mask", (0, 1, 2, 3), seed=1, split=(6, 3, 3)),
    SyntheticDomainSpec("warped", 8, 12, 20, 0.6, "frequency", (0.5,), seed=2, split=(6, 3, 3)),
]


@pytest.fixture(scope="session")
def small_domains():
    datasets = [gen_synthetic_domain(s) for s in SMALL_SPECS]
    splits = [split_classes(s.class_count, s.seed, s.split) for s in SMALL_SPECS]
    return datasets, splits


@pytest.fixture(scope="session")
def small_pool(small_domains):
    """A briefly trained adapter pool over the two small domains."""
    datasets, splits = small_domains
    spec = BackboneSpec(8, (16, 8), normalize=False)
    cfg = TrainConfig(steps=150, eval_every=50, batch_size=32, seed=3, way=3, shot=2, query=3, val_episodes=0)
    theta = train_base(aggregate_classes(datasets, splits), spec, cfg)
    pool = ModelPool.create(spec, theta, ADAPTER, [d.name for d in datasets])
    for slot, (ds, sp) in enumerate(zip(datasets, splits), start=1):
        train_modulator(ds, sp, pool, slot, TrainConfig(steps=60, eval_every=30, seed=slot, way=3, shot=2,
                                                        query=3, val_episodes=0))
    return pool


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, (passed, detail) in module.RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}")
