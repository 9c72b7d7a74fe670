import functools
import os

import numpy as np
import pytest

from lps.netcore import NetworkSpec
from lps.partition import verify_invariants
from lps.tasks import make_blob_tasks
from lps.trainer import Engine, PhasePlan, evaluate, train_task

MNIST_DIR = os.environ.get("LPS_MNIST_DIR", "/root/data/mnist")

# the toy suite used across trainer / acceptance tests
TOY_DIMS = (32, 64, 64, 4)


def toy_tasks(similarity=1.0, seed=0, n=3):
    return make_blob_tasks(n, 32, 4, 2000, seed=seed, similarity=similarity, separation=6.0,
                           test_samples=500)


def toy_plan(**overrides):
    kw = dict(warmup_epochs=5, admm_epochs=15, final_epochs=5, alpha_fraction=0.2,
              beta_fraction=0.9, batch_size=16)
    kw.update(overrides)
    return PhasePlan(**kw)


class ToyRun:
    """A 3-task toy run that records evaluations before and after every task."""

    def __init__(self, similarity=1.0, plan=None, seed=0):
        self.tasks = toy_tasks(similarity, seed)
        self.plan = plan or toy_plan()
        self.engine = Engine.create(NetworkSpec(TOY_DIMS), seed=seed)
        self.digests = {}      # (after_task, task) -> digest
        self.accuracy = {}     # (after_task, task) -> accuracy
        self.outcomes = []
        self.invariants = []   # verify_invariants output after each commit
        for ds in self.tasks:
            out = train_task(self.engine, ds, self.plan, last_task=ds.task_id == len(self.tasks))
            self.outcomes.append(out)
            self.invariants.append(verify_invariants(self.engine.ledger))
            for i in range(1, ds.task_id + 1):
                t = self.tasks[i - 1]
                rec = evaluate(self.engine, i, t.x_test, t.y_test)
                self.digests[(ds.task_id, i)] = rec.logits_digest
                self.accuracy[(ds.task_id, i)] = rec.top1_accuracy

    @property
    def average(self):
        n = len(self.tasks)
        return float(np.mean([self.accuracy[(n, i)] for i in range(1, n + 1)]))


@functools.lru_cache(maxsize=None)
def cached_toy_run(similarity=1.0, seed=0, **plan_overrides):
    """Shared across test modules; keyword arguments must be hashable."""
    return ToyRun(similarity, toy_plan(**plan_overrides), seed)


@pytest.fixture(scope="session")
def toy_run():
    return cached_toy_run()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
