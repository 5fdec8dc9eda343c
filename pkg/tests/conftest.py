import time
from dataclasses import dataclass

import pytest

from imlspike import cli
from imlspike.data import gen_synthetic
from imlspike.model import Model
from imlspike.training import train

ACCEPTANCE_LINES: list[str] = []


@dataclass
class ToyRun:
    model: Model
    history: list
    seconds: float
    train_set: list
    test_set: list


def toy_training(cfg=None, epochs=None, **overrides):
    """Train the default toy configuration; overrides use the CLI's dotted keys."""
    cfg = cli.resolve_config(overrides=overrides) if cfg is None else cfg
    train_set = gen_synthetic(cfg["data.train_per_class"], cfg["data.seed"], cfg["model.num_classes"],
                              cfg["model.C_in"])
    test_set = gen_synthetic(cfg["data.test_per_class"], cfg["data.test_seed"], cfg["model.num_classes"],
                             cfg["model.C_in"])
    model = Model.init(cli.model_config(cfg), seed=cfg["training.seed"])
    start = time.perf_counter()
    epochs = cfg["training.epochs"] if epochs is None else epochs
    model, history = train(model, train_set, test_set, epochs,
                           cfg["training.seed"], cfg["training.lr"], cfg["training.batch_size"],
                           cfg["training.grad_clip"] or None, schedule=cfg["training.lr_schedule"])
    return ToyRun(model, history, time.perf_counter() - start, train_set, test_set)


@pytest.fixture(scope="session")
def toy_run():
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        return toy_training()


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[0].split("[")[1])):
            terminalreporter.write_line(line)
