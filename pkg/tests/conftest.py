"""Shared fixtures: the trained synthetic and traffic models are fitted once
per session (no cache across runs, so the timing checks stay honest)."""

import sys
import time

import numpy as np
import pytest

from scg import synthetic as syn
from scg import traffic as tr
from scg import tvae

SYN_N = 1000
SYN_CFG = tvae.TrainConfig(epochs=300, seed=0)
TRAFFIC_N = 1000
TRAFFIC_CFG = tvae.TrainConfig(epochs=200, lr_final=1e-5, seed=0)


class Trained:
    def __init__(self, model, dataset, log, seconds, cfg):
        self.model, self.dataset, self.log, self.seconds, self.cfg = model, dataset, log, seconds, cfg


def _fit(schema, dataset, cfg):
    model = tvae.TreeVAE(schema, seed=cfg.seed)
    t0 = time.perf_counter()
    log = tvae.train(dataset, model, cfg)
    return Trained(model, dataset, log, time.perf_counter() - t0, cfg)


@pytest.fixture(scope="session")
def syn_trained():
    trees, _ = syn.gen_dataset(SYN_N, 0)
    return _fit(syn.SCHEMA, trees, SYN_CFG)


@pytest.fixture(scope="session")
def traffic_trained():
    trees = tr.gen_traffic_dataset(tr.intersection_layout(), TRAFFIC_N, 0)
    return _fit(tr.SCHEMA, trees, TRAFFIC_CFG)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
