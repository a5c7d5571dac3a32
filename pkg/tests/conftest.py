import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from beags import pipeline, scenegen, trainer  # noqa: E402


def small_spec(seed=0):
    """The default layout at a fraction of the size, for plumbing tests."""
    spec = scenegen.default_spec(seed)
    for o, n in zip(spec.objects, (300, 150, 400)):
        o.count = n
    spec.n_views, spec.n_test_views = 8, 3
    spec.width = spec.height = 48
    spec.n_spikes, spec.n_stretch, spec.n_bleed = 6, 3, 2
    return spec


SMALL_CFG = trainer.LossConfig(pretrain_iters=150, refine_iters=100, log_every=50)


@pytest.fixture(scope="session")
def small_bench():
    return pipeline.build_benchmark(small_spec())


@pytest.fixture(scope="session")
def small_run(small_bench):
    return pipeline.run(small_bench, SMALL_CFG)


@pytest.fixture(scope="session")
def bench():
    return pipeline.build_benchmark(scenegen.default_spec())


def pytest_addoption(parser):
    parser.addoption("--full-acceptance", action="store_true", default=False,
                     help="also run the acceptance criteria that train on the default benchmark")


def full_acceptance(config):
    return config.getoption("--full-acceptance") or os.environ.get("BEAGS_FULL_ACCEPTANCE") == "1"


def pytest_terminal_summary(terminalreporter, config):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
