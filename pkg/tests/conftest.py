import logging

import pytest

from skillguide.core import Config
from skillguide.env import PointMaze
from skillguide.sac import train_reference_policy


@pytest.fixture(scope="session")
def reference_run():
    """One reference policy trained on the maze, shared by the slow end-to-end tests."""
    logging.getLogger("skillguide").setLevel(logging.WARNING)
    cfg = Config(num_skills=1, seed=0)
    env = PointMaze(horizon=cfg.horizon)
    trainer, history = train_reference_policy(env, cfg)
    return cfg, trainer, history


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
