import time

import pytest

from casep.trainer import train_stage1, tuned_config
from casep.world import WorldConfig, build_world, make_splits

# one line per acceptance criterion, printed in the terminal summary
AC_LINES: dict[str, str] = {}


def record(name: str, ok: bool, detail: str) -> bool:
    AC_LINES[name] = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if not AC_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(AC_LINES, key=lambda k: int(k[2:])):
        terminalreporter.write_line(AC_LINES[key])


class _Runs:
    """Trained desk-scale runs, built lazily and shared across the session."""

    def __init__(self):
        self._cache = {}

    def world(self, n_salient=1):
        key = ("world", n_salient)
        if key not in self._cache:
            world = build_world(WorldConfig(n_salient=n_salient))
            self._cache[key] = (world, make_splits(world, 4000, 2000))
        return self._cache[key]

    def train(self, mode="adv", seed=0, n_salient=1):
        key = ("run", mode, seed, n_salient)
        if key not in self._cache:
            world, d = self.world(n_salient)
            t = time.perf_counter()
            res = train_stage1(world, tuned_config(regularizer_mode=mode, seed=seed), d["x_train"], d["y_train"])
            self._cache[key] = (res, time.perf_counter() - t)
        return self._cache[key]


@pytest.fixture(scope="session")
def runs():
    return _Runs()
