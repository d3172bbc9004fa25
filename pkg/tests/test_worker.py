import math
import os
from unittest.mock import MagicMock

import pytest

from app.worker import THREADS_ENV, resolve_threads, run_grid


def test_explicit_thread_count_wins(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "8")
    assert resolve_threads(3) == 3


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "4")
    assert resolve_threads() == 4
    monkeypatch.delenv(THREADS_ENV)
    assert resolve_threads() == 1


def test_zero_means_every_cpu(monkeypatch):
    monkeypatch.setattr(os, "cpu_count", lambda: 6)
    assert resolve_threads(0) == 6


def test_non_integer_environment_is_ignored(monkeypatch, caplog):
    monkeypatch.setenv(THREADS_ENV, "many")
    assert resolve_threads() == 1
    assert THREADS_ENV in caplog.text


def test_negative_thread_count_is_rejected():
    with pytest.raises(ValueError):
        resolve_threads(-1)


def test_serial_grid_keeps_task_order():
    func = MagicMock(side_effect=lambda x: 10 * x)
    assert run_grid(func, [3, 1, 2], threads=1) == [30, 10, 20]
    assert [c.args[0] for c in func.call_args_list] == [3, 1, 2]


def test_parallel_grid_matches_serial():
    tasks = [float(x) for x in range(40)]
    assert run_grid(math.sqrt, tasks, threads=3) == [math.sqrt(x) for x in tasks]


def test_empty_grid():
    assert run_grid(math.sqrt, [], threads=4) == []
