import threading

import pytest

from src.workers import WorkerPool


def test_inline_pool_runs_on_caller():
    seen = []
    out = WorkerPool(1).map(lambda x: seen.append(threading.get_ident()) or x + 1, range(5))
    assert out == [1, 2, 3, 4, 5]
    assert set(seen) == {threading.get_ident()}


def test_threaded_results_keep_item_order():
    pool = WorkerPool(3)
    assert pool.map(lambda x: x * x, range(40)) == [x * x for x in range(40)]
    assert pool.map(lambda x: x, []) == []


def test_worker_errors_reach_the_caller():
    def fail_on_seven(x):
        if x == 7:
            raise ValueError("seven")
        return x

    with pytest.raises(ValueError, match="seven"):
        WorkerPool(2).map(fail_on_seven, range(10))
