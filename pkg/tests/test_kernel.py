"""Scheduler semantics the rest of the stack leans on."""

import pytest

from rio.kernel import Cancelled, Deadlock, Future, Lock, SimKernel


def test_sleep_advances_logical_clock():
    k = SimKernel()

    async def main():
        await k.sleep(10)
        t1 = k.now()
        await k.sleep(2.5)
        return t1, k.now()

    assert k.run(main()) == (10.0, 12.5)


def test_same_instant_callbacks_run_in_schedule_order():
    k = SimKernel()
    order = []
    for i in range(5):
        k.call_at(1.0, order.append, i)
    k.run_until_idle()
    assert order == [0, 1, 2, 3, 4]


def test_spawned_tasks_interleave_deterministically():
    k = SimKernel()
    log = []

    async def worker(name, delay):
        await k.sleep(delay)
        log.append(name)

    async def main():
        a = k.spawn(worker("a", 3))
        b = k.spawn(worker("b", 1))
        await a
        await b

    k.run(main())
    assert log == ["b", "a"]


def test_future_exception_propagates():
    k = SimKernel()
    fut = Future()

    async def main():
        with pytest.raises(ValueError):
            await fut

    k.call_later(1, fut.set_exception, ValueError("boom"))
    k.run(main())


def test_deadlock_detected():
    k = SimKernel()

    async def main():
        await Future()  # never completed

    with pytest.raises(Deadlock):
        k.run(main())


def test_cancel_parked_task():
    k = SimKernel()
    cleaned = []

    async def worker():
        try:
            await Future()
        finally:
            cleaned.append(True)

    async def main():
        t = k.spawn(worker())
        await k.sleep(1)
        t.cancel()
        await k.sleep(1)
        return t

    task = k.run(main())
    assert cleaned == [True]
    with pytest.raises(Cancelled):
        task.result()


def test_lock_is_fifo():
    k = SimKernel()
    order = []

    async def worker(lock, name, hold):
        async with lock:
            order.append(name)
            await k.sleep(hold)

    async def main():
        lock = Lock(k)
        tasks = [k.spawn(worker(lock, i, 1)) for i in range(4)]
        for t in tasks:
            await t

    k.run(main())
    assert order == [0, 1, 2, 3]


def test_race_timeout_completion_and_expiry():
    k = SimKernel()

    async def quick():
        await k.sleep(1)
        return 42

    async def slow():
        await k.sleep(100)
        return 99

    async def main():
        done, val = await k.race_timeout(k.spawn(quick()), 10)
        assert (done, val) == (True, 42)
        t = k.spawn(slow())
        done, val = await k.race_timeout(t, 10)
        assert (done, val) == (False, None)
        assert k.now() == pytest.approx(11.0)
        return True

    assert k.run(main())
