from __future__ import annotations

import time

import pytest

from offload.client import DeviceUnavailable, connect
from offload.daemon import Daemon


@pytest.fixture
def start_daemons():
    started: list[Daemon] = []

    def start(n: int = 1, **kw) -> list[Daemon]:
        ds = [Daemon(**kw).start() for _ in range(n)]
        started.extend(ds)
        return ds

    yield start
    for d in started:
        d.shutdown()


@pytest.fixture
def cluster(start_daemons):
    """``cluster(n)`` -> (context, daemons) on fresh loopback daemons."""
    contexts = []

    def make(n: int = 2, **kw):
        ds = start_daemons(n)
        ctx = connect([d.address for d in ds], **kw)
        contexts.append(ctx)
        return ctx, ds

    yield make
    for ctx in contexts:
        ctx.close()


def retry(fn, *args, timeout: float = 20.0, **kw):
    """Call ``fn`` until the target server is available again."""
    end = time.monotonic() + timeout
    while True:
        try:
            return fn(*args, **kw)
        except DeviceUnavailable:
            if time.monotonic() > end:
                raise
            time.sleep(0.002)


def wait_until(pred, timeout: float = 5.0, interval: float = 0.005) -> bool:
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(interval)
    return pred()
