"""Benchmarks: nop overhead, migration ping-pong, distributed matmul, stencil.

Every benchmark checks its computed bytes against an independent oracle
before it reports timings; a wrong result raises :class:`BenchFailed`.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
import struct
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .client import Context, Status
from .reference import reference_matmul_f32, reference_stencil

log = logging.getLogger(__name__)

DEFAULT_ITERS = 1000
# Reported for comparison only; measured on LAN hardware, not reproducible here.
REFERENCE_NOP_OVERHEAD_US = 60


class BenchError(Exception):
    pass


class BenchFailed(BenchError):
    """The benchmark computed wrong bytes."""


class Requires2Servers(BenchError):
    pass


class IndivisibleDomain(BenchError):
    pass


def percentile(samples: Sequence[int], q: float) -> int:
    """Nearest-rank percentile."""
    if not samples:
        raise ValueError("no samples")
    ordered = sorted(samples)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[rank - 1]


def summarize(samples: Sequence[int]) -> dict[str, int]:
    return {
        "min_ns": min(samples),
        "avg_ns": int(round(statistics.fmean(samples))),
        "p99_ns": percentile(samples, 99),
        "median_ns": int(statistics.median(samples)),
    }


@dataclass
class BenchReport:
    bench: str
    params: dict[str, Any]
    samples_ns: list[int]
    client_in: int = 0
    client_out: int = 0
    peer_total: int | None = None
    ok: bool = True
    extra: dict[str, Any] = field(default_factory=dict)
    result: Any = field(default=None, repr=False)  # computed output; not serialized

    @property
    def n_iters(self) -> int:
        return len(self.samples_ns)

    def to_dict(self) -> dict[str, Any]:
        stats = summarize(self.samples_ns)
        return {
            "bench": self.bench,
            "params": self.params,
            "n_iters": self.n_iters,
            "min_ns": stats["min_ns"],
            "avg_ns": stats["avg_ns"],
            "p99_ns": stats["p99_ns"],
            "bytes": {"client_in": self.client_in, "client_out": self.client_out, "peer_total": self.peer_total},
            "ok": self.ok,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write(self, path: str) -> None:
        with open(path, "a", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")


class _Meter:
    """Client and (optionally) peer byte counters over a benchmark window."""

    def __init__(self, ctx: Context, daemons: Sequence | None) -> None:
        self.ctx = ctx
        self.daemons = daemons
        self.c0 = ctx.client_bytes()
        self.p0 = self._peer()

    def _peer(self) -> int | None:
        if not self.daemons:
            return None
        return sum(d.stats()["peer_bytes_out"] for d in self.daemons)

    def fill(self, report: BenchReport) -> BenchReport:
        cin, cout = self.ctx.client_bytes()
        report.client_in = cin - self.c0[0]
        report.client_out = cout - self.c0[1]
        p = self._peer()
        report.peer_total = None if p is None else p - self.p0
        return report


def _pushes(daemons: Sequence | None) -> int | None:
    if not daemons:
        return None
    return sum(d.stats()["pushes_sent"] for d in daemons)


def _servers(ctx: Context, servers: int | None) -> list[int]:
    count = len(ctx.servers) if servers is None else servers
    if not 1 <= count <= len(ctx.servers):
        raise BenchError(f"need {count} servers, context has {len(ctx.servers)}")
    return list(range(count))


def _expect(ev_status: Status, what: str) -> None:
    if ev_status != Status.COMPLETE:
        raise BenchFailed(f"{what} finished with {ev_status.name}")


def bench_nop(ctx: Context, iters: int = DEFAULT_ITERS, servers: int | None = None,
              daemons: Sequence | None = None) -> BenchReport:
    """Enqueue-to-complete time of the ``nop`` kernel, aggregated over servers."""
    indices = [s for s in _servers(ctx, servers) if ctx.available(s)]
    if not indices:
        raise BenchError("no available server")
    meter = _Meter(ctx, daemons)
    samples: list[int] = []
    echoes: list[int] = []
    per_server = {}
    for s in indices:
        mine = []
        for _ in range(iters):
            t0 = time.perf_counter_ns()
            ev = ctx.enqueue_kernel(s, "nop")
            _expect(ev.wait(), "nop")
            mine.append(time.perf_counter_ns() - t0)
        rtt = [ctx.echo(s) for _ in range(iters)]
        samples += mine
        echoes += rtt
        per_server[s] = {**summarize(mine), "echo_median_ns": int(statistics.median(rtt))}
    overhead = int(statistics.median(samples) - statistics.median(echoes))
    report = BenchReport("nop", {"iters": iters, "servers": len(indices)}, samples, extra={
        "per_server": per_server,
        "echo": summarize(echoes),
        "median_ns": int(statistics.median(samples)),
        "overhead_median_ns": overhead,
        "reference_overhead_us": REFERENCE_NOP_OVERHEAD_US,
    })
    return meter.fill(report)


def bench_migration(ctx: Context, iters: int = DEFAULT_ITERS, daemons: Sequence | None = None) -> BenchReport:
    """A 4-byte counter hops between servers 0 and 1, incremented on each."""
    if len(ctx.servers) < 2:
        raise Requires2Servers("migration benchmark needs at least two servers")
    buf = ctx.create_buffer(4)
    ctx.write_buffer(buf, bytes(4), server=0)
    ctx.finish()
    meter = _Meter(ctx, daemons)
    pushes0 = _pushes(daemons)
    samples = []
    for _ in range(iters):
        for s in (0, 1):
            t0 = time.perf_counter_ns()
            _expect(ctx.enqueue_kernel(s, "increment_first_i32", [buf]).wait(), "increment")
            samples.append(time.perf_counter_ns() - t0)
    report = meter.fill(BenchReport("migrate", {"iters": iters}, samples))
    value = struct.unpack("<i", ctx.read_buffer(buf))[0]
    ctx.release(buf)
    migrations = 2 * iters - 1
    report.extra = {
        "final_value": value,
        "migrations": migrations,
        "client_bytes_per_migration": (report.client_in + report.client_out) / max(1, migrations),
    }
    if daemons:
        report.extra["pushes"] = _pushes(daemons) - pushes0
    if value != 2 * iters:
        report.ok = False
        raise BenchFailed(f"counter ended at {value}, expected {2 * iters}")
    return report


def split_rows(n: int, parts: int) -> list[tuple[int, int]]:
    """``(start, count)`` per part; remainder rows go to the lowest indices."""
    base, extra = divmod(n, parts)
    out = []
    start = 0
    for i in range(parts):
        count = base + (1 if i < extra else 0)
        out.append((start, count))
        start += count
    return out


def bench_matmul(ctx: Context, n: int = 64, servers: int | None = None, iters: int = 5, seed: int = 0,
                 a: np.ndarray | None = None, b: np.ndarray | None = None,
                 daemons: Sequence | None = None) -> BenchReport:
    """Row-split f32 matmul; timing covers the multiply and the gather."""
    indices = _servers(ctx, servers)
    rng = np.random.default_rng(seed)
    if a is None:
        a = rng.uniform(-1, 1, (n, n)).astype(np.float32)
    if b is None:
        b = rng.uniform(-1, 1, (n, n)).astype(np.float32)
    a = np.ascontiguousarray(a, dtype="<f4")
    b = np.ascontiguousarray(b, dtype="<f4")
    expected = reference_matmul_f32(a, b)
    nbytes = n * n * 4
    split = split_rows(n, len(indices))
    bufs = []
    for s in indices:
        ab, bb, cb = ctx.create_buffer(nbytes), ctx.create_buffer(nbytes), ctx.create_buffer(nbytes)
        ctx.write_buffer(ab, a.tobytes(), server=s)
        ctx.write_buffer(bb, b.tobytes(), server=s)
        ctx.write_buffer(cb, bytes(nbytes), server=s)
        bufs.append((ab, bb, cb))
    _expect(ctx.finish(), "upload")
    meter = _Meter(ctx, daemons)
    samples = []
    result = None
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        for s, (ab, bb, cb), (start, count) in zip(indices, bufs, split):
            ctx.enqueue_kernel(s, "matmul_rows_f32", [ab, bb, cb, n, start, count])
        parts = []
        for (ab, bb, cb), (start, count) in zip(bufs, split):
            if count:
                parts.append(ctx.read_buffer(cb, start * n * 4, count * n * 4))
        result = np.frombuffer(b"".join(parts), dtype="<f4").reshape(n, n)
        samples.append(time.perf_counter_ns() - t0)
    report = meter.fill(BenchReport("matmul", {"n": n, "servers": len(indices), "iters": iters}, samples))
    for trio in bufs:
        for buf in trio:
            ctx.release(buf)
    report.extra = {"row_split": [c for _, c in split]}
    if result is None or result.tobytes() != expected.tobytes():
        report.ok = False
        raise BenchFailed("distributed product differs from the reference")
    report.result = result
    return report


def bench_stencil(ctx: Context, length: int = 1024, steps: int = 100, servers: int | None = None,
                  seed: int = 0, initial: np.ndarray | None = None, left: float = 1.0, right: float = -1.0,
                  daemons: Sequence | None = None) -> BenchReport:
    """1-D three-point stencil split into contiguous chunks with halo exchange.

    Each step packs every chunk's edge cells into 8-byte halo buffers and
    runs the halo stencil; using a neighbour's halo buffer migrates it.
    """
    indices = _servers(ctx, servers)
    d = len(indices)
    if length <= 0 or length % d:
        raise IndivisibleDomain(f"length {length} is not divisible by {d} servers")
    chunk = length // d
    if initial is None:
        initial = np.random.default_rng(seed).uniform(-1, 1, length)
    field0 = np.ascontiguousarray(initial, dtype="<f4")
    left, right = float(np.float32(left)), float(np.float32(right))
    expected = reference_stencil(field0, steps, left, right)

    fields = []
    halos = []
    for s in indices:
        f0, f1 = ctx.create_buffer(chunk * 4), ctx.create_buffer(chunk * 4)
        ctx.write_buffer(f0, field0[s * chunk:(s + 1) * chunk].tobytes(), server=s)
        fields.append((f0, f1))
        halos.append((ctx.create_buffer(8), ctx.create_buffer(8)))
    bl, br = ctx.create_buffer(8), ctx.create_buffer(8)
    ctx.write_buffer(bl, struct.pack("<f", left) + bytes(4), server=indices[0])
    ctx.write_buffer(br, struct.pack("<f", right) + bytes(4), server=indices[-1])
    _expect(ctx.finish(), "setup")

    meter = _Meter(ctx, daemons)
    pushes0 = _pushes(daemons)
    samples = []
    per_step_pushes = []
    t_start = time.perf_counter_ns()
    for t in range(steps):
        cur, nxt = t % 2, 1 - t % 2
        before = _pushes(daemons)
        t0 = time.perf_counter_ns()
        if d > 1:
            for i, s in enumerate(indices):
                hl, hr = halos[i]
                ctx.enqueue_kernel(s, "halo_pack_f32", [fields[i][cur], hl, hr, chunk])
        events = []
        for i, s in enumerate(indices):
            lh = halos[i - 1][1] if i > 0 else bl
            rh = halos[i + 1][0] if i < d - 1 else br
            events.append(ctx.enqueue_kernel(s, "stencil_step_halo_f32",
                                             [fields[i][cur], fields[i][nxt], lh, rh, chunk]))
        for ev in events:
            _expect(ev.wait(), "stencil step")
        samples.append(time.perf_counter_ns() - t0)
        if daemons:
            per_step_pushes.append(_pushes(daemons) - before)
    elapsed = time.perf_counter_ns() - t_start
    report = meter.fill(BenchReport("stencil", {"len": length, "steps": steps, "servers": d}, samples or [0]))
    out = b"".join(ctx.read_buffer(fields[i][steps % 2]) for i in range(d))
    result = np.frombuffer(out, dtype="<f4")
    for pair in fields + halos + [(bl, br)]:
        for buf in pair:
            ctx.release(buf)
    seconds = elapsed / 1e9
    report.extra = {
        "steps_per_s": steps / seconds if steps and seconds else 0.0,
        "mlups": length * steps / seconds / 1e6 if steps and seconds else 0.0,
    }
    if daemons:
        report.extra["pushes"] = _pushes(daemons) - pushes0
        report.extra["pushes_per_step"] = per_step_pushes
    if result.tobytes() != expected.tobytes():
        report.ok = False
        raise BenchFailed("stencil field differs from the single-chunk reference")
    report.result = result
    return report
