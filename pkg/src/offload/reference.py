"""Single-process reference executor and randomized program traces.

A trace is a list of steps (create / write / kernel / migrate / read).
:func:`run_reference` applies it sequentially to one dict of buffers;
:func:`run_distributed` replays it through a :class:`~offload.client.Context`.
For well-formed traces the two must leave every buffer bitwise identical.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Create:
    buf: int
    size: int


@dataclass(frozen=True)
class Write:
    buf: int
    offset: int
    data: bytes
    server: int | None = None


@dataclass(frozen=True)
class Kernel:
    server: int
    name: str
    # ("buf", index) | ("u64", value) | ("f64", value)
    args: tuple[tuple[str, int | float], ...]
    wait: tuple[int, ...] = ()  # indices of earlier Kernel steps


@dataclass(frozen=True)
class Migrate:
    buf: int
    server: int


@dataclass(frozen=True)
class Read:
    buf: int
    offset: int
    size: int


Step = Union[Create, Write, Kernel, Migrate, Read]


def run_reference(trace: list[Step]) -> tuple[dict[int, bytes], list[bytes]]:
    """Return final buffer contents and the results of every Read step."""
    bufs: dict[int, bytearray] = {}
    reads = []
    for step in trace:
        if isinstance(step, Create):
            bufs[step.buf] = bytearray(step.size)
        elif isinstance(step, Write):
            bufs[step.buf][step.offset:step.offset + len(step.data)] = step.data
        elif isinstance(step, Kernel):
            values = [bufs[v] if kind == "buf" else v for kind, v in step.args]
            kernels.run_kernel(kernels.lookup(step.name), values)
        elif isinstance(step, Read):
            reads.append(bytes(bufs[step.buf][step.offset:step.offset + step.size]))
    return {k: bytes(v) for k, v in bufs.items()}, reads


def run_distributed(ctx, trace: list[Step]) -> tuple[dict[int, bytes], list[bytes]]:
    from .client import Status

    bufs = {}
    events = {}
    reads = []
    for i, step in enumerate(trace):
        if isinstance(step, Create):
            bufs[step.buf] = ctx.create_buffer(step.size)
        elif isinstance(step, Write):
            ctx.write_buffer(bufs[step.buf], step.data, step.offset, step.server)
        elif isinstance(step, Kernel):
            args = [bufs[v] if kind == "buf" else v for kind, v in step.args]
            events[i] = ctx.enqueue_kernel(step.server, step.name, args, [events[w] for w in step.wait])
        elif isinstance(step, Migrate):
            ctx.enqueue_migration(bufs[step.buf], step.server)
        elif isinstance(step, Read):
            reads.append(ctx.read_buffer(bufs[step.buf], step.offset, step.size))
    status = ctx.finish()
    if status != Status.COMPLETE:
        raise RuntimeError(f"trace finished with {status.name}")
    return {k: ctx.read_buffer(b) for k, b in bufs.items()}, reads


# -- independent numeric references -------------------------------------------


def reference_matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major f32 product, one rounding per multiply and per add, k ascending."""
    n = a.shape[0]
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    out = np.empty((n, n), dtype=np.float32)
    with np.errstate(all="ignore"):
        for r in range(n):
            row = np.zeros(n, dtype=np.float32)
            for k in range(n):
                row = row + np.multiply(a[r, k], b[k], dtype=np.float32)
            out[r] = row
    return out


def reference_stencil(field: np.ndarray, steps: int, left: float, right: float) -> np.ndarray:
    """Repeated three-point average with fixed boundary values, cell by cell."""
    cur = [float(x) for x in np.asarray(field, dtype=np.float32)]
    n = len(cur)
    for _ in range(steps):
        nxt = []
        for i in range(n):
            lv = cur[i - 1] if i > 0 else left
            rv = cur[i + 1] if i < n - 1 else right
            nxt.append(float(np.float32((lv + cur[i] + rv) / 3.0)))
        cur = nxt
    return np.array(cur, dtype=np.float32)


# -- random traces ---------------------------------------------------------------


@dataclass
class _Pool:
    kind: str
    ids: list[int] = field(default_factory=list)


def _f32_bytes(rng: random.Random, count: int) -> bytes:
    return struct.pack(f"<{count}f", *(rng.uniform(-4.0, 4.0) for _ in range(count)))


def random_trace(rng: random.Random, n_servers: int, n_commands: int = 200, matrix_n: int = 4,
                 field_len: int = 16) -> list[Step]:
    """A well-formed random program touching every built-in kernel.

    Buffers come in three shapes (small ints, ``matrix_n``-square f32
    matrices, f32 fields of ``field_len`` cells) so every kernel always
    gets arguments of adequate size.
    """
    trace: list[Step] = []
    sizes = {"int": 16, "mat": matrix_n * matrix_n * 4, "field": field_len * 4, "halo": 8}
    pools = {k: _Pool(k) for k in sizes}
    kernel_steps: list[int] = []
    next_id = 0

    def new(kind: str) -> int:
        nonlocal next_id
        next_id += 1
        trace.append(Create(next_id, sizes[kind]))
        pools[kind].ids.append(next_id)
        if kind in ("mat", "field"):
            count = sizes[kind] // 4
            trace.append(Write(next_id, 0, _f32_bytes(rng, count), rng.choice([None, rng.randrange(n_servers)])))
        return next_id

    for kind, count in (("int", 3), ("mat", 3), ("field", 2), ("halo", 2)):
        for _ in range(count):
            new(kind)

    def pick(kind: str) -> int:
        if rng.random() < 0.05:
            return new(kind)
        return rng.choice(pools[kind].ids)

    def server() -> int:
        return rng.randrange(n_servers)

    while sum(not isinstance(s, Create) for s in trace) < n_commands:
        r = rng.random()
        if r < 0.08:
            b = pick("int")
            off = rng.randrange(0, 12)
            data = bytes(rng.randrange(256) for _ in range(rng.randrange(1, 16 - off + 1)))
            trace.append(Write(b, off, data, rng.choice([None, server()])))
            continue
        if r < 0.13:
            kind = rng.choice(list(sizes))
            b = rng.choice(pools[kind].ids)
            size = sizes[kind]
            off = rng.randrange(size)
            trace.append(Read(b, off, rng.randrange(1, size - off + 1)))
            continue
        if r < 0.18:
            kind = rng.choice(list(sizes))
            trace.append(Migrate(rng.choice(pools[kind].ids), server()))
            continue
        name = rng.choice(sorted(kernels.REGISTRY))
        if name == "nop":
            args: tuple = ()
        elif name == "passthrough_i32":
            args = (("buf", pick("int")), ("buf", pick("int")))
        elif name == "increment_first_i32":
            args = (("buf", pick("int")),)
        elif name == "fill_u8":
            args = (("buf", pick(rng.choice(["int", "halo"]))), ("u64", rng.randrange(2**64)))
        elif name == "matmul_rows_f32":
            start = rng.randrange(matrix_n)
            count = rng.randrange(0, matrix_n - start + 1)
            args = (("buf", pick("mat")), ("buf", pick("mat")), ("buf", pick("mat")),
                    ("u64", matrix_n), ("u64", start), ("u64", count))
        elif name == "stencil_step_f32":
            args = (("buf", pick("field")), ("buf", pick("field")), ("u64", field_len),
                    ("f64", float(np.float32(rng.uniform(-1, 1)))), ("f64", rng.uniform(-1, 1)))
        elif name == "stencil_step_halo_f32":
            args = (("buf", pick("field")), ("buf", pick("field")), ("buf", pick("halo")),
                    ("buf", pick("halo")), ("u64", field_len))
        else:
            args = (("buf", pick("field")), ("buf", pick("halo")), ("buf", pick("halo")), ("u64", field_len))
        wait = tuple(sorted(rng.sample(kernel_steps, min(len(kernel_steps), rng.randrange(3)))))
        kernel_steps.append(len(trace))
        trace.append(Kernel(server(), name, args, wait))
    return trace
