"""Built-in kernels.

Each kernel has a fixed argument signature and byte-exact semantics, so
the same trace run on one node or spread over several gives identical
buffers.  Kernels operate on ``bytearray`` (or writable ``memoryview``)
arguments in place; scalars arrive as ``int`` (u64) or ``float`` (f64).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .protocol import ArgKind, Status


class Access(enum.Enum):
    READ = "read"
    WRITE = "write"
    READWRITE = "readwrite"

    @property
    def writes(self) -> bool:
        return self is not Access.READ


class KernelError(Exception):
    status = Status.INTERNAL


class KernelNotFound(KernelError):
    status = Status.UNKNOWN_KERNEL


class ArgMismatch(KernelError):
    status = Status.ARG_MISMATCH


class BufferTooSmall(KernelError):
    status = Status.BUFFER_TOO_SMALL


@dataclass(frozen=True)
class ArgSpec:
    name: str
    kind: ArgKind
    access: Access = Access.READ
    # A write argument whose every byte is overwritten; the runtime may skip
    # fetching its previous contents.
    overwrites: bool = False


@dataclass(frozen=True)
class KernelSpec:
    name: str
    arg_schema: tuple[ArgSpec, ...]
    apply: Callable[..., None]

    def buffer_args(self) -> list[tuple[int, ArgSpec]]:
        return [(i, a) for i, a in enumerate(self.arg_schema) if a.kind == ArgKind.BUFFER]


def _need(buf: Any, nbytes: int, what: str) -> None:
    if len(buf) < nbytes:
        raise BufferTooSmall(f"{what} needs {nbytes} bytes, buffer has {len(buf)}")


def _nop() -> None:
    pass


def _passthrough_i32(src: bytearray, dst: bytearray) -> None:
    _need(src, 4, "input")
    _need(dst, 4, "output")
    dst[0:4] = src[0:4]


def _increment_first_i32(buf: bytearray) -> None:
    _need(buf, 4, "buffer")
    v = int.from_bytes(buf[0:4], "little", signed=True)
    v = (v + 1 + 2**31) % 2**32 - 2**31
    buf[0:4] = v.to_bytes(4, "little", signed=True)


def _fill_u8(buf: bytearray, value: int) -> None:
    buf[:] = bytes([value & 0xFF]) * len(buf)


def _as_f32(buf: bytearray, count: int) -> np.ndarray:
    return np.frombuffer(buf, dtype="<f4", count=count)


def _matmul_rows_f32(a: bytearray, b: bytearray, c: bytearray, n: int, row_start: int, row_count: int) -> None:
    if row_start + row_count > n:
        raise ArgMismatch(f"rows [{row_start}, {row_start + row_count}) exceed n={n}")
    for buf, what in ((a, "A"), (b, "B"), (c, "C")):
        _need(buf, n * n * 4, what)
    if row_count == 0:
        return
    am = _as_f32(a, n * n).reshape(n, n)
    bm = _as_f32(b, n * n).reshape(n, n)
    rows = am[row_start:row_start + row_count].copy()
    bm = bm.copy()
    # k ascending, one f32 rounding per product and per sum.
    acc = np.zeros((row_count, n), dtype=np.float32)
    with np.errstate(all="ignore"):
        for k in range(n):
            acc += rows[:, k, None] * bm[k]
    _as_f32(c, n * n).reshape(n, n)[row_start:row_start + row_count] = acc


def _stencil(src: bytearray, dst: bytearray, length: int, left: float, right: float) -> None:
    _need(src, length * 4, "input")
    _need(dst, length * 4, "output")
    if length == 0:
        return
    x = _as_f32(src, length).astype(np.float64)
    lhs = np.empty(length)
    rhs = np.empty(length)
    lhs[0] = left
    lhs[1:] = x[:-1]
    rhs[-1] = right
    rhs[:-1] = x[1:]
    with np.errstate(all="ignore"):
        _as_f32(dst, length)[:] = ((lhs + x + rhs) / 3.0).astype(np.float32)


def _stencil_step_f32(src: bytearray, dst: bytearray, length: int, left_halo: float, right_halo: float) -> None:
    _stencil(src, dst, length, left_halo, right_halo)


def _halo_value(buf: bytearray) -> float:
    _need(buf, 4, "halo")
    return float(np.frombuffer(buf, dtype="<f4", count=1)[0])


def _stencil_step_halo_f32(src: bytearray, dst: bytearray, left: bytearray, right: bytearray, length: int) -> None:
    _stencil(src, dst, length, _halo_value(left), _halo_value(right))


def _halo_pack_f32(field: bytearray, left_out: bytearray, right_out: bytearray, length: int) -> None:
    if length == 0:
        raise ArgMismatch("halo_pack_f32 needs a non-empty field")
    _need(field, length * 4, "field")
    _need(left_out, 4, "left halo")
    _need(right_out, 4, "right halo")
    first = bytes(field[0:4])
    last = bytes(field[(length - 1) * 4:length * 4])
    left_out[:] = first + bytes(len(left_out) - 4)
    right_out[:] = last + bytes(len(right_out) - 4)


_B, _U, _F = ArgKind.BUFFER, ArgKind.SCALAR_U64, ArgKind.SCALAR_F64
_R, _W, _RW = Access.READ, Access.WRITE, Access.READWRITE

REGISTRY: dict[str, KernelSpec] = {
    k.name: k
    for k in (
        KernelSpec("nop", (), _nop),
        KernelSpec("passthrough_i32", (ArgSpec("in", _B, _R), ArgSpec("out", _B, _W)), _passthrough_i32),
        KernelSpec("increment_first_i32", (ArgSpec("buf", _B, _RW),), _increment_first_i32),
        KernelSpec("fill_u8", (ArgSpec("buf", _B, _W, overwrites=True), ArgSpec("value", _U)), _fill_u8),
        KernelSpec(
            "matmul_rows_f32",
            (
                ArgSpec("A", _B, _R),
                ArgSpec("B", _B, _R),
                ArgSpec("C", _B, _W),
                ArgSpec("n", _U),
                ArgSpec("row_start", _U),
                ArgSpec("row_count", _U),
            ),
            _matmul_rows_f32,
        ),
        KernelSpec(
            "stencil_step_f32",
            (
                ArgSpec("in", _B, _R),
                ArgSpec("out", _B, _W),
                ArgSpec("len", _U),
                ArgSpec("left_halo", _F),
                ArgSpec("right_halo", _F),
            ),
            _stencil_step_f32,
        ),
        KernelSpec(
            "stencil_step_halo_f32",
            (
                ArgSpec("in", _B, _R),
                ArgSpec("out", _B, _W),
                ArgSpec("left_halo", _B, _R),
                ArgSpec("right_halo", _B, _R),
                ArgSpec("len", _U),
            ),
            _stencil_step_halo_f32,
        ),
        KernelSpec(
            "halo_pack_f32",
            (
                ArgSpec("field", _B, _R),
                ArgSpec("left_out", _B, _W, overwrites=True),
                ArgSpec("right_out", _B, _W, overwrites=True),
                ArgSpec("len", _U),
            ),
            _halo_pack_f32,
        ),
    )
}


def lookup(name: str) -> KernelSpec:
    try:
        return REGISTRY[name]
    except KeyError:
        raise KernelNotFound(f"no built-in kernel named {name!r}") from None


def run_kernel(spec: KernelSpec, args: Sequence[Any]) -> None:
    """Check ``args`` against the schema and run the kernel in place."""
    if len(args) != len(spec.arg_schema):
        raise ArgMismatch(f"{spec.name} takes {len(spec.arg_schema)} arguments, got {len(args)}")
    for a, value in zip(spec.arg_schema, args):
        if a.kind == ArgKind.BUFFER:
            ok = isinstance(value, (bytearray, memoryview))
        elif a.kind == ArgKind.SCALAR_U64:
            ok = isinstance(value, int) and not isinstance(value, bool) and 0 <= value < 2**64
        else:
            ok = isinstance(value, float)
        if not ok:
            raise ArgMismatch(f"{spec.name}: argument {a.name!r} expects {a.kind.name}, got {type(value).__name__}")
    spec.apply(*args)
