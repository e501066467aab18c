"""Command dependency DAG shared by the client view and each daemon session.

Events are keyed by command id.  A ``LOCAL`` event is executed by whoever
owns the graph; a ``REMOTE_PROXY`` stands for a command running elsewhere
and only ever changes state through :meth:`TaskGraph.signal_complete`.
"""

from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable


class Status(enum.IntEnum):
    QUEUED = 0
    READY = 1
    RUNNING = 2
    COMPLETE = 3
    FAILED = 4
    DEVICE_LOST = 5

    @property
    def terminal(self) -> bool:
        return self >= Status.COMPLETE


class Kind(enum.IntEnum):
    LOCAL = 0
    REMOTE_PROXY = 1


class GraphError(Exception):
    pass


class CycleDetected(GraphError):
    pass


class DuplicateCommand(GraphError):
    pass


@dataclass
class EventRecord:
    command_id: int
    status: Status = Status.QUEUED
    kind: Kind = Kind.REMOTE_PROXY
    unresolved_deps: int = 0
    dependents: list[int] = field(default_factory=list)
    notify_peers: set[int] = field(default_factory=set)
    # The dependency that failed us, if any; kept for error reporting.
    failed_by: int | None = None
    # Dependents that only need this event to be terminal, not successful.
    order_dependents: set[int] = field(default_factory=set)


class TaskGraph:
    def __init__(self) -> None:
        self.events: dict[int, EventRecord] = {}
        self.ready_queue: deque[int] = deque()
        self._failed: list[int] = []
        self._lock = threading.RLock()

    def __contains__(self, command_id: int) -> bool:
        return command_id in self.events

    def get(self, command_id: int) -> EventRecord | None:
        return self.events.get(command_id)

    def status(self, command_id: int) -> Status | None:
        with self._lock:
            ev = self.events.get(command_id)
            return None if ev is None else ev.status

    def add_command(self, command_id: int, deps: Iterable[int], kind: Kind = Kind.LOCAL,
                    order_deps: Iterable[int] = ()) -> EventRecord:
        """Insert a command that waits on ``deps``.

        Unknown dependencies become queued proxies.  A dependency that has
        already failed fails the new event immediately.  ``order_deps`` are
        waited for too, but their failure does not propagate.
        """
        deps = list(dict.fromkeys(deps))
        soft = [d for d in dict.fromkeys(order_deps) if d not in deps]
        deps += soft
        soft = set(soft)
        with self._lock:
            ev = self.events.get(command_id)
            if ev is not None and (ev.kind == Kind.LOCAL or ev.status != Status.QUEUED or ev.unresolved_deps):
                raise DuplicateCommand(f"command {command_id} already present")
            if command_id in deps:
                raise CycleDetected(f"command {command_id} depends on itself")
            if ev is not None and ev.dependents and self._reaches(command_id, set(deps)):
                raise CycleDetected(f"adding command {command_id} would close a cycle")

            if ev is None:
                ev = EventRecord(command_id)
                self.events[command_id] = ev
            ev.kind = kind
            failed_dep = None
            for d in deps:
                dep = self.events.get(d)
                if dep is None:
                    dep = self.events[d] = EventRecord(d)
                if dep.status == Status.COMPLETE or (d in soft and dep.status.terminal):
                    continue
                if dep.status.terminal:
                    failed_dep = d
                    continue
                if d in soft:
                    dep.order_dependents.add(command_id)
                dep.dependents.append(command_id)
                ev.unresolved_deps += 1
            if failed_dep is not None:
                self._fail(ev, failed_dep)
            elif ev.unresolved_deps == 0 and kind == Kind.LOCAL:
                ev.status = Status.READY
                self.ready_queue.append(command_id)
            return ev

    def _reaches(self, start: int, targets: set[int]) -> bool:
        seen = set()
        stack = [start]
        while stack:
            cid = stack.pop()
            if cid in targets:
                return True
            if cid in seen:
                continue
            seen.add(cid)
            ev = self.events.get(cid)
            if ev is not None:
                stack.extend(ev.dependents)
        return False

    def signal_complete(self, command_id: int, status: Status = Status.COMPLETE) -> list[int]:
        """Mark ``command_id`` terminal and return the events that became ready.

        A notification for an unknown id creates a completed proxy so that a
        later :meth:`add_command` sees the dependency as satisfied.  Signalling
        an event that is already terminal is a no-op.
        """
        if not status.terminal:
            raise ValueError(f"{status!r} is not a terminal status")
        with self._lock:
            ev = self.events.get(command_id)
            if ev is None:
                ev = self.events[command_id] = EventRecord(command_id)
            if ev.status.terminal:
                return []
            ready: list[int] = []
            if status != Status.COMPLETE:
                self._fail(ev, None, status, ready)
                return ready
            if ev.status == Status.READY:
                self.ready_queue.remove(command_id)
            ev.status = Status.COMPLETE
            for d in ev.dependents:
                self._resolve(self.events[d], ready)
            return ready

    def _resolve(self, dep: EventRecord, ready: list[int]) -> None:
        if dep.status.terminal:
            return
        dep.unresolved_deps -= 1
        if dep.unresolved_deps == 0 and dep.kind == Kind.LOCAL and dep.status == Status.QUEUED:
            dep.status = Status.READY
            self.ready_queue.append(dep.command_id)
            ready.append(dep.command_id)

    def _fail(self, ev: EventRecord, cause: int | None, status: Status = Status.FAILED,
              ready: list[int] | None = None) -> None:
        ready = [] if ready is None else ready
        stack = [(ev, cause, status)]
        while stack:
            cur, cause, st = stack.pop()
            if cur.status.terminal:
                continue
            if cur.status == Status.READY:
                self.ready_queue.remove(cur.command_id)
            cur.status = st
            cur.failed_by = cause
            if cause is not None:
                self._failed.append(cur.command_id)
            for d in reversed(cur.dependents):
                if d in cur.order_dependents:
                    self._resolve(self.events[d], ready)
                else:
                    stack.append((self.events[d], cur.command_id, Status.FAILED))

    def take_failed(self) -> list[int]:
        """Return (and forget) events failed by propagation since the last call."""
        with self._lock:
            out, self._failed = self._failed, []
            return out

    def pop_ready(self) -> int | None:
        with self._lock:
            if not self.ready_queue:
                return None
            cid = self.ready_queue.popleft()
            self.events[cid].status = Status.RUNNING
            return cid

    def pending(self) -> list[int]:
        with self._lock:
            return [cid for cid, ev in self.events.items() if not ev.status.terminal]

    def snapshot(self) -> tuple:
        """Hashable view of the whole graph, for equality checks in tests."""
        with self._lock:
            return (
                tuple(
                    (cid, ev.status, ev.kind, ev.unresolved_deps, tuple(ev.dependents), ev.failed_by)
                    for cid, ev in sorted(self.events.items())
                ),
                tuple(self.ready_queue),
            )
