"""Event model and on-disk trace format.

A trace is a line-delimited stream of JSON records, one access event per
line, preceded by a single header line carrying the virtual address range
of the traced program's main module.  Addresses are 0x-prefixed hex
strings so traces stay greppable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional, Union

CPL_VALUES = ("user", "kernel")
KIND_VALUES = ("read", "write", "execute")
OPERAND_SIZES = (1, 2, 4, 8, 16)

CATEGORIES = (
    "int-move",
    "float-move",
    "xmm-zero-store",
    "push",
    "call",
    "ret",
    "sub-sp",
    "syscall",
    "api-call",
    "other",
)
SIGN_VALUES = ("signed", "unsigned", "n/a")

# Categories whose events carry a symbolic callee / register snapshot.
CALLEE_CATEGORIES = ("call", "syscall", "api-call")
ARG_CATEGORIES = ("call", "api-call")

_CPL_WIRE = {"user": "u", "kernel": "k"}
_CPL_UNWIRE = {v: k for k, v in _CPL_WIRE.items()}
_KIND_WIRE = {"read": "r", "write": "w", "execute": "x"}
_KIND_UNWIRE = {v: k for k, v in _KIND_WIRE.items()}


class TraceError(ValueError):
    """Base class for trace format errors."""


class TraceParseError(TraceError):
    """A line could not be parsed; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TraceOrderError(TraceError):
    """Sequence numbers are not strictly increasing."""


@dataclass(frozen=True)
class InstrDescriptor:
    """Modeled output of instruction decoding at a trapped access.

    Stands in for fetching and disassembling the 16 bytes at the faulting
    instruction pointer: the simulator fills these fields directly.
    `value` carries the decoded operand value where one is meaningful
    (stored/loaded data, pushed value, subtracted stack amount, or the
    modeled return value of an allocator call).
    """

    category: str = "other"
    signedness: str = "n/a"
    callee_id: Optional[str] = None
    register_args: Optional[tuple[int, int, int, int]] = None
    value: Optional[int] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown instruction category {self.category!r}")
        if self.signedness not in SIGN_VALUES:
            raise ValueError(f"unknown signedness {self.signedness!r}")
        if self.callee_id is not None and self.category not in CALLEE_CATEGORIES:
            raise ValueError(f"callee_id not allowed for category {self.category!r}")
        if self.register_args is not None:
            if self.category not in ARG_CATEGORIES:
                raise ValueError(
                    f"register_args not allowed for category {self.category!r}"
                )
            if len(self.register_args) != 4:
                raise ValueError("register_args must hold exactly 4 values")
            object.__setattr__(self, "register_args", tuple(self.register_args))


@dataclass(frozen=True)
class AccessEvent:
    """One intercepted memory access."""

    seq: int
    thread_id: int
    cpl: str
    kind: str
    address: int
    operand_size: int
    instr: InstrDescriptor
    rip: int

    def __post_init__(self):
        if self.cpl not in CPL_VALUES:
            raise ValueError(f"bad cpl {self.cpl!r}")
        if self.kind not in KIND_VALUES:
            raise ValueError(f"bad access kind {self.kind!r}")
        if self.operand_size not in OPERAND_SIZES:
            raise ValueError(f"bad operand size {self.operand_size}")
        if self.kind == "execute" and self.operand_size != 1:
            raise ValueError("execute events have operand_size 1")
        if self.operand_size == 16 and self.instr.category != "xmm-zero-store":
            raise ValueError("operand_size 16 is reserved for xmm-zero-store")
        if self.instr.category == "float-move" and self.operand_size not in (4, 8):
            raise ValueError("float-move implies operand_size 4 or 8")


@dataclass(frozen=True)
class TraceLog:
    """An ordered trace plus the main-module address range [lo, hi)."""

    events: tuple[AccessEvent, ...] = ()
    module_range: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "module_range", tuple(self.module_range))

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class AddressPattern:
    """Ordered relative offsets used as a behavioral memory signature."""

    offsets: tuple[int, ...]
    base: int = 0
    sizes: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(self.offsets))
        if self.sizes is not None:
            object.__setattr__(self, "sizes", tuple(self.sizes))

    def __len__(self):
        return len(self.offsets)


def _hex(value: int) -> str:
    return f"0x{value:x}"


def _event_to_record(event: AccessEvent) -> dict:
    instr: dict = {"cat": event.instr.category, "sign": event.instr.signedness}
    if event.instr.callee_id is not None:
        instr["callee"] = event.instr.callee_id
    if event.instr.register_args is not None:
        instr["args"] = list(event.instr.register_args)
    if event.instr.value is not None:
        instr["val"] = _hex(event.instr.value)
    return {
        "seq": event.seq,
        "tid": event.thread_id,
        "cpl": _CPL_WIRE[event.cpl],
        "kind": _KIND_WIRE[event.kind],
        "addr": _hex(event.address),
        "size": event.operand_size,
        "rip": _hex(event.rip),
        "instr": instr,
    }


def _parse_addr(value) -> int:
    if not isinstance(value, str) or not value.startswith("0x"):
        raise ValueError(f"address {value!r} is not a 0x-prefixed hex string")
    return int(value, 16)


def _record_to_event(record: dict) -> AccessEvent:
    for key in ("seq", "tid", "cpl", "kind", "addr", "size", "rip", "instr"):
        if key not in record:
            raise ValueError(f"missing key {key!r}")
    raw = record["instr"]
    if not isinstance(raw, dict) or "cat" not in raw or "sign" not in raw:
        raise ValueError("instr must be an object with cat and sign")
    args = raw.get("args")
    instr = InstrDescriptor(
        category=raw["cat"],
        signedness=raw["sign"],
        callee_id=raw.get("callee"),
        register_args=tuple(args) if args is not None else None,
        value=_parse_addr(raw["val"]) if raw.get("val") is not None else None,
    )
    return AccessEvent(
        seq=record["seq"],
        thread_id=record["tid"],
        cpl=_CPL_UNWIRE.get(record["cpl"], record["cpl"]),
        kind=_KIND_UNWIRE.get(record["kind"], record["kind"]),
        address=_parse_addr(record["addr"]),
        operand_size=record["size"],
        instr=instr,
        rip=_parse_addr(record["rip"]),
    )


def _iter_lines(stream) -> Iterator[str]:
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        yield from stream.splitlines()
        return
    for line in stream:
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        yield line.rstrip("\n")


def parse_trace(stream: Union[bytes, str, IO, Iterable[str]]) -> TraceLog:
    """Parse a line-delimited trace stream into a TraceLog.

    The first non-empty line is the header carrying module_range.  An
    entirely empty stream parses to an empty log.  Raises TraceParseError
    (naming the line) on malformed input and TraceOrderError when seq is
    not strictly increasing.
    """
    events: list[AccessEvent] = []
    module_range = (0, 0)
    saw_header = False
    last_seq = None
    for lineno, line in enumerate(_iter_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(lineno, f"invalid JSON: {exc.msg}") from exc
        if not saw_header:
            if not isinstance(record, dict) or "module_range" not in record:
                raise TraceParseError(lineno, "first line must carry module_range")
            try:
                rng = record["module_range"]
                module_range = (_parse_addr(rng["lo"]), _parse_addr(rng["hi"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceParseError(lineno, f"bad module_range: {exc}") from exc
            saw_header = True
            continue
        try:
            event = _record_to_event(record)
        except (TypeError, ValueError) as exc:
            raise TraceParseError(lineno, str(exc)) from exc
        if last_seq is not None and event.seq <= last_seq:
            raise TraceOrderError(
                f"line {lineno}: seq {event.seq} not greater than {last_seq}"
            )
        last_seq = event.seq
        events.append(event)
    return TraceLog(events=tuple(events), module_range=module_range)


def serialize_trace(log: TraceLog) -> bytes:
    """Serialize a TraceLog; parse_trace(serialize_trace(log)) == log."""
    if not log.events and log.module_range == (0, 0):
        return b""
    lines = [
        json.dumps(
            {
                "module_range": {
                    "lo": _hex(log.module_range[0]),
                    "hi": _hex(log.module_range[1]),
                }
            }
        )
    ]
    lines.extend(json.dumps(_event_to_record(e)) for e in log.events)
    return ("\n".join(lines) + "\n").encode("utf-8")


def split_by_thread(log: TraceLog) -> dict[int, list[AccessEvent]]:
    """Partition events by thread_id, preserving per-thread seq order."""
    threads: dict[int, list[AccessEvent]] = {}
    for event in log.events:
        threads.setdefault(event.thread_id, []).append(event)
    return threads


def normalize_offsets(
    events: Iterable[AccessEvent], base: Optional[int] = None
) -> AddressPattern:
    """Turn accessed addresses into relative offsets.

    With an explicit base, offsets are address - base.  Without one the
    lowest accessed address becomes the reference, so min(offsets) == 0.
    Event order is preserved.
    """
    events = list(events)
    if base is None:
        if not events:
            raise ValueError("cannot normalize an empty event list without a base")
        base = min(e.address for e in events)
    return AddressPattern(
        offsets=tuple(e.address - base for e in events),
        base=base,
        sizes=tuple(e.operand_size for e in events),
    )


def merge_round_robin(logs: Iterable[TraceLog]) -> TraceLog:
    """Deterministically interleave per-thread logs into one trace.

    Takes one event from each input in turn and reassigns the global seq;
    per-thread order is preserved.  module_range is taken from the first
    log.
    """
    logs = list(logs)
    queues = [list(log.events) for log in logs]
    merged: list[AccessEvent] = []
    seq = 0
    while any(queues):
        for queue in queues:
            if queue:
                event = queue.pop(0)
                merged.append(
                    AccessEvent(
                        seq=seq,
                        thread_id=event.thread_id,
                        cpl=event.cpl,
                        kind=event.kind,
                        address=event.address,
                        operand_size=event.operand_size,
                        instr=event.instr,
                        rip=event.rip,
                    )
                )
                seq += 1
    module_range = logs[0].module_range if logs else (0, 0)
    return TraceLog(events=tuple(merged), module_range=module_range)
