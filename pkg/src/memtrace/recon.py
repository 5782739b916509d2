"""Trace analysis: allocations, calling conventions, layouts, call rules.

Consumes TraceLogs to discover allocation base addresses (heap hooks,
pointer-valued call parameters, stack patterns), recover per-call
parameters under the Windows x64 fastcall convention, reconstruct
structure layouts with typed fields, and flag known API-call sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .trace import AccessEvent, TraceLog, split_by_thread

PAGE_SIZE = 4096
SHADOW_SPACE = 0x20
STACK_SLOT_BASE = 0x20  # 5th parameter lives at [RSP+0x20], then +8 per slot
DEFAULT_WINDOW = 0x1000  # monitoring window when the structure size is unknown

# Functions hooked to learn allocation bases and sizes.
USER_ALLOCATORS = frozenset({
    "malloc", "calloc", "realloc",
    "LocalAlloc", "GlobalAlloc", "VirtualAlloc",
    "CreateFileMapping", "MapViewOfFile", "HeapAlloc", "CoTaskMemAlloc",
    "NtAllocateVirtualMemory", "NtAllocateVirtualMemoryEx",
})
KERNEL_ALLOCATORS = frozenset({
    "ExAllocatePool", "ExAllocatePoolWithTag", "ExAllocatePoolWithQuota",
    "MmAllocateContiguousMemory", "MmAllocateNonCachedMemory",
    "MmAllocatePagesForMdl", "MmAllocatePagesForMdlEx",
    "MmAllocateSystemMemory", "MmAllocateContiguousNodeMemory",
    "NtAllocateVirtualMemory", "NtAllocateVirtualMemoryEx",
})
ALLOCATOR_NAMES = USER_ALLOCATORS | KERNEL_ALLOCATORS

AMBIGUITY_NOTE = "adjacent same-size byte arrays cannot be separated"
NO_ACCESS_NOTE = "no accesses observed in window"
CONFLICT_NOTE = "conflicting operand sizes at this offset"
ARRAY_RUN_NOTE = "stride-regular run; possibly a single array"


@dataclass(frozen=True)
class AllocationRecord:
    base: int
    size: int
    source: str  # heap-hook | call-param | stack-pattern
    site_rip: int = 0

    def contains(self, address: int) -> bool:
        if self.size:
            return self.base <= address < self.base + self.size
        return self.base <= address < self.base + DEFAULT_WINDOW


@dataclass(frozen=True)
class CallRecord:
    callee_id: Optional[str]
    reg_params: tuple[int, int, int, int]
    stack_params: tuple[int, ...]
    param_count: int
    return_address: Optional[int]
    pointer_flags: tuple[bool, ...]
    seq: int
    thread_id: int
    rip: int


@dataclass
class FieldRecord:
    offset: int
    size: int
    category: str
    evidence_count: int = 0
    notes: list[str] = field(default_factory=list)


@dataclass
class LayoutRecord:
    base: int
    total_size: int
    fields: list[FieldRecord]


def _call_events(log: TraceLog):
    for event in log.events:
        if event.instr.category in ("call", "api-call", "syscall"):
            yield event


def find_allocations(log: TraceLog,
                     allocator_names: Iterable[str] = ALLOCATOR_NAMES
                     ) -> list[AllocationRecord]:
    """One record per hooked allocator call, with the modeled return base."""
    names = frozenset(allocator_names)
    records = []
    for event in _call_events(log):
        if event.instr.callee_id not in names:
            continue
        if event.instr.value is None:
            continue  # hook saw the call but not the returned base
        args = event.instr.register_args or (0, 0, 0, 0)
        size = args[0]
        if not isinstance(size, int) or size < 0:
            size = 0
        records.append(AllocationRecord(
            base=event.instr.value, size=size, source="heap-hook",
            site_rip=event.rip,
        ))
    return records


def _observed_span(log: TraceLog) -> list[tuple[int, int]]:
    """Page-rounded span of every accessed address; proxy for mapped memory."""
    addresses = [e.address for e in log.events]
    ranges = []
    if addresses:
        lo = min(addresses) // PAGE_SIZE * PAGE_SIZE
        hi = (max(addresses) // PAGE_SIZE + 1) * PAGE_SIZE
        ranges.append((lo, hi))
    lo, hi = log.module_range
    if hi > lo:
        ranges.append((lo, hi))
    return ranges


def _is_pointer_value(value: Optional[int],
                      allocations: Sequence[AllocationRecord],
                      mapped_ranges: Sequence[tuple[int, int]]) -> bool:
    if value is None or value == 0:
        return False
    if any(a.contains(value) for a in allocations):
        return True
    return any(lo <= value < hi for lo, hi in mapped_ranges)


def recover_call(log: TraceLog, call_event: AccessEvent,
                 allocations: Sequence[AllocationRecord] = (),
                 mapped_ranges: Optional[Sequence[tuple[int, int]]] = None
                 ) -> CallRecord:
    """Recover fastcall parameters for one call event.

    The call event is the return-address push, so the pre-call stack
    pointer is its address + 8.  Extra parameters are taken from the most
    recent writes at SP+0x20, SP+0x28, ... before the call in the same
    thread; the scan stops at the first slot with no write.
    """
    if call_event.instr.category not in ("call", "api-call"):
        raise ValueError("not a call event")
    if mapped_ranges is None:
        mapped_ranges = _observed_span(log)
    reg_params = call_event.instr.register_args or (0, 0, 0, 0)
    # Only writes since the previous call in this thread set up this call's
    # stack slots; earlier frames may have left stale values at the same
    # addresses.
    prior: list[AccessEvent] = []
    for e in log.events:
        if e.thread_id != call_event.thread_id or e.seq >= call_event.seq:
            continue
        if e.instr.category in ("call", "api-call"):
            prior.clear()
            continue
        if e.kind == "write":
            prior.append(e)
    sp = call_event.address + 8
    stack_params: list[int] = []
    slot = sp + STACK_SLOT_BASE
    while True:
        writes = [e for e in prior if e.address == slot]
        if not writes:
            break
        stack_params.append(writes[-1].instr.value or 0)
        slot += 8
    if stack_params:
        param_count = 4 + len(stack_params)
    else:
        count = 4
        for value in reversed(reg_params):
            if value:
                break
            count -= 1
        param_count = count
    values = list(reg_params) + stack_params
    flags = tuple(
        _is_pointer_value(v, allocations, mapped_ranges) for v in values
    )
    return CallRecord(
        callee_id=call_event.instr.callee_id,
        reg_params=tuple(reg_params),
        stack_params=tuple(stack_params),
        param_count=param_count,
        return_address=call_event.instr.value,
        pointer_flags=flags,
        seq=call_event.seq,
        thread_id=call_event.thread_id,
        rip=call_event.rip,
    )


def recover_calls(log: TraceLog,
                  allocations: Sequence[AllocationRecord] = ()
                  ) -> list[CallRecord]:
    """CallRecords for every call/api-call event, in seq order."""
    mapped = _observed_span(log)
    return [
        recover_call(log, e, allocations, mapped)
        for e in _call_events(log)
        if e.instr.category in ("call", "api-call")
    ]


def find_stack_buffers(log: TraceLog) -> list[AllocationRecord]:
    """Stack-pattern allocation records from sub-sp amounts and XMM runs.

    A sub of exactly 0x20 immediately before a call is shadow space and
    ignored; larger subs yield a buffer shrunk by the shadow adjustment.
    A maximal run of k consecutive 16-byte-stepped zeroing stores yields
    a 16k-byte buffer at the lowest stored address.
    """
    records = []
    for threads in split_by_thread(log).values():
        for index, event in enumerate(threads):
            if event.instr.category != "sub-sp":
                continue
            amount = event.instr.value or 0
            if amount <= SHADOW_SPACE:
                continue
            records.append(AllocationRecord(
                base=event.address, size=amount - SHADOW_SPACE,
                source="stack-pattern", site_rip=event.rip,
            ))
        index = 0
        while index < len(threads):
            event = threads[index]
            if event.instr.category != "xmm-zero-store":
                index += 1
                continue
            run = 1
            while (index + run < len(threads)
                   and threads[index + run].instr.category == "xmm-zero-store"
                   and threads[index + run].address == event.address + 16 * run):
                run += 1
            records.append(AllocationRecord(
                base=event.address, size=16 * run,
                source="stack-pattern", site_rip=event.rip,
            ))
            index += run
    return records


def collect_bases(log: TraceLog,
                  allocator_names: Iterable[str] = ALLOCATOR_NAMES,
                  mapped_ranges: Optional[Sequence[tuple[int, int]]] = None
                  ) -> list[AllocationRecord]:
    """Merged, deduplicated union of the three base-address sources.

    On a duplicate base the heap-hook record wins: it carries the exact
    size.  Without an explicit mapped-range list, the page-rounded span
    of observed addresses stands in for the guest's mapped memory.
    """
    heap = find_allocations(log, allocator_names)
    if mapped_ranges is None:
        mapped_ranges = _observed_span(log)
    merged: dict[int, AllocationRecord] = {}
    for record in heap:
        merged[record.base] = record
    for call in recover_calls(log, heap):
        for value, is_pointer in zip(
            list(call.reg_params) + list(call.stack_params), call.pointer_flags
        ):
            if not is_pointer or value in merged:
                continue
            merged[value] = AllocationRecord(
                base=value, size=0, source="call-param", site_rip=call.rip,
            )
    for record in find_stack_buffers(log):
        if record.base not in merged:
            merged[record.base] = record
    return sorted(merged.values(), key=lambda r: r.base)


# -- structure layout reconstruction -----------------------------------

_SIGNED = {
    1: "char", 2: "short", 4: "int", 8: "long long",
}
_UNSIGNED = {
    1: "unsigned char", 2: "unsigned short",
    4: "unsigned int", 8: "unsigned long long",
}
_FLOAT = {4: "float", 8: "double"}


def infer_field_type(accesses: Sequence[AccessEvent],
                     allocations: Sequence[AllocationRecord] = (),
                     mapped_ranges: Sequence[tuple[int, int]] = ()
                     ) -> FieldRecord:
    """Assign a primitive category to all accesses at one offset."""
    if not accesses:
        raise ValueError("no accesses")
    offsets = {a.address for a in accesses}
    if len(offsets) != 1:
        raise ValueError("accesses must share one address")
    sizes = {a.operand_size for a in accesses}
    size = max(sizes)
    notes = [CONFLICT_NOTE] if len(sizes) > 1 else []
    is_float = any(a.instr.category == "float-move" for a in accesses)
    signed = not any(a.instr.signedness == "unsigned" for a in accesses)
    if size > 8:
        category = "char-array"
    elif is_float and size in _FLOAT:
        category = _FLOAT[size]
    elif size == 8 and any(
        _is_pointer_value(a.instr.value, allocations, mapped_ranges)
        for a in accesses
    ):
        category = "pointer"
    else:
        category = (_SIGNED if signed else _UNSIGNED)[size]
    record = FieldRecord(offset=accesses[0].address, size=size,
                         category=category, evidence_count=len(accesses))
    record.notes.extend(notes)
    return record


def reconstruct_layout(log: TraceLog, base: int,
                       size_hint: Optional[int] = None,
                       allocations: Optional[Sequence[AllocationRecord]] = None
                       ) -> LayoutRecord:
    """Two-phase layout reconstruction over [base, base + window).

    Phase 1 groups in-module read/write accesses by offset from the base;
    phase 2 types each offset.  Untouched ranges become char arrays, and
    adjacent byte-granular evidence is merged into a single char array
    with an ambiguity note, since consecutive same-size byte arrays are
    indistinguishable from one.
    """
    window = size_hint or DEFAULT_WINDOW
    if allocations is None:
        allocations = find_allocations(log)
    mapped = _observed_span(log)
    lo, hi = log.module_range
    in_module = lambda rip: lo <= rip < hi if hi > lo else True
    by_offset: dict[int, list[AccessEvent]] = {}
    for event in log.events:
        if event.kind not in ("read", "write"):
            continue
        if not in_module(event.rip):
            continue  # heap-manager style noise
        if not base <= event.address < base + window:
            continue
        by_offset.setdefault(event.address - base, []).append(event)

    if not by_offset:
        gap = FieldRecord(offset=0, size=window, category="char-array")
        gap.notes.append(NO_ACCESS_NOTE)
        return LayoutRecord(base=base, total_size=window, fields=[gap])

    typed: list[FieldRecord] = []
    end = 0
    for offset in sorted(by_offset):
        record = infer_field_type(by_offset[offset], allocations, mapped)
        record.offset = offset
        if offset < end:
            # Access inside an already-typed extent: fold into evidence.
            typed[-1].evidence_count += record.evidence_count
            if CONFLICT_NOTE not in typed[-1].notes:
                typed[-1].notes.append(CONFLICT_NOTE)
            continue
        if record.offset + record.size > window:
            record.size = window - record.offset
            record.category = "char-array"
        typed.append(record)
        end = record.offset + record.size

    fields = _merge_byte_runs(typed)
    fields = _fill_gaps(fields, window)
    _note_stride_runs(fields)
    return LayoutRecord(base=base, total_size=window, fields=fields)


def _merge_byte_runs(typed: list[FieldRecord]) -> list[FieldRecord]:
    """Merge contiguous 1-byte evidence into one ambiguous char array."""
    merged: list[FieldRecord] = []
    index = 0
    while index < len(typed):
        record = typed[index]
        if record.size == 1 and record.category in ("char", "unsigned char"):
            run = [record]
            while (index + len(run) < len(typed)
                   and typed[index + len(run)].size == 1
                   and typed[index + len(run)].category in ("char", "unsigned char")
                   and typed[index + len(run)].offset == record.offset + len(run)):
                run.append(typed[index + len(run)])
            if len(run) > 1:
                array = FieldRecord(
                    offset=record.offset, size=len(run), category="char-array",
                    evidence_count=sum(r.evidence_count for r in run),
                )
                array.notes.append(AMBIGUITY_NOTE)
                merged.append(array)
                index += len(run)
                continue
        merged.append(record)
        index += 1
    return merged


def _fill_gaps(fields: list[FieldRecord], window: int) -> list[FieldRecord]:
    """Materialize untouched ranges as char-array fields."""
    out: list[FieldRecord] = []
    cursor = 0
    for record in fields:
        if record.offset > cursor:
            out.append(FieldRecord(offset=cursor, size=record.offset - cursor,
                                   category="char-array"))
        out.append(record)
        cursor = record.offset + record.size
    if cursor < window:
        out.append(FieldRecord(offset=cursor, size=window - cursor,
                               category="char-array"))
    return out


def _note_stride_runs(fields: list[FieldRecord]) -> None:
    """Flag >=3 equally-spaced same-size same-category fields as array-like."""
    index = 0
    while index < len(fields):
        record = fields[index]
        run = 1
        while (index + run < len(fields)
               and fields[index + run].size == record.size
               and fields[index + run].category == record.category
               and record.category != "char-array"
               and fields[index + run].offset
               == record.offset + run * record.size):
            run += 1
        if run >= 3:
            for member in fields[index:index + run]:
                if ARRAY_RUN_NOTE not in member.notes:
                    member.notes.append(ARRAY_RUN_NOTE)
        index += run


_C_TYPES = {
    "char": "char", "unsigned char": "unsigned char",
    "short": "short", "unsigned short": "unsigned short",
    "int": "int", "unsigned int": "unsigned int",
    "long long": "long long", "unsigned long long": "unsigned long long",
    "float": "float", "double": "double", "pointer": "void *",
}


def render_layout_c(layout: LayoutRecord) -> str:
    """C-like rendering of a reconstructed layout for human review."""
    lines = [f"struct reconstructed_0x{layout.base:x} {{"
             f"  /* total size 0x{layout.total_size:x} */"]
    for record in layout.fields:
        note = f"  /* {'; '.join(record.notes)} */" if record.notes else ""
        if record.category == "char-array":
            decl = f"    char field_0x{record.offset:x}[{record.size}];"
        else:
            decl = f"    {_C_TYPES[record.category]} field_0x{record.offset:x};"
        lines.append(decl + note)
    lines.append("};")
    return "\n".join(lines)


# -- API-call sequence rules -------------------------------------------

# Ordered callee-id sequences for evasive techniques; each step is a
# name or a set of alternatives.
EVASIVE_SEQUENCES: list[tuple[str, list]] = [
    ("Early Bird APC Code Injection",
     ["CreateProcessA", "WriteProcessMemory", "QueueUserAPC", "ResumeThread"]),
    ("Process Injection",
     ["OpenProcess", "VirtualAllocEx", "WriteProcessMemory",
      ("CreateRemoteThread", "NtCreateThreadEx", "RtlCreateUserThread")]),
    ("Load PE From Resource",
     ["FindResource", "SizeofResource", "LoadResource", "VirtualAlloc"]),
    ("Module Execution Through Fibers",
     ["ConvertThreadToFiber", "VirtualAlloc", "CreateFiber"]),
    ("Module Execution Through Thread Pool",
     ["CreateEvent", "VirtualAlloc", "CreateThreadpoolWait",
      "SetThreadpoolWait"]),
    ("Window Hooking",
     ["LoadLibraryA", "GetProcAddress", "SetWindowsHookEx"]),
    ("Map View of Section",
     ["NtCreateSection", "NtMapViewOfSection", "RtlCreateUserThread"]),
]


@dataclass(frozen=True)
class RuleHit:
    rule: str
    thread_id: int
    first_seq: int
    last_seq: int


def _step_matches(step, callee: Optional[str]) -> bool:
    if callee is None:
        return False
    if isinstance(step, str):
        return callee == step
    return callee in step


def flag_call_sequences(calls: Sequence[CallRecord],
                        rules: Sequence[tuple[str, list]] = EVASIVE_SEQUENCES
                        ) -> list[RuleHit]:
    """A rule hits when its callee ids appear as an ordered (not
    necessarily contiguous) subsequence within one thread's calls."""
    by_thread: dict[int, list[CallRecord]] = {}
    for call in sorted(calls, key=lambda c: c.seq):
        by_thread.setdefault(call.thread_id, []).append(call)
    hits = []
    for name, steps in rules:
        for tid, thread_calls in sorted(by_thread.items()):
            position = 0
            first_seq = None
            for call in thread_calls:
                if _step_matches(steps[position], call.callee_id):
                    if position == 0:
                        first_seq = call.seq
                    position += 1
                    if position == len(steps):
                        hits.append(RuleHit(rule=name, thread_id=tid,
                                            first_seq=first_seq,
                                            last_seq=call.seq))
                        position = 0
                        first_seq = None
    return hits
