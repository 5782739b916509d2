"""Shared generators and independent oracles used across the test suite."""

from __future__ import annotations

import random

from memtrace.guest import (
    INSTR_STRIDE,
    ModelOp,
    ProgramModel,
    build_guest,
    run,
)
from memtrace.trace import AccessEvent, InstrDescriptor, TraceLog

MODULE_PAGE = 0x401
SP_INIT = 0x7FF000
SCRATCH = [(0x3000, 0x8000)]

CATS_PLAIN = ["int-move", "float-move", "push", "other"]


def make_model(ops, *, entry_page=MODULE_PAGE, sp_init=SP_INIT, mapped=None,
               tid=0, cpl="user", entry_present=True, module_range=None):
    return ProgramModel(
        ops=ops, entry_page=entry_page, sp_init=sp_init,
        mapped=mapped if mapped is not None else list(SCRATCH),
        tid=tid, cpl=cpl, entry_present=entry_present,
        module_range=module_range,
    )


def run_model(model, trap_config=None):
    return run(build_guest(model), model, trap_config)


# -- random traces ------------------------------------------------------


def random_event(rng: random.Random, seq: int) -> AccessEvent:
    kind = rng.choice(["read", "write", "execute"])
    cat = "other"
    size = 1
    callee = None
    args = None
    value = rng.randrange(1 << 32) if rng.random() < 0.5 else None
    if kind != "execute":
        cat = rng.choice(["int-move", "float-move", "xmm-zero-store",
                          "push", "sub-sp", "other"])
        if cat == "float-move":
            size = rng.choice([4, 8])
        elif cat == "xmm-zero-store":
            size = 16
        else:
            size = rng.choice([1, 2, 4, 8])
    elif rng.random() < 0.3:
        cat = rng.choice(["call", "api-call"])
        callee = rng.choice(["Foo", "Bar", "NtAllocateVirtualMemory"])
        if cat in ("call", "api-call"):
            args = tuple(rng.randrange(1 << 16) for _ in range(4))
    instr = InstrDescriptor(
        category=cat,
        signedness=rng.choice(["signed", "unsigned", "n/a"]),
        callee_id=callee,
        register_args=args,
        value=value,
    )
    return AccessEvent(
        seq=seq,
        thread_id=rng.randrange(4),
        cpl=rng.choice(["user", "kernel"]),
        kind=kind,
        address=rng.randrange(1 << 40),
        operand_size=size,
        instr=instr,
        rip=rng.randrange(1 << 40),
    )


def random_log(rng: random.Random, n_events: int) -> TraceLog:
    seq = 0
    events = []
    for _ in range(n_events):
        seq += rng.randrange(1, 4)
        events.append(random_event(rng, seq))
    lo = rng.randrange(1 << 30)
    return TraceLog(events=tuple(events), module_range=(lo, lo + (1 << 20)))


# -- straight-line reference interpreter -------------------------------


def reference_interpret(model: ProgramModel):
    """Log every monitored access of a model without any EPT machinery.

    Returns (kind, address, size, cpl, category, value) tuples in program
    order; transition markers appear as execute/other tuples at fetches
    following a mode switch.
    """
    out = []
    sp = model.sp_init
    rip = model.entry_address
    mode = model.cpl
    last_reported = mode
    alloc_cursor = 0x9000
    for op in model.ops:
        if op.rip is not None:
            rip = op.rip
        if mode != last_reported:
            out.append(("execute", rip, 1, mode, "other", None))
            last_reported = mode
        if op.op == "mov-read":
            size = op.size or 8
            out.append(("read", op.addr, size, mode, op.cat or "int-move", None))
        elif op.op == "mov-write":
            size = op.size or 8
            out.append(("write", op.addr, size, mode, op.cat or "int-move",
                        op.value or 0))
        elif op.op == "push":
            sp -= 8
            out.append(("write", sp, 8, mode, "push", op.value or 0))
        elif op.op == "sub-sp":
            sp -= op.amount or 0
            out.append(("write", sp, 8, mode, "sub-sp", op.amount or 0))
        elif op.op == "call":
            args = list(op.args or [])
            stack_args = args[4:] or [0] * op.n_stack
            for k, value in enumerate(stack_args):
                out.append(("write", sp + 0x20 + 8 * k, 8, mode, "int-move",
                            value))
            sp -= 8
            out.append(("write", sp, 8, mode, "call", rip + INSTR_STRIDE))
        elif op.op == "alloc":
            size = op.size or 0
            npages = max((size + 4095) // 4096, 1)
            out.append(("execute", rip, 1, mode, "api-call", alloc_cursor))
            alloc_cursor += npages * 4096
        elif op.op == "xmm-zero":
            out.append(("write", op.addr, 16, mode, "xmm-zero-store", 0))
        elif op.op == "ret":
            sp += 8
        elif op.op == "mode-switch":
            mode = op.cpl or ("kernel" if mode == "user" else "user")
        rip += INSTR_STRIDE
    return out


def event_tuples(log: TraceLog):
    # Read values come from simulated memory contents, which the
    # straight-line reference does not model; compare them as None.
    return [
        (e.kind, e.address, e.operand_size, e.cpl, e.instr.category,
         None if e.kind == "read" else e.instr.value)
        for e in log.events
    ]


# -- brute-force LCMAP oracle ------------------------------------------


def brute_lcmap(p, q, tau):
    """Enumerate all contiguous run endpoints; returns (length, end_index).

    Independent of the dynamic program: for every endpoint pair the run
    length is recomputed by walking backwards under the near predicate.
    """
    best_len = 0
    lengths = {}
    for i in range(len(p)):
        for j in range(len(q)):
            length = 0
            while (i - length >= 0 and j - length >= 0
                   and abs(p[i - length] - q[j - length]) <= tau):
                length += 1
            lengths[(i, j)] = length
            best_len = max(best_len, length)
    if best_len == 0:
        return 0, -1
    best_end = min(i for (i, j), l in lengths.items() if l == best_len)
    return best_len, best_end


def random_pattern_pair(rng: random.Random, max_len=32, max_offset=1 << 16):
    """Half the time unrelated patterns, half the time a shared core with
    noise, so long common runs actually occur."""
    m = rng.randrange(0, max_len + 1)
    n = rng.randrange(0, max_len + 1)
    p = [rng.randrange(max_offset) for _ in range(m)]
    if rng.random() < 0.5:
        q = [rng.randrange(max_offset) for _ in range(n)]
    else:
        core_len = rng.randrange(0, min(m, max_len // 2) + 1)
        start = rng.randrange(0, m - core_len + 1) if m else 0
        core = [x + rng.randrange(-3, 4) for x in p[start:start + core_len]]
        prefix = [rng.randrange(max_offset) for _ in range(rng.randrange(0, 5))]
        suffix = [rng.randrange(max_offset) for _ in range(rng.randrange(0, 5))]
        q = prefix + core + suffix
    return p, q
