"""Simulated guest with switchable EPT permission profiles.

Models a single-vCPU guest: paged memory with per-page permissions, four
permission profiles with mode-based execution control (MBEC) semantics,
hidden hooks (execute-allowed / read-denied pages), demand paging via
injected page faults, and lazy entry-point capture.  Abstract program
models are interpreted against this state and every access is funneled
through the permission check, emitting AccessEvents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator, Optional, Union

from .trace import (
    AccessEvent,
    InstrDescriptor,
    TraceLog,
    _hex,
    _parse_addr,
)

PAGE_SIZE = 4096
PROFILE_IDS = ("normal", "user-exec-denied", "kernel-exec-denied", "execute-only")

DEFAULT_ALLOC_BASE = 0x9000
DEFAULT_STACK_GUARD = 0x10000
INSTR_STRIDE = 4  # modeled instruction length; rip advances by this per op


class SimulationError(RuntimeError):
    """The model referenced an address that is neither mapped nor allocatable."""


class ModelParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class PagePerms:
    read: bool = True
    write: bool = True
    exec_user: bool = True
    exec_kernel: bool = True
    present: bool = True
    hidden_hook: bool = False


@dataclass
class EptProfile:
    """A permission profile over guest pages, with per-page overrides."""

    id: str
    overrides: dict[int, PagePerms] = field(default_factory=dict)

    def __post_init__(self):
        if self.id not in PROFILE_IDS:
            raise ValueError(f"unknown profile id {self.id!r}")


@dataclass(frozen=True)
class Allowed:
    pass


@dataclass(frozen=True)
class PageFault:
    address: int


@dataclass(frozen=True)
class Violation:
    address: int
    kind: str
    cpl: str
    profile: str
    rip: int


class _Page:
    __slots__ = ("perms", "content", "pristine")

    def __init__(self, perms: Optional[PagePerms] = None):
        self.perms = perms or PagePerms()
        self.content = bytearray(PAGE_SIZE)
        self.pristine: Optional[bytearray] = None  # set while hooked


class Guest:
    """Single-vCPU guest memory state.

    Never share a Guest mutably between threads; run one model per Guest
    and merge the resulting traces.
    """

    def __init__(self, alloc_base: int = DEFAULT_ALLOC_BASE):
        self.pages: dict[int, _Page] = {}
        self.profiles: dict[str, EptProfile] = {
            pid: EptProfile(pid) for pid in PROFILE_IDS
        }
        self.active_profile = "normal"
        self.mode = "user"
        self._alloc_cursor = alloc_base
        self._reserved: list[tuple[int, int]] = []  # allocated but not yet present

    # -- memory layout -------------------------------------------------

    def map_range(self, lo: int, hi: int, perms: Optional[PagePerms] = None) -> None:
        for page in range(lo // PAGE_SIZE, (hi + PAGE_SIZE - 1) // PAGE_SIZE):
            if page not in self.pages:
                self.pages[page] = _Page(replace(perms) if perms else None)

    def allocate(self, size: int) -> int:
        """Reserve a demand-paged buffer; pages appear on first fault."""
        size = max(int(size), 1)
        base = self._alloc_cursor
        npages = (size + PAGE_SIZE - 1) // PAGE_SIZE
        self._alloc_cursor = base + npages * PAGE_SIZE
        self._reserved.append((base, base + npages * PAGE_SIZE))
        return base

    def is_allocatable(self, address: int) -> bool:
        return any(lo <= address < hi for lo, hi in self._reserved)

    def page_present(self, address: int) -> bool:
        page = self.pages.get(address // PAGE_SIZE)
        return page is not None and page.perms.present

    # -- permission semantics ------------------------------------------

    def check_access(self, address: int, kind: str, cpl: str, rip: int = 0):
        """Pure permission decision: Allowed, Violation, or PageFault.

        Not-present pages yield a PageFault outcome, distinct from a
        permission Violation.
        """
        if address < 0 or address >= 1 << 48:
            raise ValueError("address outside 48-bit canonical range")
        page = self.pages.get(address // PAGE_SIZE)
        if page is None or not page.perms.present:
            return PageFault(address)
        profile = self.profiles[self.active_profile]
        perms = page.perms
        if perms.hidden_hook:
            # Hooked bytes execute; reads trap and are served pristine.
            if kind == "execute":
                return Allowed()
            if kind == "read":
                return Violation(address, kind, cpl, profile.id, rip)
        override = profile.overrides.get(address // PAGE_SIZE)
        if override is not None:
            allowed = _perm_lookup(override, kind, cpl)
        elif profile.id == "normal":
            allowed = _perm_lookup(perms, kind, cpl)
        elif profile.id == "user-exec-denied":
            allowed = not (kind == "execute" and cpl == "user")
        elif profile.id == "kernel-exec-denied":
            allowed = not (kind == "execute" and cpl == "kernel")
        else:  # execute-only
            allowed = kind == "execute"
        if allowed:
            return Allowed()
        return Violation(address, kind, cpl, profile.id, rip)

    def switch_profile(self, profile_id: str) -> None:
        if profile_id not in self.profiles:
            raise ValueError(f"unknown profile id {profile_id!r}")
        self.active_profile = profile_id

    # -- hooks and faults ----------------------------------------------

    def install_hidden_hook(self, address: int, hooked_bytes: bytes) -> None:
        page = self.pages.get(address // PAGE_SIZE)
        if page is None or not page.perms.present:
            raise SimulationError(f"cannot hook non-present page at {_hex(address)}")
        if page.pristine is None:
            page.pristine = bytearray(page.content)
        offset = address % PAGE_SIZE
        page.content[offset : offset + len(hooked_bytes)] = hooked_bytes
        page.perms.hidden_hook = True

    def remove_hidden_hook(self, address: int) -> None:
        page = self.pages.get(address // PAGE_SIZE)
        if page is None or not page.perms.hidden_hook:
            return
        page.content = bytearray(page.pristine)
        page.pristine = None
        page.perms.hidden_hook = False

    def inject_page_fault(self, address: int) -> str:
        """Materialize a demand-zero page; 'injected' or 'already-present'."""
        number = address // PAGE_SIZE
        page = self.pages.get(number)
        if page is not None and page.perms.present:
            return "already-present"
        self.pages[number] = _Page()
        return "injected"

    # -- content access ------------------------------------------------

    def read_memory(self, address: int, size: int) -> bytes:
        """Read bytes, serving the pristine view on hidden-hook pages."""
        out = bytearray()
        for offset in range(size):
            addr = address + offset
            page = self.pages.get(addr // PAGE_SIZE)
            if page is None:
                raise SimulationError(f"read from unmapped {_hex(addr)}")
            source = page.pristine if page.perms.hidden_hook else page.content
            out.append(source[addr % PAGE_SIZE])
        return bytes(out)

    def fetch_memory(self, address: int, size: int) -> bytes:
        """Read bytes as the interpreter sees them (hooked content)."""
        out = bytearray()
        for offset in range(size):
            addr = address + offset
            page = self.pages.get(addr // PAGE_SIZE)
            if page is None:
                raise SimulationError(f"fetch from unmapped {_hex(addr)}")
            out.append(page.content[addr % PAGE_SIZE])
        return bytes(out)

    def write_memory(self, address: int, data: bytes) -> None:
        for offset, byte in enumerate(data):
            addr = address + offset
            page = self.pages.get(addr // PAGE_SIZE)
            if page is None:
                raise SimulationError(f"write to unmapped {_hex(addr)}")
            page.content[addr % PAGE_SIZE] = byte
            if page.pristine is not None and not page.perms.hidden_hook:
                page.pristine[addr % PAGE_SIZE] = byte


def _perm_lookup(perms: PagePerms, kind: str, cpl: str) -> bool:
    if kind == "read":
        return perms.read
    if kind == "write":
        return perms.write
    return perms.exec_user if cpl == "user" else perms.exec_kernel


# -- program models -----------------------------------------------------

MODEL_OPS = (
    "mov-read",
    "mov-write",
    "push",
    "call",
    "sub-sp",
    "xmm-zero",
    "alloc",
    "ret",
    "mode-switch",
    "nop",
)


@dataclass
class ModelOp:
    op: str
    addr: Optional[int] = None
    size: Optional[int] = None
    value: Optional[int] = None
    callee: Optional[str] = None
    args: Optional[list[int]] = None
    n_stack: int = 0
    amount: Optional[int] = None
    cpl: Optional[str] = None
    cat: Optional[str] = None
    sign: Optional[str] = None
    rip: Optional[int] = None  # optional override of the modeled rip

    def __post_init__(self):
        if self.op not in MODEL_OPS:
            raise ValueError(f"unknown model op {self.op!r}")


@dataclass
class ProgramModel:
    """Deterministic abstract stand-in for a guest binary."""

    ops: list[ModelOp]
    entry_page: int
    sp_init: int
    tid: int = 0
    cpl: str = "user"
    entry_present: bool = True
    mapped: list[tuple[int, int]] = field(default_factory=list)
    module_range: Optional[tuple[int, int]] = None

    @property
    def entry_address(self) -> int:
        return self.entry_page * PAGE_SIZE

    def resolved_module_range(self) -> tuple[int, int]:
        if self.module_range is not None:
            return tuple(self.module_range)
        lo = self.entry_address
        span = max(len(self.ops) * INSTR_STRIDE, 1)
        hi = lo + ((span + PAGE_SIZE - 1) // PAGE_SIZE) * PAGE_SIZE
        return (lo, hi)


_OP_INT_KEYS = ("addr", "size", "value", "n_stack", "amount", "rip")


def parse_model(stream: Union[bytes, str, IO, Iterable[str]]) -> ProgramModel:
    """Parse a line-delimited program model (header line + one op per line)."""
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        lines: Iterable[str] = stream.splitlines()
    else:
        lines = (
            line.decode("utf-8") if isinstance(line, bytes) else line
            for line in stream
        )
    header = None
    ops: list[ModelOp] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ModelParseError(lineno, f"invalid JSON: {exc.msg}") from exc
        if header is None:
            if not isinstance(record, dict) or "entry_page" not in record:
                raise ModelParseError(lineno, "first line must carry entry_page")
            header = record
            continue
        if "op" not in record:
            raise ModelParseError(lineno, "missing op")
        try:
            kwargs = {"op": record["op"]}
            for key in _OP_INT_KEYS:
                if record.get(key) is not None:
                    raw = record[key]
                    kwargs[key] = _parse_addr(raw) if isinstance(raw, str) else int(raw)
            for key in ("callee", "cpl", "cat", "sign"):
                if record.get(key) is not None:
                    kwargs[key] = record[key]
            if record.get("args") is not None:
                kwargs["args"] = [
                    _parse_addr(a) if isinstance(a, str) else int(a)
                    for a in record["args"]
                ]
            ops.append(ModelOp(**kwargs))
        except (TypeError, ValueError) as exc:
            raise ModelParseError(lineno, str(exc)) from exc
    if header is None:
        raise ModelParseError(1, "empty model file (missing header)")
    try:
        sp_init = header["sp_init"]
        sp_init = _parse_addr(sp_init) if isinstance(sp_init, str) else int(sp_init)
        mapped = [
            (
                _parse_addr(lo) if isinstance(lo, str) else int(lo),
                _parse_addr(hi) if isinstance(hi, str) else int(hi),
            )
            for lo, hi in header.get("mapped", [])
        ]
        module_range = None
        if header.get("module_range") is not None:
            rng = header["module_range"]
            module_range = (_parse_addr(rng["lo"]), _parse_addr(rng["hi"]))
        return ProgramModel(
            ops=ops,
            entry_page=int(header["entry_page"]),
            sp_init=sp_init,
            tid=int(header.get("tid", 0)),
            cpl=header.get("cpl", "user"),
            entry_present=bool(header.get("entry_present", True)),
            mapped=mapped,
            module_range=module_range,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelParseError(1, f"bad header: {exc}") from exc


def serialize_model(model: ProgramModel) -> bytes:
    header: dict = {
        "entry_page": model.entry_page,
        "sp_init": _hex(model.sp_init),
        "tid": model.tid,
        "cpl": model.cpl,
        "entry_present": model.entry_present,
    }
    if model.mapped:
        header["mapped"] = [[_hex(lo), _hex(hi)] for lo, hi in model.mapped]
    if model.module_range is not None:
        header["module_range"] = {
            "lo": _hex(model.module_range[0]),
            "hi": _hex(model.module_range[1]),
        }
    lines = [json.dumps(header)]
    for op in model.ops:
        record: dict = {"op": op.op}
        for key in ("addr", "value", "rip"):
            val = getattr(op, key)
            if val is not None:
                record[key] = _hex(val)
        for key in ("size", "amount", "callee", "cpl", "cat", "sign"):
            val = getattr(op, key)
            if val is not None:
                record[key] = val
        if op.args is not None:
            record["args"] = list(op.args)
        if op.n_stack:
            record["n_stack"] = op.n_stack
        lines.append(json.dumps(record))
    return ("\n".join(lines) + "\n").encode("utf-8")


def build_guest(model: ProgramModel) -> Guest:
    """Prepare a Guest matching the model's static layout."""
    guest = Guest()
    guest.mode = model.cpl
    lo, hi = model.resolved_module_range()
    guest.map_range(lo, hi)
    if not model.entry_present:
        entry = guest.pages.get(model.entry_page)
        if entry is not None:
            entry.perms.present = False
    guest.map_range(model.sp_init - DEFAULT_STACK_GUARD, model.sp_init + DEFAULT_STACK_GUARD)
    for mlo, mhi in model.mapped:
        guest.map_range(mlo, mhi)
    return guest


# -- trap configuration and interpreter --------------------------------


@dataclass
class TrapConfig:
    """Selects which accesses are monitored and how transitions are caught."""

    monitor_kinds: frozenset = frozenset({"read", "write"})
    monitor_pages: Optional[frozenset] = None  # None = all pages
    transition_mode: Optional[str] = "mbec"  # "mbec" | "legacy" | None
    capture_entry: bool = False


class _Emitter:
    def __init__(self, tid: int):
        self.tid = tid
        self.events: list[AccessEvent] = []
        self._seq = 0

    def emit(self, kind, address, size, cpl, rip, cat="other", sign="n/a",
             callee=None, args=None, value=None):
        instr = InstrDescriptor(
            category=cat,
            signedness=sign,
            callee_id=callee,
            register_args=tuple(args) if args is not None else None,
            value=value,
        )
        self.events.append(
            AccessEvent(
                seq=self._seq,
                thread_id=self.tid,
                cpl=cpl,
                kind=kind,
                address=address,
                operand_size=size,
                instr=instr,
                rip=rip,
            )
        )
        self._seq += 1


def run(guest: Guest, model: ProgramModel,
        trap_config: Optional[TrapConfig] = None) -> TraceLog:
    """Interpret the model against the guest and return the trace."""
    log, _ = _run(guest, model, trap_config or TrapConfig())
    return log


def capture_entry_point(guest: Guest, model: ProgramModel,
                        trap_config: Optional[TrapConfig] = None):
    """Run with lazy entry capture; return (entry_address, trace prefix).

    Execute permission on the entry page is revoked up front; the first
    fetch on it surfaces as a Violation whose rip is the entry address.
    If the page is absent a page fault is injected first, then execute
    permission is restored and the run continues.
    """
    cfg = trap_config or TrapConfig()
    cfg = replace(cfg, capture_entry=True)
    log, entry_address = _run(guest, model, cfg)
    if entry_address is None:
        raise SimulationError("model exhausted before executing the entry page")
    prefix_end = next(
        i for i, e in enumerate(log.events)
        if e.kind == "execute" and e.address == entry_address
    )
    prefix = TraceLog(events=log.events[: prefix_end + 1],
                      module_range=log.module_range)
    return entry_address, prefix


def legacy_transition_detect(guest: Guest, model: ProgramModel) -> list[tuple[int, str]]:
    """Report mode transitions via the legacy U/S-bit page-fault path.

    Requires no MBEC support: while the page tables advertise the last
    known mode, a fetch in the other mode raises a page fault that the
    monitor intercepts and turns into a transition report.
    """
    log = run(guest, model, TrapConfig(transition_mode="legacy"))
    return transitions(log)


def transitions(log: TraceLog) -> list[tuple[int, str]]:
    """Extract (seq, mode) transition reports from a detection-mode trace."""
    return [
        (e.seq, e.cpl)
        for e in log.events
        if e.kind == "execute" and e.instr.category == "other"
    ]


def _run(guest: Guest, model: ProgramModel, cfg: TrapConfig):
    emitter = _Emitter(model.tid)
    module_range = model.resolved_module_range()
    sp = model.sp_init
    rip = model.entry_address
    last_mode = guest.mode
    entry_address = None
    entry_pending = cfg.capture_entry
    if entry_pending:
        # Step 1 of lazy capture: revoke execute on the entry page.
        page = guest.pages.get(model.entry_page)
        if page is not None:
            page.perms.exec_user = False
            page.perms.exec_kernel = False

    def monitored(address: int) -> bool:
        return cfg.monitor_pages is None or address // PAGE_SIZE in cfg.monitor_pages

    def demand_page(address: int, size: int, lazy_code: bool = False) -> None:
        for page in range(address // PAGE_SIZE, (address + size - 1) // PAGE_SIZE + 1):
            addr = page * PAGE_SIZE
            if guest.page_present(addr):
                continue
            if not (lazy_code or guest.is_allocatable(addr)
                    or page == model.entry_page):
                raise SimulationError(
                    f"access to unmapped, un-allocatable address {_hex(address)}"
                )
            was_absent_entry = entry_pending and page == model.entry_page
            guest.inject_page_fault(addr)
            if was_absent_entry:
                # Demand-zeroed entry page still has execute revoked.
                perms = guest.pages[page].perms
                perms.exec_user = False
                perms.exec_kernel = False
            emitter.emit("read", address if page == address // PAGE_SIZE else addr,
                         1, guest.mode, rip, cat="other")

    def data_access(kind, address, size, cat, sign="n/a", callee=None,
                    args=None, value=None):
        demand_page(address, size)
        outcome = guest.check_access(address, kind, guest.mode, rip)
        if isinstance(outcome, Violation) or (
            monitored(address) and kind in cfg.monitor_kinds
        ):
            emitter.emit(kind, address, size, guest.mode, rip, cat=cat,
                         sign=sign, callee=callee, args=args, value=value)

    for op in model.ops:
        if op.rip is not None:
            rip = op.rip
        # Instruction fetch: demand paging, entry capture, transition trap.
        fetch = guest.check_access(rip, "execute", guest.mode, rip)
        if isinstance(fetch, PageFault):
            demand_page(rip, 1, lazy_code=True)
            fetch = guest.check_access(rip, "execute", guest.mode, rip)
        if isinstance(fetch, Violation):
            if entry_pending and rip // PAGE_SIZE == model.entry_page:
                # Log the entry first, then restore the revoked permission.
                emitter.emit("execute", rip, 1, guest.mode, rip, cat="other")
                perms = guest.pages[model.entry_page].perms
                perms.exec_user = True
                perms.exec_kernel = True
                entry_address = rip
                entry_pending = False
        if cfg.transition_mode == "mbec" and guest.mode != last_mode:
            # The EPT denying the previous mode's opposite is active; this
            # fetch raises an EPT violation that marks the transition.
            previous = guest.active_profile
            guest.switch_profile(
                "user-exec-denied" if last_mode == "kernel" else "kernel-exec-denied"
            )
            outcome = guest.check_access(rip, "execute", guest.mode, rip)
            guest.switch_profile(previous)
            if isinstance(outcome, Violation):
                emitter.emit("execute", rip, 1, guest.mode, rip, cat="other")
            last_mode = guest.mode
        elif cfg.transition_mode == "legacy" and guest.mode != last_mode:
            # U/S-bit mismatch: the fetch page-faults, the monitor
            # intercepts and swallows the fault, and reports the switch.
            emitter.emit("execute", rip, 1, guest.mode, rip, cat="other")
            last_mode = guest.mode

        if op.op == "mov-read":
            size = op.size or 8
            demand_page(op.addr, size)
            value = int.from_bytes(guest.read_memory(op.addr, size), "little")
            data_access("read", op.addr, size, op.cat or "int-move",
                        sign=op.sign or "n/a", value=value)
        elif op.op == "mov-write":
            size = op.size or 8
            value = op.value or 0
            data_access("write", op.addr, size, op.cat or "int-move",
                        sign=op.sign or "n/a", value=value)
            guest.write_memory(op.addr, (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little"))
        elif op.op == "push":
            sp -= 8
            value = op.value or 0
            data_access("write", sp, 8, "push", value=value)
            guest.write_memory(sp, (value & ((1 << 64) - 1)).to_bytes(8, "little"))
        elif op.op == "sub-sp":
            amount = op.amount or 0
            sp -= amount
            data_access("write", sp, 8, "sub-sp", value=amount)
        elif op.op == "call":
            args = list(op.args or [])
            stack_args = args[4:]
            if not stack_args and op.n_stack:
                stack_args = [0] * op.n_stack
            for index, value in enumerate(stack_args):
                slot = sp + 0x20 + 8 * index
                data_access("write", slot, 8, "int-move", value=value)
                guest.write_memory(slot, (value & ((1 << 64) - 1)).to_bytes(8, "little"))
            reg_args = (args[:4] + [0, 0, 0, 0])[:4]
            sp -= 8
            return_address = rip + INSTR_STRIDE
            data_access("write", sp, 8, "call", callee=op.callee,
                        args=reg_args, value=return_address)
            guest.write_memory(sp, return_address.to_bytes(8, "little"))
        elif op.op == "alloc":
            size = op.size or 0
            base = guest.allocate(size)
            # Hidden hook on the allocator: the call and its modeled
            # return value surface as one api-call event (size in the
            # first register slot, returned base in the value channel).
            emitter.emit("execute", rip, 1, guest.mode, rip, cat="api-call",
                         callee=op.callee or "NtAllocateVirtualMemory",
                         args=[size, 0, 0, 0], value=base)
        elif op.op == "xmm-zero":
            data_access("write", op.addr, 16, "xmm-zero-store", value=0)
            guest.write_memory(op.addr, bytes(16))
        elif op.op == "ret":
            sp += 8
        elif op.op == "mode-switch":
            guest.mode = op.cpl or ("kernel" if guest.mode == "user" else "user")
        elif op.op == "nop":
            pass
        rip += INSTR_STRIDE

    log = TraceLog(events=tuple(emitter.events), module_range=module_range)
    return log, entry_address
