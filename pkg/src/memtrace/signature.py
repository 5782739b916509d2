"""Memory-address-pattern signatures: extraction, matching, diffing.

The core matcher finds the longest contiguous run of two offset
sequences whose elements pairwise differ by at most an alignment
threshold tau, by dynamic programming.  On top of it sit a normalized
similarity score and a greedy recursive diff that localizes source-level
modifications between near-identical patterns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .trace import AccessEvent, AddressPattern, TraceLog, _hex, _parse_addr
from .recon import AllocationRecord

DEFAULT_TAU = 100
DEFAULT_MATCH_THRESHOLD = 0.8
DEFAULT_MIN_RUN = 2  # shortest diff run worth calling a match


class NotSimilarError(ValueError):
    """diff_modified was asked to diff patterns below the match threshold."""

    def __init__(self, ratio: float, threshold: float):
        super().__init__(
            f"patterns are not similar (ratio {ratio:.3f} < threshold {threshold:.3f})"
        )
        self.ratio = ratio
        self.threshold = threshold


@dataclass(frozen=True)
class LcmapResult:
    """Longest common run of two patterns under the near(tau) predicate."""

    pattern: tuple[int, ...]
    length: int
    end_index: int  # 0-based index in P of the last matched element; -1 if none
    tau: int


@dataclass
class DiffReport:
    """Matched and unmatched index ranges (half-open) for both patterns."""

    matched: list[tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=list)
    unmatched: list[tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=list)


def near(a: int, b: int, tau: int) -> bool:
    """Offsets are aligned when they differ by at most tau."""
    return abs(a - b) <= tau


def _offsets(pattern) -> tuple[int, ...]:
    if isinstance(pattern, AddressPattern):
        return pattern.offsets
    return tuple(pattern)


def lcmap(p, p_prime, tau: int = DEFAULT_TAU) -> LcmapResult:
    """Longest common memory address pattern by dynamic programming.

    D[i][j] extends D[i-1][j-1] by one when near(P[i-1], P'[j-1], tau)
    and resets to zero otherwise; the result is the run of P ending at
    the smallest index attaining the maximum.  Ties on the P' side break
    toward the earliest match for reproducible output.
    """
    first = _offsets(p)
    second = _offsets(p_prime)
    m, n = len(first), len(second)
    best_len = 0
    best_end = -1
    previous = [0] * (n + 1)
    for i in range(1, m + 1):
        current = [0] * (n + 1)
        for j in range(1, n + 1):
            if near(first[i - 1], second[j - 1], tau):
                current[j] = previous[j - 1] + 1
                if current[j] > best_len:
                    best_len = current[j]
                    best_end = i - 1
        previous = current
    if best_len == 0:
        return LcmapResult(pattern=(), length=0, end_index=-1, tau=tau)
    return LcmapResult(
        pattern=first[best_end - best_len + 1 : best_end + 1],
        length=best_len,
        end_index=best_end,
        tau=tau,
    )


def _lcmap_both(first, second, tau):
    """Like lcmap but also reports the end index in the second pattern."""
    m, n = len(first), len(second)
    best = (0, -1, -1)  # length, end in first, end in second
    previous = [0] * (n + 1)
    for i in range(1, m + 1):
        current = [0] * (n + 1)
        for j in range(1, n + 1):
            if near(first[i - 1], second[j - 1], tau):
                current[j] = previous[j - 1] + 1
                if current[j] > best[0]:
                    best = (current[j], i - 1, j - 1)
        previous = current
    return best


def similarity(p, p_prime, tau: int = DEFAULT_TAU) -> float:
    """LCMAP length over the shorter pattern length; 0 for empty input.

    Normalizing by min(m, n) lets a short buffer signature fully embedded
    in a long execution trace score 1.0.
    """
    first = _offsets(p)
    second = _offsets(p_prime)
    if not first or not second:
        return 0.0
    return lcmap(first, second, tau).length / min(len(first), len(second))


def extract_pattern(log: TraceLog,
                    bases: Sequence[AllocationRecord] = (),
                    event_filter: Optional[Callable[[AccessEvent], bool]] = None
                    ) -> AddressPattern:
    """Map a trace to relative offsets, preserving event order.

    Each access inside a known allocation is taken relative to that
    allocation's base; leftovers fall back to the lowest address among
    them.  The default filter keeps reads/writes issued from within the
    main module.
    """
    lo, hi = log.module_range
    if event_filter is None:
        def event_filter(e: AccessEvent) -> bool:
            if e.kind not in ("read", "write"):
                return False
            return lo <= e.rip < hi if hi > lo else True
    selected = [e for e in log.events if event_filter(e)]
    resolved: list[Optional[int]] = []
    leftovers = []
    for event in selected:
        owner = next((b for b in bases if b.contains(event.address)), None)
        if owner is None:
            resolved.append(None)
            leftovers.append(event.address)
        else:
            resolved.append(event.address - owner.base)
    floor = min(leftovers) if leftovers else 0
    offsets = [
        (event.address - floor) if off is None else off
        for off, event in zip(resolved, selected)
    ]
    if not selected:
        return AddressPattern(offsets=(), base=0, sizes=())
    base = floor if leftovers else (bases[0].base if bases else 0)
    return AddressPattern(
        offsets=tuple(offsets),
        base=base,
        sizes=tuple(e.operand_size for e in selected),
    )


def diff_modified(p, p_prime, tau: int = DEFAULT_TAU,
                  threshold: float = DEFAULT_MATCH_THRESHOLD,
                  min_run: int = DEFAULT_MIN_RUN) -> DiffReport:
    """Localize modifications between two similar patterns.

    Greedy recursion: take the LCMAP as a matched run, recurse on the
    unmatched prefixes and suffixes, and group leftovers shorter than
    min_run into combined unmatched regions covering both sides.  Raises
    NotSimilarError when the patterns do not meet the match threshold.
    """
    first = _offsets(p)
    second = _offsets(p_prime)
    ratio = similarity(first, second, tau)
    if ratio < threshold:
        raise NotSimilarError(ratio, threshold)
    report = DiffReport()

    def recurse(i0, i1, j0, j1):
        if i0 >= i1 and j0 >= j1:
            return
        length, end_i, end_j = _lcmap_both(first[i0:i1], second[j0:j1], tau)
        full_both = length == i1 - i0 == j1 - j0
        if length < min_run and not full_both:
            report.unmatched.append(((i0, i1), (j0, j1)))
            return
        mi0 = i0 + end_i - length + 1
        mj0 = j0 + end_j - length + 1
        recurse(i0, mi0, j0, mj0)
        report.matched.append(((mi0, mi0 + length), (mj0, mj0 + length)))
        recurse(mi0 + length, i1, mj0 + length, j1)

    recurse(0, len(first), 0, len(second))
    report.matched.sort()
    report.unmatched.sort()
    return report


# -- signature files ----------------------------------------------------


def write_signature(pattern: AddressPattern, tau: int = DEFAULT_TAU) -> bytes:
    record = {
        "base": _hex(pattern.base),
        "tau_default": tau,
        "offsets": list(pattern.offsets),
    }
    if pattern.sizes is not None:
        record["sizes"] = list(pattern.sizes)
    return (json.dumps(record) + "\n").encode("utf-8")


def read_signature(data) -> tuple[AddressPattern, int]:
    """Parse a signature file; returns (pattern, tau_default)."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    record = json.loads(data)
    pattern = AddressPattern(
        offsets=tuple(int(x) for x in record["offsets"]),
        base=_parse_addr(record["base"]) if isinstance(record["base"], str)
        else int(record["base"]),
        sizes=tuple(record["sizes"]) if record.get("sizes") is not None else None,
    )
    return pattern, int(record.get("tau_default", DEFAULT_TAU))
