"""Batch front-end for the simulate / reconstruct / sign / match pipeline.

Exit codes are stable across subcommands: 0 success (or match), 1
no-match, 2 usage or parse error.  The MEMTRACE_TAU environment variable
overrides the built-in alignment-threshold default; an explicit --tau
still wins.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

from . import guest as guest_mod
from . import recon, signature, trace

EXIT_OK = 0
EXIT_NO_MATCH = 1
EXIT_ERROR = 2


def _default_tau() -> int:
    raw = os.environ.get("MEMTRACE_TAU")
    if raw is None:
        return signature.DEFAULT_TAU
    try:
        return int(raw)
    except ValueError:
        return signature.DEFAULT_TAU


def _load_trace(path: str) -> trace.TraceLog:
    with open(path, "rb") as handle:
        return trace.parse_trace(handle.read())


def _parse_base(text: str) -> int:
    if not text.lower().startswith("0x"):
        raise ValueError(f"base {text!r} must be 0x-prefixed hex")
    return int(text, 16)


def _write_out(out: Optional[str], data: bytes) -> None:
    if out is None or out == "-":
        sys.stdout.buffer.write(data)
    else:
        with open(out, "wb") as handle:
            handle.write(data)


def cmd_simulate(args) -> int:
    with open(args.model, "rb") as handle:
        model = guest_mod.parse_model(handle.read())
    g = guest_mod.build_guest(model)
    log = guest_mod.run(g, model)
    _write_out(args.out, trace.serialize_trace(log))
    print(f"{len(log.events)} events")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    log = _load_trace(args.trace)
    base = _parse_base(args.base)
    layout = recon.reconstruct_layout(log, base, size_hint=args.size)
    if any(recon.NO_ACCESS_NOTE in f.notes for f in layout.fields):
        print("warning: no accesses in window", file=sys.stderr)
    report = {
        "base": f"0x{layout.base:x}",
        "total_size": layout.total_size,
        "fields": [
            {
                "offset": f.offset,
                "size": f.size,
                "category": f.category,
                "evidence": f.evidence_count,
                "notes": list(f.notes),
            }
            for f in layout.fields
        ],
        "c_decl": recon.render_layout_c(layout),
    }
    _write_out(args.out, (json.dumps(report, indent=2) + "\n").encode("utf-8"))
    return EXIT_OK


def cmd_sign(args) -> int:
    log = _load_trace(args.trace)
    bases = recon.collect_bases(log)
    pattern = signature.extract_pattern(log, bases)
    _write_out(args.out, signature.write_signature(pattern, tau=args.tau))
    print(f"{len(pattern.offsets)} offsets")
    return EXIT_OK


def _load_signature(path: str):
    with open(path, "rb") as handle:
        return signature.read_signature(handle.read())


def cmd_match(args) -> int:
    first, _ = _load_signature(args.first)
    second, _ = _load_signature(args.second)
    result = signature.lcmap(first, second, args.tau)
    ratio = signature.similarity(first, second, args.tau)
    verdict = "match" if ratio >= args.threshold else "no-match"
    print(json.dumps({
        "L": result.length,
        "I": result.end_index,
        "ratio": round(ratio, 6),
        "verdict": verdict,
    }))
    return EXIT_OK if verdict == "match" else EXIT_NO_MATCH


def cmd_diff(args) -> int:
    first, _ = _load_signature(args.first)
    second, _ = _load_signature(args.second)
    try:
        report = signature.diff_modified(first, second, args.tau,
                                         threshold=args.threshold)
    except signature.NotSimilarError as exc:
        print(json.dumps({"declined": True, "ratio": round(exc.ratio, 6)}))
        return EXIT_NO_MATCH
    print(json.dumps({
        "matched": [[list(a), list(b)] for a, b in report.matched],
        "unmatched": [[list(a), list(b)] for a, b in report.unmatched],
    }))
    return EXIT_OK


def cmd_bases(args) -> int:
    log = _load_trace(args.trace)
    for record in recon.collect_bases(log):
        print(f"0x{record.base:x} 0x{record.size:x} {record.source} "
              f"rip=0x{record.site_rip:x}")
    return EXIT_OK


def _load_rules(path: Optional[str]):
    if path is None:
        return recon.EVASIVE_SEQUENCES
    with open(path, "r", encoding="utf-8") as handle:
        raw = json.load(handle)
    rules = []
    for entry in raw:
        steps = [
            tuple(step) if isinstance(step, list) else step
            for step in entry["steps"]
        ]
        rules.append((entry["name"], steps))
    return rules


def cmd_flags(args) -> int:
    log = _load_trace(args.trace)
    calls = recon.recover_calls(log)
    hits = recon.flag_call_sequences(calls, _load_rules(args.rules))
    for hit in hits:
        print(f"{hit.rule} tid={hit.thread_id} "
              f"first={hit.first_seq} last={hit.last_seq}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memtrace",
        description="Simulated memory-trace capture and analysis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    tau = _default_tau()

    p = sub.add_parser("simulate", help="run a program model, emit a trace")
    p.add_argument("model")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct a structure layout")
    p.add_argument("trace")
    p.add_argument("--base", required=True, help="structure base, 0x-hex")
    p.add_argument("--size", type=int, default=None, help="window size hint")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sign", help="extract a signature from a trace")
    p.add_argument("trace")
    p.add_argument("--tau", type=int, default=tau)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sign)

    p = sub.add_parser("match", help="match two signatures")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--tau", type=int, default=tau)
    p.add_argument("--threshold", type=float,
                   default=signature.DEFAULT_MATCH_THRESHOLD)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("diff", help="diff two similar signatures")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--tau", type=int, default=tau)
    p.add_argument("--threshold", type=float,
                   default=signature.DEFAULT_MATCH_THRESHOLD)
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("bases", help="list discovered allocation bases")
    p.add_argument("trace")
    p.set_defaults(func=cmd_bases)

    p = sub.add_parser("flags", help="flag known API-call sequences")
    p.add_argument("trace")
    p.add_argument("--rules", default=None)
    p.set_defaults(func=cmd_flags)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (trace.TraceError, guest_mod.ModelParseError, ValueError,
            KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
