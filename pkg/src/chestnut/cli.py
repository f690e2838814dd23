"""Command-line entry point: one subcommand per pipeline stage.

Every stage boundary is a file, so each stage can be re-run and inspected
on its own.  Exit codes: 0 success, 2 usage, 3 analysis error,
4 enforcement error.
"""

from __future__ import annotations

import argparse
import json
import stat
import sys
from pathlib import Path

from . import __version__, callgraph, evalkit, funcmap, launcher, merge as merge_mod, tracer
from .elfio import (
    NOTE_TYPE_CALLGRAPH_DOC,
    load_image,
    read_annotation,
)
from .errors import ChestnutError
from .extract import DEFAULT_BUDGET, extract_all
from .filtergen import (
    Allowlist,
    KILL_PROCESS,
    build_filter,
    emit_raw,
    read_allowlist,
    write_allowlist,
)
from .syscalls import EXEC_FAMILY, LINUX_5_0_SYSCALL_COUNT, MPROTECT


def _dump_json(path, doc) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _print(args, doc, human: str) -> None:
    if getattr(args, "json", False):
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    else:
        print(human)


def _analyze(target, budget: int):
    image, table = load_image(target)
    regions = funcmap.recover_functions(image)
    bounds = [(r.start, r.end) for r in regions]
    result = extract_all(image, budget=budget, function_bounds=bounds)
    return image, table, regions, result


def cmd_extract(args) -> int:
    image, _, regions, result = _analyze(args.target, args.budget)
    doc = result.to_json()
    doc["target"] = str(args.target)
    doc["arch"] = image.arch
    if args.out:
        _dump_json(args.out, doc)
    _print(
        args,
        doc,
        f"{args.target}: {len(result.numbers)} syscalls resolved at "
        f"{len(result.sites)} sites ({len(result.unresolved)} unresolved)\n"
        f"numbers: {sorted(result.numbers)}",
    )
    for d in result.diagnostics:
        print(f"note: {d}", file=sys.stderr)
    return 0


def cmd_map(args) -> int:
    image, _, regions, result = _analyze(args.target, args.budget)
    mapping = funcmap.map_exports(image, regions, list(result.sites))
    out = Path(args.emit_map) if args.emit_map else Path(str(args.target) + ".map.json")
    funcmap.write_map(out, mapping)
    _print(
        args,
        mapping.to_json(),
        f"{args.target}: {len(mapping.exports)} exports mapped, entry set "
        f"{sorted(mapping.entry_set)} -> {out}",
    )
    return 0


def _load_cgdoc(path: Path) -> callgraph.CallGraphDoc:
    raw = path.read_bytes()
    if raw[:4] == b"\x7fELF":
        image, _ = load_image(path)
        note = read_annotation(image)
        if note is None or note.note_type != NOTE_TYPE_CALLGRAPH_DOC:
            raise ChestnutError(f"{path}: no call-graph document note")
        return callgraph.CallGraphDoc.from_bytes(note.payload)
    return callgraph.CallGraphDoc.from_json(json.loads(raw.decode()))


def cmd_callgraph(args) -> int:
    docs = [_load_cgdoc(Path(p)) for p in args.inputs]
    program = callgraph.resolve_linkage(docs)
    callgraph.resolve_indirect(program)
    flat = callgraph.condense_and_propagate(program)
    entries = tuple(args.entries.split(",")) if args.entries else callgraph.DEFAULT_ENTRIES
    numbers, warnings = callgraph.reachable_from_entries(
        flat, entries, require_all=not args.library_mode
    )
    for w in [*program.warnings, *warnings]:
        print(f"warning: {w}", file=sys.stderr)
    if args.emit_flat:
        _dump_json(
            args.emit_flat,
            {
                "version": callgraph.DOC_VERSION,
                "reachable": {k: sorted(v) for k, v in sorted(flat.reachable.items())},
            },
        )
    if args.out:
        write_allowlist(args.out, Allowlist(args.arch, frozenset(numbers)))
    _print(
        args,
        {"entries": list(entries), "numbers": sorted(numbers)},
        f"reachable from {','.join(entries)}: {sorted(numbers)}",
    )
    return 0


def _library_maps(closure, libmap_dir, budget: int, strict: bool):
    maps = {}
    for obj in closure.libraries:
        loaded = None
        if libmap_dir:
            candidate = Path(libmap_dir) / f"{obj.name}.map.json"
            if candidate.is_file():
                loaded = funcmap.read_map(candidate)
        if loaded is None and obj.path:
            image, _ = load_image(obj.path)
            regions = funcmap.recover_functions(image)
            bounds = [(r.start, r.end) for r in regions]
            result = extract_all(image, budget=budget, function_bounds=bounds)
            loaded = funcmap.map_exports(image, regions, list(result.sites))
        if loaded is not None:
            maps[obj.name] = loaded
    return maps


def _merge_target(target, search_paths, libmap_dir, budget, strict, include_interp=True):
    image, table, regions, result = _analyze(target, budget)
    root_map = funcmap.map_exports(image, regions, list(result.sites))
    if image.kind == "executable-static" or not table.needed:
        closure = merge_mod.DependencyClosure(
            merge_mod.ObjectInfo(merge_mod.ROOT_NAME, str(target), tuple(), frozenset(), tuple()),
            [],
        )
    else:
        closure = merge_mod.resolve_dependencies(
            target, search_paths, strict=strict, include_interp=include_interp
        )
    maps = {merge_mod.ROOT_NAME: root_map}
    maps.update(_library_maps(closure, libmap_dir, budget, strict))
    merged = merge_mod.merge_sets(closure, maps, strict=strict)
    return image, result, closure, merged


def cmd_merge(args) -> int:
    _, _, closure, merged = _merge_target(
        args.root, merge_mod.default_search_paths(args.search_path), args.lib_map,
        args.budget, not args.permissive, include_interp=not args.no_interp,
    )
    allowlist = Allowlist(args.arch, merged.numbers)
    if args.out:
        write_allowlist(args.out, allowlist)
    for w in merged.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _print(
        args,
        {
            "numbers": sorted(merged.numbers),
            "libraries": [o.name for o in closure.libraries],
            "warnings": merged.warnings,
        },
        f"{args.root}: merged {len(merged.numbers)} syscalls over "
        f"{len(closure.libraries)} libraries",
    )
    return 0


def cmd_genfilter(args) -> int:
    allowlist = read_allowlist(args.allowlist)
    default = KILL_PROCESS if args.mode == "kill" else ("errno", args.errno)
    program = build_filter(allowlist, default)
    if args.emit_bpf:
        emit_raw(program, args.emit_bpf)
    _print(
        args,
        {
            "instructions": len(program.instructions),
            "numbers": len(allowlist.numbers),
            "default": args.mode,
        },
        f"{len(program.instructions)} BPF instructions for "
        f"{len(allowlist.numbers)} allowed syscalls",
    )
    return 0


def cmd_launch(args) -> int:
    allowlist = read_allowlist(args.allowlist)
    result = launcher.launch(args.target, args.args, allowlist, mode=args.mode)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if result.violations:
        print(f"violations: {sorted(result.violations)}", file=sys.stderr)
    if result.term_signal is not None:
        print(f"target killed by signal {result.term_signal}"
              + (" (seccomp)" if result.seccomp_killed else ""), file=sys.stderr)
        return 128 + result.term_signal
    return result.exit_code or 0


def cmd_patch(args) -> int:
    allowlist = read_allowlist(args.allowlist)
    result = launcher.patch(args.target, allowlist, out_path=args.out, libdir=args.libdir)
    _print(
        args,
        {"patched": str(result.patched), "installer": str(result.installer)},
        f"patched: {result.patched} (installer: {result.installer})",
    )
    return 0


def cmd_trace(args) -> int:
    report = tracer.trace(args.target, args.args, follow_children=not args.no_follow, mode=args.mode)
    if args.out:
        _dump_json(args.out, report.to_json())
    _print(
        args,
        report.to_json(),
        f"observed {len(report.observed)} syscalls over {len(report.per_pid)} processes "
        f"(+{len(report.startup)} startup-only): {sorted(report.observed)}",
    )
    return 0


def cmd_refine(args) -> int:
    static = read_allowlist(args.static)
    with open(args.report) as f:
        report = tracer.TraceReport.from_json(json.load(f))
    result = tracer.refine(static, report, policy=args.policy, include_startup=args.include_startup)
    ratio = tracer.overapproximation_ratio(static, report, include_startup=args.include_startup)
    if args.out:
        write_allowlist(args.out, Allowlist(static.arch, result.final))
    doc = result.to_json()
    doc["overapproximation"] = round(ratio, 4)
    _print(
        args,
        doc,
        f"added {sorted(result.added)}, removable {sorted(result.removable)}, "
        f"final {len(result.final)} syscalls, overapproximation {ratio:.2%}",
    )
    return 0


def cmd_evaluate(args) -> int:
    allowlist = read_allowlist(args.allowlist)
    samples = evalkit.load_samples(args.samples)
    report = evalkit.evaluate(allowlist, samples, use_equivalents=not args.no_equivalents)
    if args.out:
        _dump_json(args.out, report.to_json())
    _print(args, report.to_json(), report.human_table())
    return 0


def _stage(outdir: Path, summary: dict, name: str, produces: list[Path]):
    """Context that renames a failing stage's outputs to .partial."""

    class _Stage:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None:
                summary["failed_stage"] = name
                for p in produces:
                    if p.exists():
                        p.rename(p.with_suffix(p.suffix + ".partial"))
            return False

    return _Stage()


def cmd_pipeline(args) -> int:
    outdir = Path(args.outdir or (str(args.target) + ".chestnut.d"))
    outdir.mkdir(parents=True, exist_ok=True)
    summary: dict = {"target": str(args.target), "stages": []}

    extract_out = outdir / "extract.json"
    map_out = outdir / "root.map.json"
    allow_out = outdir / "allowlist.json"
    trace_out = outdir / "trace.json"
    bpf_out = outdir / "filter.bpf"
    script_out = outdir / "launch.sh"
    summary_out = outdir / "summary.json"

    with _stage(outdir, summary, "merge", [extract_out, map_out, allow_out]):
        image, result, closure, merged = _merge_target(
            args.target, merge_mod.default_search_paths(args.search_path), args.lib_map,
            args.budget, not args.permissive, include_interp=not args.no_interp,
        )
        doc = result.to_json()
        doc["target"] = str(args.target)
        _dump_json(extract_out, doc)
        root_regions = funcmap.recover_functions(image)
        _dump_json(map_out, funcmap.map_exports(image, root_regions, list(result.sites)).to_json())
        numbers = merged.numbers
        summary["stages"].append(
            {"stage": "extract", "sites": len(result.sites), "unresolved": len(result.unresolved)}
        )
        summary["stages"].append(
            {
                "stage": "merge",
                "libraries": [o.name for o in closure.libraries],
                "numbers": len(numbers),
                "warnings": merged.warnings,
            }
        )
        write_allowlist(allow_out, Allowlist(args.arch, numbers))

    if args.with_trace:
        with _stage(outdir, summary, "trace", [trace_out]):
            report = tracer.trace(args.target, args.trace_args or [], follow_children=True)
            _dump_json(trace_out, report.to_json())
            refined = tracer.refine(
                Allowlist(args.arch, numbers), report, include_startup=True
            )
            ratio = tracer.overapproximation_ratio(
                Allowlist(args.arch, numbers), report, include_startup=True
            )
            numbers = refined.final
            write_allowlist(allow_out, Allowlist(args.arch, numbers))
            summary["stages"].append(
                {
                    "stage": "trace",
                    "observed": len(report.observed | report.startup),
                    "added": sorted(refined.added),
                    "overapproximation": round(ratio, 4),
                }
            )

    with _stage(outdir, summary, "genfilter", [bpf_out, script_out]):
        program = build_filter(Allowlist(args.arch, numbers))
        emit_raw(program, bpf_out)
        script_out.write_text(
            "#!/bin/sh\n"
            f'exec {sys.executable} -m chestnut.cli launch --allowlist "{allow_out}" '
            f'--mode enforce-kill {args.target} -- "$@"\n'
        )
        script_out.chmod(script_out.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP)
        summary["stages"].append({"stage": "genfilter", "instructions": len(program.instructions)})

    patched = None
    if args.emit_patched:
        with _stage(outdir, summary, "patch", []):
            pr = launcher.patch(
                args.target, Allowlist(args.arch, numbers), out_path=outdir / "patched", libdir=outdir
            )
            patched = pr.patched
            summary["stages"].append({"stage": "patch", "patched": str(pr.patched)})

    summary.update(
        {
            "allowed": len(numbers),
            "blocked": LINUX_5_0_SYSCALL_COUNT - len(numbers),
            "total_syscalls": LINUX_5_0_SYSCALL_COUNT,
            "exec_blocked": not (numbers & EXEC_FAMILY),
            "mprotect_blocked": MPROTECT not in numbers,
            "numbers": sorted(numbers),
            "artifacts": {
                "allowlist": str(allow_out),
                "bpf": str(bpf_out),
                "launch_script": str(script_out),
                **({"patched": str(patched)} if patched else {}),
            },
        }
    )
    _dump_json(summary_out, summary)
    _print(
        args,
        summary,
        f"{args.target}: {summary['allowed']} syscalls allowed, "
        f"{summary['blocked']}/{LINUX_5_0_SYSCALL_COUNT} blocked, "
        f"exec blocked: {'yes' if summary['exec_blocked'] else 'no'}, "
        f"mprotect blocked: {'yes' if summary['mprotect_blocked'] else 'no'}\n"
        f"artifacts in {outdir}",
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chestnut",
        description="Static syscall extraction and seccomp allowlist enforcement for ELF binaries",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, budget=True):
        p.add_argument("--json", action="store_true", help="machine-readable stdout")
        p.add_argument("--arch", default="x86_64", choices=["x86_64"], help="target ABI")
        if budget:
            p.add_argument("--budget", type=int, default=DEFAULT_BUDGET,
                           help="backward-walk instruction budget")

    p = sub.add_parser("extract", help="locate syscalls and recover their numbers")
    p.add_argument("target")
    p.add_argument("--out", help="write the full site report as JSON")
    common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("map", help="map exported functions to reachable syscalls")
    p.add_argument("target")
    p.add_argument("--emit-map", help="output path (default: TARGET.map.json)")
    common(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("callgraph", help="propagate syscalls over call-graph documents")
    p.add_argument("inputs", nargs="+", help="*.cgdoc.json files or ELFs with document notes")
    p.add_argument("--entries", help="comma-separated entry functions (default main,exit)")
    p.add_argument("--library-mode", action="store_true", help="missing entries warn instead of fail")
    p.add_argument("--emit-flat", help="write the flattened graph JSON")
    p.add_argument("--out", help="write the reachable set as an allowlist")
    common(p, budget=False)
    p.set_defaults(func=cmd_callgraph)

    p = sub.add_parser("merge", help="merge syscall sets across shared-object dependencies")
    p.add_argument("--root", required=True)
    p.add_argument("--lib-map", help="directory of per-library export maps")
    p.add_argument("--search-path", action="append", default=[], help="library search directory")
    p.add_argument("--permissive", action="store_true", help="warn instead of failing")
    p.add_argument("--no-interp", action="store_true",
                   help="exclude the program interpreter from the closure")
    p.add_argument("--out", help="write the merged allowlist JSON")
    common(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("genfilter", help="build the seccomp-BPF filter")
    p.add_argument("--allowlist", required=True)
    p.add_argument("--mode", choices=["kill", "errno"], default="kill")
    p.add_argument("--errno", type=int, default=launcher.EPERM)
    p.add_argument("--emit-bpf", help="write raw filter bytes (8 per instruction)")
    common(p, budget=False)
    p.set_defaults(func=cmd_genfilter)

    p = sub.add_parser("launch", help="install the filter, then exec the target")
    p.add_argument("--allowlist", required=True)
    p.add_argument("--mode", choices=[launcher.MODE_ENFORCE_KILL, launcher.MODE_ENFORCE_ERRNO,
                                      launcher.MODE_LOG_ONLY], default=launcher.MODE_ENFORCE_KILL)
    p.add_argument("target")
    p.add_argument("args", nargs="*")
    common(p, budget=False)
    p.set_defaults(func=cmd_launch)

    p = sub.add_parser("patch", help="rewrite the binary to enforce its own filter")
    p.add_argument("target")
    p.add_argument("--allowlist", required=True)
    p.add_argument("--out")
    p.add_argument("--libdir", help="where the installer library lives / gets built")
    common(p, budget=False)
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("trace", help="observe every syscall of a run")
    p.add_argument("target")
    p.add_argument("args", nargs="*")
    p.add_argument("--out", help="write the trace report JSON")
    p.add_argument("--no-follow", action="store_true", help="do not follow children")
    p.add_argument("--mode", choices=[tracer.MODE_AUTO, tracer.MODE_SECCOMP, tracer.MODE_PTRACE],
                   default=tracer.MODE_AUTO)
    common(p, budget=False)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("refine", help="cross-reference a trace with an allowlist")
    p.add_argument("--static", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--policy", choices=[tracer.POLICY_ADD_ONLY, tracer.POLICY_ADD_AND_REMOVE],
                   default=tracer.POLICY_ADD_ONLY)
    p.add_argument("--include-startup", action="store_true")
    p.add_argument("--out", help="write the refined allowlist")
    common(p, budget=False)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="score CVE mitigation for an allowlist")
    p.add_argument("--allowlist", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--no-equivalents", action="store_true")
    p.add_argument("--out", help="write the report JSON")
    common(p, budget=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="extract, merge, and generate enforcement artifacts")
    p.add_argument("target")
    p.add_argument("--outdir")
    p.add_argument("--lib-map")
    p.add_argument("--search-path", action="append", default=[])
    p.add_argument("--permissive", action="store_true")
    p.add_argument("--no-interp", action="store_true",
                   help="exclude the program interpreter from the closure")
    p.add_argument("--with-trace", action="store_true", help="refine with a traced run")
    p.add_argument("--trace-args", nargs="*", help="arguments for the traced run")
    p.add_argument("--emit-patched", action="store_true", help="also produce a patched binary")
    common(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except ChestnutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
