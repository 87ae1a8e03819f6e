"""Command line: ``manasim run | ckpt-sweep | fuzz | inspect-image``.

Exit status 0 when every check passes, 1 on a verification failure, 2 on a
usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import InvalidConfiguration, ManaError
from .harness import ckpt_sweep, format_record, fuzz, run_equivalence
from .image import inspect_image
from .interpose import MODES
from .system import PHASE_CLASSES, System
from .workloads import WORKLOAD_NAMES, make_workload

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_common(p, workload_default="p2p-ring"):
    p.add_argument("--workload", default=workload_default,
                   help="workload name, or a comma-separated list for ckpt-sweep/fuzz: " + ", ".join(WORKLOAD_NAMES))
    p.add_argument("--procs", type=int, default=4)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="hybrid-2pc")
    p.add_argument("--ckpt-dir", default=None)
    p.add_argument("--metrics-out", default=None, help="append key=value metric records to this file")
    p.add_argument("--delay", type=int, default=None, help="straggler delay in steps")
    p.add_argument("--msg-bytes", type=int, default=None, help="p2p-ring message size")


def build_parser():
    ap = argparse.ArgumentParser(prog="manasim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one workload, optionally checkpointing at given steps")
    _add_common(r)
    r.add_argument("--ckpt-at", type=_int_list, default=[], help="global steps, comma-separated")
    r.add_argument("--no-kill", action="store_true", help="resume in place instead of kill and restart")
    s = sub.add_parser("ckpt-sweep", help="one checkpointed run per injection step")
    _add_common(s)
    s.add_argument("--every", type=int, default=10)
    f = sub.add_parser("fuzz", help="random schedules and injection steps")
    _add_common(f)
    f.add_argument("--trials", type=int, default=100)
    i = sub.add_parser("inspect-image", help="print header and section sizes of an image file")
    i.add_argument("path")
    return ap


def _workload(name, args):
    params = {}
    if args.rounds is not None and name in ("p2p-ring", "collective-storm", "straggler"):
        params["rounds"] = args.rounds
    if args.delay is not None and name == "straggler":
        params["delay"] = args.delay
    if args.msg_bytes is not None and name == "p2p-ring":
        params["msg_bytes"] = args.msg_bytes
    n = 2 if name == "bcast-deadlock" else args.procs
    return make_workload(name, n, **params)


def _emit(args, records, out):
    for rec in records:
        print(format_record(rec), file=out)
    if args.metrics_out:
        with open(args.metrics_out, "a") as fh:
            for rec in records:
                fh.write(format_record(rec) + "\n")


def cmd_run(args, out):
    wl = _workload(args.workload, args)
    ck = System(wl, args.seed, args.mode, args.ckpt_at, not args.no_kill, args.ckpt_dir, trace=True).run()
    failures = []
    if ck.deadlock:
        print(ck.deadlock, file=out)
        failures.append("deadlock")
    elif args.ckpt_at:
        v = run_equivalence(wl, args.seed, args.ckpt_at, args.mode, not args.no_kill)
        if not v.ok:
            print(v.report, file=out)
            failures.append("equivalence")
    expected = wl.expected()
    if not ck.deadlock and expected is not None and ck.outputs != expected:
        failures.append("reference")
    if any(not (d.network_empty and d.balanced) for d in ck.drains):
        failures.append("drain")
    rec = {"record": "run", "workload": wl.name, "procs": wl.nprocs, "mode": args.mode, "seed": args.seed,
           **ck.metrics, "deadlock": int(bool(ck.deadlock)), "verdict": "FAIL" if failures else "PASS"}
    if failures:
        rec["failed"] = ",".join(failures)
    _emit(args, [rec], out)
    return EXIT_FAIL if failures else EXIT_OK


def cmd_sweep(args, out):
    records, ok, coverage = [], True, set()
    for name in args.workload.split(","):
        wl = _workload(name, args)
        res = ckpt_sweep(wl, args.seed, args.mode, args.every)
        coverage |= res.coverage
        for k, report in res.failures[:5]:
            print(f"injection at step {k}: {report}", file=out)
        ok &= res.ok
        records.append({"record": "ckpt-sweep", "workload": name, "procs": wl.nprocs, "mode": args.mode,
                        "seed": args.seed, "points": len(res.points), "failures": len(res.failures),
                        "checkpoints": res.checkpoints, "drains_ok": int(res.drains_ok),
                        "coverage": ",".join(sorted(res.coverage)) or "none"})
    records.append({"record": "coverage", **{c: int(c in coverage) for c in PHASE_CLASSES}})
    _emit(args, records, out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_fuzz(args, out):
    records, ok = [], True
    for name in args.workload.split(","):
        wl = _workload(name, args)
        res = fuzz(wl, args.trials, args.seed, args.mode)
        for s, ks, report in res.failures[:5]:
            print(f"seed {s} injections {ks}: {report}", file=out)
        ok &= res.ok
        records.append({"record": "fuzz", "workload": name, "procs": wl.nprocs, "mode": args.mode,
                        "seed": args.seed, "trials": res.trials, "failures": len(res.failures),
                        "checkpoints": res.checkpoints})
    _emit(args, records, out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_inspect(args, out):
    info = inspect_image(Path(args.path).read_bytes())
    print(f"version={info['version']} epoch={info['epoch']} world_size={info['world_size']} rank={info['rank']}",
          file=out)
    for name, size in info["sections"].items():
        print(f"section {name} {size} bytes", file=out)
    print(f"CRC {info['crc']}", file=out)
    return EXIT_OK


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    handler = {"run": cmd_run, "ckpt-sweep": cmd_sweep, "fuzz": cmd_fuzz, "inspect-image": cmd_inspect}[args.cmd]
    try:
        return handler(args, out)
    except (InvalidConfiguration, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ManaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=out)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
