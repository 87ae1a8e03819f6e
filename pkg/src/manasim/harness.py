"""Native-vs-checkpointed equivalence, injection sweeps and schedule fuzzing."""

from __future__ import annotations

import random
import shlex
from dataclasses import dataclass, field

from .system import PHASE_CLASSES, RunOutcome, System
from .workloads import Workload


@dataclass
class Verdict:
    ok: bool
    native: RunOutcome
    checkpointed: RunOutcome | None
    report: str = ""
    drains_ok: bool = True


def first_divergence(native: RunOutcome, other: RunOutcome) -> str:
    """Locate the first application call whose result differs between two runs."""
    if native.trace is None or other.trace is None:
        return "no call trace recorded"
    best = None
    for rank in sorted(native.trace):
        a, b = native.trace[rank], other.trace.get(rank, [])
        for i in range(max(len(a), len(b))):
            x = a[i] if i < len(a) else None
            y = b[i] if i < len(b) else None
            if x is None or y is None or x[1:] != y[1:]:
                step = (y or x)[0]
                op = (y or x)[2]
                if best is None or step < best[0]:
                    best = (step, rank, i, op)
                break
    if best is None:
        return "call traces identical"
    step, rank, pc, op = best
    return f"first divergence at step {step}: rank {rank}, call #{pc} ({op})"


def run_equivalence(workload: Workload, seed: int = 0, inject_at=(), mode: str = "hybrid-2pc",
                    kill: bool = True, ckpt_dir=None, native: RunOutcome | None = None) -> Verdict:
    """Run natively and with checkpoints; outputs must be byte-identical."""
    if native is None:
        native = System(workload, seed, mode, trace=True).run()
    if native.deadlock:
        return Verdict(False, native, None, "native run deadlocked\n" + native.deadlock)
    ck = System(workload, seed, mode, inject_at, kill, ckpt_dir, trace=True).run()
    if ck.deadlock:
        return Verdict(False, native, ck, "checkpointed run deadlocked\n" + ck.deadlock)
    drains_ok = all(d.network_empty and d.balanced for d in ck.drains)
    if ck.outputs != native.outputs:
        bad = [r for r in native.outputs if ck.outputs.get(r) != native.outputs[r]]
        return Verdict(False, native, ck, f"outputs differ on ranks {bad}; " + first_divergence(native, ck),
                       drains_ok)
    if not drains_ok:
        return Verdict(False, native, ck, "drain left the network non-empty or counters unbalanced", False)
    return Verdict(True, native, ck, "", True)


@dataclass
class SweepResult:
    points: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (k, report)
    coverage: set = field(default_factory=set)
    checkpoints: int = 0
    drains_ok: bool = True

    @property
    def ok(self):
        return not self.failures

    def missing_classes(self):
        return [c for c in PHASE_CLASSES if c not in self.coverage]


def ckpt_sweep(workload: Workload, seed: int = 0, mode: str = "hybrid-2pc", every: int = 10,
               start: int | None = None, kill: bool = True) -> SweepResult:
    """One checkpointed run per injection step ``k`` = every, 2*every, ... up to the native length."""
    native = System(workload, seed, mode, trace=True).run()
    res = SweepResult()
    if native.deadlock:
        res.failures.append((None, "native run deadlocked\n" + native.deadlock))
        return res
    k = every if start is None else start
    while k < native.steps:
        v = run_equivalence(workload, seed, [k], mode, kill, native=native)
        res.points.append(k)
        if v.checkpointed is not None:
            res.coverage |= v.checkpointed.coverage
            res.checkpoints += v.checkpointed.checkpoints
        res.drains_ok &= v.drains_ok
        if not v.ok:
            res.failures.append((k, v.report))
        k += every
    return res


@dataclass
class FuzzResult:
    trials: int = 0
    failures: list = field(default_factory=list)  # (seed, injections, report)
    checkpoints: int = 0
    coverage: set = field(default_factory=set)

    @property
    def ok(self):
        return not self.failures


def fuzz(workload: Workload, trials: int, seed: int = 0, mode: str = "hybrid-2pc",
         max_injections: int = 3) -> FuzzResult:
    """Random schedules and random injection steps, each compared with its own native run."""
    rng = random.Random(seed)
    out = FuzzResult()
    for _ in range(trials):
        s = rng.randrange(1 << 31)
        native = System(workload, s, mode, trace=True).run()
        ks = sorted(rng.randrange(max(native.steps, 1)) for _ in range(rng.randint(1, max_injections)))
        kill = rng.random() < 0.8
        v = run_equivalence(workload, s, ks, mode, kill, native=native)
        out.trials += 1
        if v.checkpointed is not None:
            out.checkpoints += v.checkpointed.checkpoints
            out.coverage |= v.checkpointed.coverage
        if not v.ok:
            out.failures.append((s, ks, v.report))
    return out


def format_record(record: dict) -> str:
    """One metrics record as a single ``key=value`` line, values shell-quoted when needed."""
    return " ".join(f"{k}={shlex.quote(str(v))}" for k, v in record.items())


def parse_record(line: str) -> dict:
    out = {}
    for tok in shlex.split(line):
        k, _, v = tok.partition("=")
        out[k] = v
    return out
