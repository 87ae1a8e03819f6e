"""Whole-simulation driver: scheduler, coordinator, checkpoint and restart."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

from .coordinator import Coordinator, DrainStats
from .interpose import REQUEST_NULL, WORLD, Done, UpperHalf
from .restart import RestartStats, restart
from .runtime import ANY_SOURCE, Scheduler, Status, lh_init
from .workloads import Workload, program_for

PHASE_CLASSES = ("send-loop", "recv-loop", "collective-emulation", "between-create-and-test")


@dataclass
class RunOutcome:
    outputs: dict
    finished: bool
    deadlock: str | None
    steps: int
    checkpoints: int
    metrics: dict
    phase_trace: list
    coordinator_events: list
    drains: list = field(default_factory=list)
    restarts: list = field(default_factory=list)
    coverage: set = field(default_factory=set)
    request_tables: dict = field(default_factory=dict)
    trace: dict | None = None


class SimulationLimit(RuntimeError):
    pass


def phase_classes(p: UpperHalf) -> set:
    """Which wrapper phase classes a process is inside right now."""
    out = set()
    f = p.frame
    if f is not None:
        op = f["call"]["op"]
        if op == "send" and f["stage"] == "wait":
            out.add("send-loop")
        elif op == "recv" and f["stage"] == "wait":
            out.add("recv-loop")
        elif op == "collective" and f["stage"] == "emu":
            out.add("collective-emulation")
    internal = set(f["reqs"]) if f is not None else set()
    for v, rec in p.p2p.items():
        if not rec.internal and v not in internal:
            out.add("between-create-and-test")
    for rec in p.replay_log:
        if rec.vreq and rec.vreq not in internal:
            out.add("between-create-and-test")
    return out


class System:
    """One simulation instance.

    ``inject_at`` lists global step counts at which the coordinator requests a
    checkpoint.  With ``kill`` the whole upper half is thrown away after the
    images are written and rebuilt from them.
    """

    def __init__(self, workload: Workload, seed: int = 0, mode: str = "hybrid-2pc",
                 inject_at=(), kill: bool = True, ckpt_dir=None, max_steps: int = 2_000_000,
                 window: int = 64, trace: bool = False):
        self.workload = workload
        self.n = workload.nprocs
        self.seed = seed
        self.mode = mode
        self.kill = kill
        self.ckpt_dir = ckpt_dir
        self.max_steps = max_steps
        self.window = window
        self.rt = lh_init(self.n, 0)
        self.procs = []
        for r in range(self.n):
            prog, init = workload.build(r)
            self.procs.append(UpperHalf(r, self.n, prog, init, mode, self.rt, workload.spec))
        self.sched = Scheduler(seed, window)
        self.coord = Coordinator()
        self.step = 0
        self.inject = sorted(set(int(k) for k in inject_at))
        self.drains: list[DrainStats] = []
        self.restarts: list[RestartStats] = []
        self.coverage: set = set()
        self.images: list[dict] = []
        self.keep_images = False
        self.on_checkpoint = None  # callback(system, blobs)
        self.trace = {r: [] for r in range(self.n)} if trace else None

    # -- main loop ---------------------------------------------------------

    def runnable(self):
        ready = [p.rank for p in self.procs if p.ready()]
        if self.coord.phase == "ckpt-requested" and self.coord.frozen:
            allowed = [r for r in ready if self.coord.allowed(self.procs[r])]
            if ready and not allowed:
                self.coord.unfreeze_all(self.step)
                return ready
            return allowed
        return ready

    def run(self) -> RunOutcome:
        deadlock = None
        while True:
            while self.inject and self.inject[0] <= self.step:
                self.inject.pop(0)
                if self.coord.phase == "running":
                    self.coord.request_checkpoint(self.procs, self.step)
                else:
                    self.coord.events.append(("rejected-busy", self.coord.round, self.step))
            if self.coord.phase == "ckpt-requested":
                self.coord.collect_reports(self.procs)
                if self.coord.all_safe():
                    self._checkpoint()
                    continue
            if all(p.finished for p in self.procs):
                break
            runnable = self.runnable()
            if not runnable:
                deadlock = self.wait_graph()
                break
            r = self.sched.pick(runnable)
            self.rt.step = self.step
            done = self.procs[r].step()
            self.step += 1
            if done is not None and self.trace is not None:
                p = self.procs[r]
                self.trace[r].append((self.step, p.pc - 1, done[0]["op"], _digest(done[1])))
            if self.step > self.max_steps:
                raise SimulationLimit(f"no termination after {self.max_steps} steps")
        return self._outcome(deadlock)

    def _checkpoint(self):
        for p in self.procs:
            self.coverage |= phase_classes(p)
        blobs, stats = self.coord.checkpoint(self.procs, self.rt, self.step, self.ckpt_dir)
        self.drains.append(stats)
        if self.keep_images:
            self.images.append(blobs)
        if self.on_checkpoint is not None:
            self.on_checkpoint(self, blobs)
        if self.kill:
            self.rt, self.procs, rstats = restart(blobs, self.seed + self.coord.round, program_for)
            self.restarts.append(rstats)
        self.coord.resume(self.procs, self.step)

    # -- reporting ---------------------------------------------------------

    def wait_graph(self) -> str:
        """Text dump of what every unfinished process is blocked on."""
        lines = [f"deadlock at step {self.step}: no runnable process"]
        for p in self.procs:
            if p.finished:
                continue
            f = p.frame
            if f is None:
                lines.append(f"  rank {p.rank}: idle at pc {p.pc} (frozen)")
                continue
            call = f["call"]
            desc = f"{call['op']}" + (f"({call['kind']})" if "kind" in call else "")
            waits = []
            for v in f["reqs"] or ([p.vars.get(call["slot"], REQUEST_NULL)] if "slot" in call else []):
                rec = p.p2p.get(v)
                if rec is not None and rec.direction == "recv":
                    src = "any" if rec.peer == ANY_SOURCE else rec.peer
                    waits.append(f"message from rank {src} tag {rec.tag}")
                elif v != REQUEST_NULL and not isinstance(p.vt_req.entries.get(v), Done):
                    waits.append("collective arrival of " + _others(p, call.get("comm", WORLD)))
            if f["stage"] == "lh":
                waits.append("lower-half collective arrival of " + _others(p, call.get("comm", WORLD)))
            lines.append(f"  rank {p.rank}: in {desc} stage {f['stage']} waiting for "
                         + ("; ".join(waits) or "nothing"))
        return "\n".join(lines)

    def metrics(self) -> dict:
        calls: dict = {}
        m = {"steps": self.step, "lh_entries": 0, "req_hwm": 0, "barrier_insertions": 0,
             "coll_calls": 0, "emulated": 0}
        for p in self.procs:
            for k, v in p.metrics.calls.items():
                calls[k] = calls.get(k, 0) + v
            m["lh_entries"] += p.ctx.lh_entries
            m["req_hwm"] = max(m["req_hwm"], p.metrics.req_hwm)
            m["barrier_insertions"] += p.metrics.barrier_insertions
            m["coll_calls"] += p.metrics.coll_calls
            m["emulated"] += p.metrics.emulated
        for k, v in sorted(calls.items()):
            m[f"calls.{k}"] = v
        m["checkpoints"] = len(self.drains)
        m["drain_iterations"] = sum(d.iterations for d in self.drains)
        m["drain_bytes"] = sum(d.bytes for d in self.drains)
        m["drain_messages"] = sum(d.messages for d in self.drains)
        m["coll_per_step"] = round(m["coll_calls"] / max(self.step, 1), 6)
        return m

    def _outcome(self, deadlock) -> RunOutcome:
        outputs = {p.rank: self.workload.output(p.vars) for p in self.procs if p.finished}
        return RunOutcome(
            outputs=outputs,
            finished=all(p.finished for p in self.procs),
            deadlock=deadlock,
            steps=self.step,
            checkpoints=len(self.drains),
            metrics=self.metrics(),
            phase_trace=list(self.coord.trace),
            coordinator_events=list(self.coord.events),
            drains=list(self.drains),
            restarts=list(self.restarts),
            coverage=set(self.coverage),
            request_tables={p.rank: len(p.vt_req) for p in self.procs},
            trace=self.trace,
        )


def _digest(result) -> int:
    if isinstance(result, tuple):  # test: (done, status)
        result = result[1]
    if isinstance(result, Status):
        result = (result.src, result.tag, result.count, result.payload)
    return zlib.crc32(repr(result).encode())


def _others(p: UpperHalf, vcomm) -> str:
    try:
        members = [m for m in p.members(vcomm) if m != p.rank]
    except Exception:
        members = []
    return "ranks " + ",".join(str(m) for m in members)


def run(workload: Workload, seed: int = 0, mode: str = "hybrid-2pc", inject_at=(), kill=True,
        ckpt_dir=None, **kw) -> RunOutcome:
    return System(workload, seed, mode, inject_at, kill, ckpt_dir, **kw).run()
