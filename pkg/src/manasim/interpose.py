"""Upper-half wrapper layer.

Every application call goes through a wrapper that translates virtual handles,
splits blocking calls into a post step and a completion loop, keeps the
per-pair byte counters, and logs what a restart needs to replay.  Wrapper
progress lives in a plain-dict *frame* so a process can be serialized at any
yield point between two steps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import runtime as lh
from .errors import (
    ConfigurationError,
    InvalidOperation,
    UnknownVirtualHandle,
)
from .runtime import (
    ALL_ARRIVAL_KINDS,
    ANY_SOURCE,
    REQUEST_NULL as REAL_REQUEST_NULL,
    TAG_UB,
    RealComm,
    RealRequest,
    Status,
    pack_blocks,
    reduce_contributions,
    unpack_blocks,
)

WORLD = 1  # virtual id of COMM_WORLD, identical in every process
COMM_NULL = 0
REQUEST_NULL = 0  # what the application sees once a request is retired
COLL_TAG = TAG_UB  # point-to-point tag of emulated collectives

MODES = ("naive-barrier", "p2p-emulation", "hybrid-2pc")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def gid_of(members) -> int:
    """Communicator id shared by every member, computed without communication."""
    return fnv1a64(b"".join(int(m).to_bytes(4, "little") for m in sorted(members)))


class _Null:
    """Real side of a virtual request after the first retirement step."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NULL"


NULL = _Null()


@dataclass
class Done:
    """Completion observed by the wrapper layer but not yet by the application."""

    status: Status


@dataclass
class Pending:
    """Placeholder real side of a request loaded from an image, until rebound."""


class VirtualHandleTable:
    """virtual id -> real handle, hashed so lookups do not depend on table size."""

    def __init__(self, kind: str, next_id: int = 1):
        self.kind = kind
        self.entries: dict[int, Any] = {}
        self.next_id = next_id

    def add(self, real) -> int:
        vid = self.next_id
        self.next_id += 1
        self.entries[vid] = real
        return vid

    def insert(self, vid: int, real):
        self.entries[vid] = real
        self.next_id = max(self.next_id, vid + 1)

    def lookup(self, vid: int):
        try:
            return self.entries[vid]
        except KeyError:
            raise UnknownVirtualHandle(f"unknown virtual {self.kind} {vid}") from None

    def update(self, vid: int, real):
        if vid not in self.entries:
            raise UnknownVirtualHandle(f"unknown virtual {self.kind} {vid}")
        self.entries[vid] = real

    def remove(self, vid: int):
        if vid not in self.entries:
            raise UnknownVirtualHandle(f"unknown virtual {self.kind} {vid}")
        del self.entries[vid]

    def __contains__(self, vid):
        return vid in self.entries

    def __len__(self):
        return len(self.entries)


class PairCounters:
    """This process's row and column of the global byte/message counters.

    ``sent[j]`` is what this process sent to world rank j; ``received[i]`` is
    what it has delivered from world rank i.  Message counts ride alongside the
    byte counts so zero-byte envelopes are visible to the drain.
    """

    def __init__(self, n: int):
        self.sent_bytes = np.zeros(n, dtype=np.int64)
        self.sent_msgs = np.zeros(n, dtype=np.int64)
        self.recv_bytes = np.zeros(n, dtype=np.int64)
        self.recv_msgs = np.zeros(n, dtype=np.int64)

    def on_send(self, dst: int, nbytes: int):
        self.sent_bytes[dst] += nbytes
        self.sent_msgs[dst] += 1

    def on_recv(self, src: int, nbytes: int):
        self.recv_bytes[src] += nbytes
        self.recv_msgs[src] += 1


class P2PCounterMatrix:
    """Global view assembled from every process's :class:`PairCounters`."""

    def __init__(self, sent: np.ndarray, received: np.ndarray, sent_msgs=None, received_msgs=None):
        self.sent = sent
        self.received = received
        self.sent_msgs = sent_msgs
        self.received_msgs = received_msgs

    @classmethod
    def gather(cls, procs):
        sent = np.stack([p.counters.sent_bytes for p in procs])
        sent_m = np.stack([p.counters.sent_msgs for p in procs])
        # received[i][j]: bytes received at j from i
        recv = np.stack([p.counters.recv_bytes for p in procs]).T
        recv_m = np.stack([p.counters.recv_msgs for p in procs]).T
        return cls(sent, recv, sent_m, recv_m)


@dataclass
class P2PRecord:
    vreq: int
    direction: str  # "send" | "recv"
    peer: int  # world rank, or ANY_SOURCE
    tag: int
    comm: int
    count: int = 0
    completed: bool = False
    internal: bool = False


@dataclass
class CollRecord:
    vreq: int  # 0 once retired or for blocking instances
    kind: str
    comm: int
    root: int
    op: str
    contribution: bytes
    real_seq: int
    app_seq: int
    retired: bool = False
    settled: bool = False

    @property
    def digest(self) -> int:
        return fnv1a64(self.contribution)


@dataclass
class CommDescriptor:
    vid: int
    members: tuple
    gid: int
    dup: int

    @property
    def key(self):
        return (self.gid, self.dup)


@dataclass
class WrapperContext:
    in_lower_half: bool = False
    ckpt_pending: bool = False
    lh_entries: int = 0


@dataclass
class DrainedMessage:
    src: int
    tag: int
    comm: int
    gid: int
    payload: bytes
    arrival: int


@dataclass
class ProcessReport:
    rank: int
    in_collective: bool
    gid: int | None
    safe: bool
    seq: int | None = None
    members: tuple | None = None
    key: tuple | None = None


@dataclass
class Metrics:
    calls: dict = field(default_factory=dict)
    req_hwm: int = 0
    barrier_insertions: int = 0
    coll_calls: int = 0
    emulated: int = 0
    steps: int = 0


class UpperHalf:
    """Wrapper state plus application state of one simulated process.

    ``program`` is a list of application steps (see :mod:`manasim.workloads`);
    it is code, regenerated at restart, while ``pc``/``vars``/``frame`` are the
    memory that a checkpoint saves.
    """

    def __init__(self, rank: int, nprocs: int, program, init_vars: dict, mode: str,
                 runtime: lh.Runtime, workload: dict | None = None):
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.rank = rank
        self.size = nprocs
        self.program = program
        self.mode = mode
        self.rt = runtime
        self.workload = workload or {}
        self.pc = 0
        self.vars = dict(init_vars)
        self.frame: dict | None = None
        self.finished = False
        self.ctx = WrapperContext()
        self.vt_comm = VirtualHandleTable("comm", next_id=WORLD)
        self.vt_group = VirtualHandleTable("group")
        self.vt_req = VirtualHandleTable("request")
        self.vt_comm.insert(WORLD, runtime.world)
        self.counters = PairCounters(nprocs)
        self.p2p: dict[int, P2PRecord] = {}
        self.replay_log: list[CollRecord] = []
        self.comms: dict[int, CommDescriptor] = {}
        self.zombies: dict[int, CommDescriptor] = {}
        self.zombie_real: dict[int, RealComm] = {}
        self.groups: dict[int, tuple] = {}
        self.buffers: list[DrainedMessage] = []
        self.real_seq: dict[int, int] = {}
        self.app_seq: dict[int, int] = {}
        self.emu_first: dict[int, int] = {}
        self.emu_ranges: dict[int, list] = {}
        self.dup_counts: dict[int, int] = {}
        self.metrics = Metrics()
        self._lh_req: RealRequest | None = None  # in-flight blocking lower-half call
        world = CommDescriptor(WORLD, tuple(range(nprocs)), gid_of(range(nprocs)), 0)
        self.world_desc = world

    # -- helpers -----------------------------------------------------------

    def _enter(self):
        self.ctx.lh_entries += 1

    def _count(self, op):
        self.metrics.calls[op] = self.metrics.calls.get(op, 0) + 1

    def _hwm(self):
        if len(self.vt_req) > self.metrics.req_hwm:
            self.metrics.req_hwm = len(self.vt_req)

    def desc(self, vcomm: int) -> CommDescriptor:
        if vcomm == WORLD:
            return self.world_desc
        if vcomm in self.comms:
            return self.comms[vcomm]
        if vcomm in self.zombies:
            return self.zombies[vcomm]
        raise UnknownVirtualHandle(f"unknown virtual comm {vcomm}")

    def real_comm(self, vcomm: int) -> RealComm:
        if vcomm in self.zombies:
            return self.zombie_real[vcomm]
        return self.vt_comm.lookup(vcomm)

    def members(self, vcomm: int) -> tuple:
        return self.desc(vcomm).members

    def to_world(self, vcomm: int, local: int) -> int:
        if local == ANY_SOURCE:
            return ANY_SOURCE
        m = self.members(vcomm)
        if not 0 <= local < len(m):
            raise lh.InvalidRank(f"local rank {local} outside communicator of size {len(m)}")
        return m[local]

    def comm_gid(self, vcomm: int) -> int:
        """Globally unique (w.h.p.) id of ``vcomm`` from local data only."""
        c = self.real_comm(vcomm)
        self._enter()
        members = self.rt.lh_translate_group_ranks(c, self.rank)
        return gid_of(members)

    def safe(self) -> bool:
        return not self.ctx.in_lower_half

    # -- virtual point-to-point primitives ----------------------------------

    def _post_send(self, vcomm, dst_world, tag, payload, internal) -> int:
        c = self.real_comm(vcomm)
        self._enter()
        h = self.rt.lh_isend(self.rank, dst_world, tag, c, payload)
        v = self.vt_req.add(h)
        self.p2p[v] = P2PRecord(v, "send", dst_world, tag, vcomm, len(payload), internal=internal)
        self.counters.on_send(dst_world, len(payload))
        self._hwm()
        return v

    def _take_buffer(self, src_world, tag, vcomm):
        for i, b in enumerate(self.buffers):
            if b.comm == vcomm and (src_world == ANY_SOURCE or b.src == src_world) \
                    and lh.tag_matches(b.tag, tag):
                return self.buffers.pop(i)
        return None

    def _post_recv(self, vcomm, src_world, tag, internal) -> int:
        c = self.real_comm(vcomm)
        buf = self._take_buffer(src_world, tag, vcomm)
        if buf is not None:
            # drained before the checkpoint: replay it ahead of the network
            real = Done(Status(buf.src, buf.tag, len(buf.payload), buf.payload))
            self.counters.on_recv(buf.src, len(buf.payload))
        else:
            self._enter()
            real = self.rt.lh_irecv(self.rank, src_world, tag, c)
        v = self.vt_req.add(real)
        self.p2p[v] = P2PRecord(v, "recv", src_world, tag, vcomm, internal=internal)
        self._hwm()
        return v

    def _ready(self, v) -> bool:
        if v == REQUEST_NULL:
            return True
        real = self.vt_req.lookup(v)
        if real is NULL or isinstance(real, Done):
            return True
        return self.rt.lh_ready(real)

    def _harvest(self, v):
        """Drive the real request behind ``v``; return its status once complete.

        A completion is remembered as :class:`Done` so it is counted once and
        survives until the application observes it.
        """
        real = self.vt_req.lookup(v)
        if real is NULL:
            return True, None
        if isinstance(real, Done):
            return True, real.status
        self._enter()
        done, st = self.rt.lh_test(self.rank, real)
        if not done:
            return False, None
        rec = self.p2p.get(v)
        if rec is not None and rec.direction == "recv":
            self.counters.on_recv(st.src, st.count)
            rec.count = st.count
        self.vt_req.update(v, Done(st))
        return True, st

    def _retire_internal(self, v):
        self.vt_req.remove(v)
        self.p2p.pop(v, None)

    # -- collective bookkeeping ---------------------------------------------

    def _next_real(self, vcomm):
        s = self.real_seq.get(vcomm, 0)
        self.real_seq[vcomm] = s + 1
        return s

    def settle(self, vcomm, upto_real_seq):
        """Mark instances on ``vcomm`` up to ``upto_real_seq`` as entered by every member.

        Settled instances are never replayed; they leave the log once the
        application has also retired them.
        """
        for r in self.replay_log:
            if r.comm == vcomm and r.real_seq <= upto_real_seq:
                r.settled = True
        self._prune(vcomm)

    def _prune(self, vcomm):
        self.replay_log = [r for r in self.replay_log if not (r.settled and r.retired)]
        self._reap_zombie(vcomm)

    def _reap_zombie(self, vcomm):
        if vcomm in self.zombies and not any(r.comm == vcomm and not r.settled for r in self.replay_log):
            del self.zombies[vcomm]
            self.replay_log = [r for r in self.replay_log if r.comm != vcomm]
            c = self.zombie_real.pop(vcomm)
            if c.epoch == self.rt.epoch:
                self._enter()
                self.rt.lh_comm_free(c, self.rank)
            for d in (self.real_seq, self.app_seq, self.emu_first, self.emu_ranges):
                d.pop(vcomm, None)

    def _record_for(self, v):
        for r in self.replay_log:
            if r.vreq == v:
                return r
        return None

    def _coll_retired(self, v, st):
        rec = self._record_for(v)
        if rec is None:
            return
        rec.vreq = 0
        rec.retired = True
        if rec.kind in ALL_ARRIVAL_KINDS:
            self.settle(rec.comm, rec.real_seq)
        else:
            self._prune(rec.comm)

    # -- application-visible wrappers (single step) --------------------------

    def wrap_isend(self, dst: int, tag: int, vcomm: int, payload: bytes) -> int:
        return self._post_send(vcomm, self.to_world(vcomm, dst), tag, payload, internal=False)

    def wrap_irecv(self, src: int, tag: int, vcomm: int) -> int:
        return self._post_recv(vcomm, self.to_world(vcomm, src), tag, internal=False)

    def _app_status(self, v, st):
        if st is None or st.src is None:
            return st
        rec = self.p2p.get(v)
        if rec is None:
            return st
        m = self.members(rec.comm)
        return Status(m.index(st.src), st.tag, st.count, st.payload)

    def wrap_test(self, slot: str):
        """Test the request stored in application variable ``slot``.

        Point-to-point requests retire in two steps: the completing test
        repoints the table entry at NULL, the next test or wait removes it and
        nulls the application variable.  Non-blocking collectives retire at
        once.
        """
        v = self.vars.get(slot, REQUEST_NULL)
        if v == REQUEST_NULL:
            return True, None
        real = self.vt_req.lookup(v)
        if real is NULL:
            self.vt_req.remove(v)
            self.p2p.pop(v, None)
            self.vars[slot] = REQUEST_NULL
            return True, None
        done, st = self._harvest(v)
        if not done:
            return False, None
        if v in self.p2p:
            st = self._app_status(v, st)
            self.vt_req.update(v, NULL)
            self.p2p[v].completed = True
        else:
            self.vt_req.remove(v)
            self.vars[slot] = REQUEST_NULL
            self._coll_retired(v, st)
        return True, st

    def wrap_icollective(self, vcomm: int, kind: str, contribution: bytes = b"",
                         root: int = 0, op: str = "sum") -> int:
        c = self.real_comm(vcomm)
        self.metrics.coll_calls += 1
        app_i = self.app_seq.get(vcomm, 0)
        self.app_seq[vcomm] = app_i + 1
        s = self._next_real(vcomm)
        self._enter()
        h = self.rt.lh_icollective(self.rank, c, kind, contribution, root, op)
        v = self.vt_req.add(h)
        self._hwm()
        self.replay_log.append(CollRecord(v, kind, vcomm, root, op, bytes(contribution), s, app_i))
        return v

    def wrap_comm_free(self, vcomm: int):
        if vcomm == WORLD:
            raise InvalidOperation("cannot free COMM_WORLD")
        c = self.vt_comm.lookup(vcomm)
        desc = self.comms.pop(vcomm)
        self.vt_comm.remove(vcomm)
        if any(r.comm == vcomm and not r.settled for r in self.replay_log):
            # keep it reachable for replay until its rooted collectives settle
            self.zombies[vcomm] = desc
            self.zombie_real[vcomm] = c
            return
        self.replay_log = [r for r in self.replay_log if r.comm != vcomm]
        self._enter()
        self.rt.lh_comm_free(c, self.rank)
        for d in (self.real_seq, self.app_seq, self.emu_first, self.emu_ranges):
            d.pop(vcomm, None)

    def wrap_comm_group(self, vcomm: int) -> int:
        c = self.real_comm(vcomm)
        self._enter()
        g = self.rt.lh_comm_group(c)
        vg = self.vt_group.add(g)
        self.groups[vg] = tuple(g.members)
        return vg

    def wrap_group_incl(self, vgroup: int, ranks) -> int:
        g = self.vt_group.lookup(vgroup)
        self._enter()
        ng = self.rt.lh_group_incl(g, list(ranks))
        vg = self.vt_group.add(ng)
        self.groups[vg] = tuple(ng.members)
        return vg

    def wrap_group_free(self, vgroup: int):
        g = self.vt_group.lookup(vgroup)
        self._enter()
        self.rt.lh_group_free(g)
        self.vt_group.remove(vgroup)
        self.groups.pop(vgroup, None)

    def _register_comm(self, comm: RealComm | None) -> int:
        if comm is None:
            return COMM_NULL
        vid = self.vt_comm.add(comm)
        gid = self.comm_gid(vid)
        # same-membership comms are created in the same order at every member
        dup = self.dup_counts.get(gid, 0)
        self.dup_counts[gid] = dup + 1
        self.comms[vid] = CommDescriptor(vid, tuple(comm.members), gid, dup)
        return vid

    # -- stepping ----------------------------------------------------------

    def ready(self) -> bool:
        if self.finished:
            return False
        f = self.frame
        if f is None:
            return True
        stage = f["stage"]
        if stage in ("wait", "nbarrier", "emu"):
            return all(self._ready(v) for v in f["reqs"])
        if stage == "lh":
            return self.rt.lh_ready(self._lh_req)
        if stage == "app-wait":
            v = self.vars.get(f["call"]["slot"], REQUEST_NULL)
            return self._ready(v)
        return True

    def step(self):
        """Advance by one action; between two calls the process is at a yield point.

        Returns ``(call, result)`` when an application call completes, else None.
        """
        self.metrics.steps += 1
        if self.frame is None:
            if self.pc >= len(self.program):
                self.finished = True
                return None
            call = self.program[self.pc].issue(self.vars)
            self._count(call["op"])
            self.frame = {"call": call, "stage": "start", "reqs": []}
        done, result = self._advance(self.frame)
        if not done:
            return None
        call = self.frame["call"]
        then = self.program[self.pc].then
        self.frame = None
        self.pc += 1
        if then is not None:
            then(self.vars, result)
        if self.pc >= len(self.program):
            self.finished = True
        return call, result

    def _advance(self, f):
        call = f["call"]
        op = call["op"]
        handler = getattr(self, "_op_" + op, None)
        if handler is None:
            raise InvalidOperation(f"unknown application call {op!r}")
        return handler(f, call)

    # each _op_ handler returns (done, result)

    def _op_compute(self, f, call):
        f["left"] = f.get("left", call.get("steps", 1)) - 1
        return f["left"] <= 0, None

    def _op_send(self, f, call):
        vcomm = call.get("comm", WORLD)
        if f["stage"] == "start":
            dst = self.to_world(vcomm, call["dst"])
            f["reqs"] = [self._post_send(vcomm, dst, call["tag"], call["payload"], internal=True)]
            f["stage"] = "wait"
            return False, None
        (v,) = f["reqs"]
        done, _ = self._harvest(v)
        if not done:
            return False, None
        self._retire_internal(v)
        return True, None

    def _op_recv(self, f, call):
        vcomm = call.get("comm", WORLD)
        if f["stage"] == "start":
            src = self.to_world(vcomm, call["src"])
            f["reqs"] = [self._post_recv(vcomm, src, call["tag"], internal=True)]
            f["stage"] = "wait"
            return False, None
        (v,) = f["reqs"]
        done, st = self._harvest(v)
        if not done:
            return False, None
        st = self._app_status(v, st)
        self._retire_internal(v)
        return True, st

    def _op_isend(self, f, call):
        v = self.wrap_isend(call["dst"], call["tag"], call.get("comm", WORLD), call["payload"])
        self.vars[call["slot"]] = v
        return True, v

    def _op_irecv(self, f, call):
        v = self.wrap_irecv(call["src"], call["tag"], call.get("comm", WORLD))
        self.vars[call["slot"]] = v
        return True, v

    def _op_test(self, f, call):
        return True, self.wrap_test(call["slot"])

    def _op_wait(self, f, call):
        # a loop around test; every failed iteration is a yield point
        f["stage"] = "app-wait"
        done, st = self.wrap_test(call["slot"])
        return done, st

    def _op_icollective(self, f, call):
        v = self.wrap_icollective(call.get("comm", WORLD), call["kind"], call.get("data", b""),
                                  call.get("root", 0), call.get("reduce", "sum"))
        self.vars[call["slot"]] = v
        return True, v

    def _op_comm_free(self, f, call):
        self.wrap_comm_free(call["comm"])
        return True, None

    def _op_comm_group(self, f, call):
        return True, self.wrap_comm_group(call.get("comm", WORLD))

    def _op_group_incl(self, f, call):
        return True, self.wrap_group_incl(call["group"], call["ranks"])

    def _op_group_free(self, f, call):
        self.wrap_group_free(call["group"])
        return True, None

    def _lh_blocking(self, f, start):
        """Enter a blocking lower-half call; the process is unsafe until it returns."""
        self.ctx.in_lower_half = True
        self._enter()
        self._lh_req = start()
        f["stage"] = "lh"

    def _lh_finish(self):
        self._enter()
        done, st = self.rt.lh_test(self.rank, self._lh_req)
        if not done:
            return None
        self._lh_req = None
        self.ctx.in_lower_half = False
        return st

    def _op_comm_split(self, f, call):
        vcomm = call.get("comm", WORLD)
        if f["stage"] == "start":
            c = self.real_comm(vcomm)
            self.app_seq[vcomm] = self.app_seq.get(vcomm, 0) + 1
            f["seq"] = self._next_real(vcomm)
            if "group" in call:
                g = self.vt_group.lookup(call["group"])
                self._lh_blocking(f, lambda: self.rt.lh_comm_create(self.rank, c, g))
            else:
                self._lh_blocking(f, lambda: self.rt.lh_comm_split(self.rank, c, call["color"], call["key"]))
            return False, None
        st = self._lh_finish()
        if st is None:
            return False, None
        self.settle(vcomm, f["seq"])
        return True, self._register_comm(st.value)

    _op_comm_create = _op_comm_split

    # -- blocking collectives ----------------------------------------------

    def _in_emu_range(self, vcomm, app_i):
        return any(lo <= app_i < hi for lo, hi in self.emu_ranges.get(vcomm, ()))

    def _choose_path(self, vcomm, app_i):
        if self.mode == "naive-barrier":
            return "naive"
        if self.mode == "p2p-emulation":
            return "emu"
        if self._in_emu_range(vcomm, app_i):
            return "emu"
        if not self.ctx.ckpt_pending:
            return "real"
        self._enter()
        if self.rt.lh_collective_started(self.rank, self.real_comm(vcomm)):
            return "real"
        self.emu_first.setdefault(vcomm, app_i)
        return "emu"

    def _enter_real(self, f, call, vcomm):
        c = self.real_comm(vcomm)
        kind, root, rop = call["kind"], call.get("root", 0), call.get("reduce", "sum")
        data = call.get("data", b"")
        s = self._next_real(vcomm)
        f["seq"] = s
        if kind == "bcast":
            # the root may return before the others arrive; keep it for replay
            self.replay_log.append(CollRecord(0, kind, vcomm, root, rop, bytes(data), s, f["app_i"]))
        self._lh_blocking(f, lambda: self.rt.lh_collective(self.rank, c, kind, data, root, rop))

    def _op_collective(self, f, call):
        vcomm = call.get("comm", WORLD)
        kind = call["kind"]
        stage = f["stage"]
        if stage == "start":
            self.real_comm(vcomm)
            self.metrics.coll_calls += 1
            app_i = self.app_seq.get(vcomm, 0)
            self.app_seq[vcomm] = app_i + 1
            f["app_i"] = app_i
            path = f["path"] = self._choose_path(vcomm, app_i)
            if path == "naive":
                self.metrics.barrier_insertions += 1
                f["reqs"] = [self._internal_ibarrier(vcomm, app_i)]
                f["stage"] = "nbarrier"
            elif path == "real":
                self._enter_real(f, call, vcomm)
            else:
                self.metrics.emulated += 1
                f["stage"] = "emu"
                f["phase"] = 0
                return self._emulate(f, call, vcomm)
            return False, None
        if stage == "nbarrier":
            (v,) = f["reqs"]
            done, st = self._harvest(v)
            if not done:
                return False, None
            self.vt_req.remove(v)
            self._coll_retired(v, st)
            f["reqs"] = []
            self._enter_real(f, call, vcomm)
            return False, None
        if stage == "lh":
            st = self._lh_finish()
            if st is None:
                return False, None
            if kind in ALL_ARRIVAL_KINDS:
                self.settle(vcomm, f["seq"])
            else:
                for r in self.replay_log:
                    if r.comm == vcomm and r.real_seq == f["seq"]:
                        r.retired = True
                self._prune(vcomm)
            return True, st.payload
        return self._emulate(f, call, vcomm)

    def _internal_ibarrier(self, vcomm, app_i):
        c = self.real_comm(vcomm)
        s = self._next_real(vcomm)
        self._enter()
        h = self.rt.lh_icollective(self.rank, c, "barrier")
        v = self.vt_req.add(h)
        self._hwm()
        self.replay_log.append(CollRecord(v, "barrier", vcomm, 0, "sum", b"", s, app_i))
        return v

    def _emulate(self, f, call, vcomm):
        """Collective built from checkpoint-safe point-to-point calls.

        Results are bit-identical to the lower-half engine: reductions and
        alltoall blocks are combined in local-rank order.
        """
        members = self.members(vcomm)
        n = len(members)
        me = members.index(self.rank)
        kind = call["kind"]
        data = call.get("data", b"")
        root = call.get("root", 0) if kind == "bcast" else 0
        phase = f["phase"]

        def send(local, payload):
            return self._post_send(vcomm, members[local], COLL_TAG, payload, internal=True)

        def recv(local):
            return self._post_recv(vcomm, members[local], COLL_TAG, internal=True)

        if phase > 0:
            # every phase ends with all of its requests complete
            results = []
            for v in f["reqs"]:
                done, st = self._harvest(v)
                if not done:
                    return False, None
            for v in f["reqs"]:
                _, st = self._harvest(v)
                results.append(st.payload if self.p2p[v].direction == "recv" else None)
                self._retire_internal(v)
            f["reqs"] = []
        if kind == "alltoall":
            if phase == 0:
                blocks = unpack_blocks(data)
                if len(blocks) != n:
                    raise lh.ProtocolViolation(f"alltoall needs {n} blocks, got {len(blocks)}")
                f["reqs"] = [recv(j) for j in range(n) if j != me]
                f["reqs"] += [send(j, blocks[j]) for j in range(n) if j != me]
                f["phase"] = 1
                return False, None
            blocks = unpack_blocks(data)
            got = iter(results[: n - 1])
            out = [blocks[me] if j == me else next(got) for j in range(n)]
            return True, pack_blocks(out)
        if kind == "bcast":
            if phase == 0:
                if me == root:
                    f["reqs"] = [send(j, data) for j in range(n) if j != me]
                    f["result"] = data
                else:
                    f["reqs"] = [recv(root)]
                f["phase"] = 1
                return False, None
            return True, (f["result"] if me == root else results[0])
        # barrier and allreduce: fan in to local rank 0, fan out from it
        if n == 1:
            return True, (b"" if kind == "barrier" else reduce_contributions(call.get("reduce", "sum"), [data]))
        if phase == 0:
            if me == 0:
                f["reqs"] = [recv(j) for j in range(1, n)]
            else:
                f["reqs"] = [send(0, data), recv(0)]
            f["phase"] = 1
            return False, None
        if me != 0:
            return True, results[1]
        if phase == 1:
            if kind == "barrier":
                res = b""
            else:
                res = reduce_contributions(call.get("reduce", "sum"), [data] + results)
            f["result"] = res
            f["reqs"] = [send(j, res) for j in range(1, n)]
            f["phase"] = 2
            return False, None
        return True, f["result"]

    # -- checkpoint support ------------------------------------------------

    def report(self) -> ProcessReport:
        f = self.frame
        if self.ctx.in_lower_half and f is not None:
            d = self.desc(f["call"].get("comm", WORLD))
            return ProcessReport(self.rank, True, d.gid, False, f.get("seq"), d.members, d.key)
        return ProcessReport(self.rank, False, None, self.safe())

    def comm_keys(self):
        """(vid, descriptor, real comm) for every communicator this process can drain."""
        out = [(WORLD, self.world_desc, self.vt_comm.lookup(WORLD))]
        for vid, d in self.comms.items():
            out.append((vid, d, self.vt_comm.lookup(vid)))
        for vid, d in self.zombies.items():
            out.append((vid, d, self.zombie_real[vid]))
        return out

    def harvest_local(self):
        """Record completions that need no peer: eager sends and released collectives."""
        for v, real in list(self.vt_req.entries.items()):
            if not isinstance(real, RealRequest) or real is REAL_REQUEST_NULL:
                continue
            rec = self.p2p.get(v)
            if rec is not None and rec.direction == "recv":
                continue
            if self.rt.lh_ready(real):
                self._harvest(v)
                crec = self._record_for(v)
                if crec is not None and crec.kind in ALL_ARRIVAL_KINDS:
                    # released, so every member arrived: no replay needed
                    self.settle(crec.comm, crec.real_seq)

    def outstanding_requests(self) -> int:
        return len(self.vt_req)

    # -- serialization -----------------------------------------------------

    def export_state(self) -> dict:
        """Image sections of this process.  Real handles are reduced to markers."""
        if self.ctx.in_lower_half or self._lh_req is not None:
            raise InvalidOperation(f"rank {self.rank} is inside the lower half")

        def marker(real):
            if real is NULL:
                return "null"
            if isinstance(real, Done):
                st = real.status
                return {"done": [st.src, st.tag, st.count, st.payload]}
            return "pending"

        app = {
            "workload": self.workload, "mode": self.mode, "pc": self.pc, "vars": self.vars,
            "frame": self.frame, "finished": self.finished,
            "real_seq": _pairs(self.real_seq), "app_seq": _pairs(self.app_seq),
            "emu_first": _pairs(self.emu_first), "emu_ranges": _pairs(self.emu_ranges),
            "dup_counts": _pairs(self.dup_counts), "metrics": asdict(self.metrics),
            "lh_entries": self.ctx.lh_entries,
        }
        vtables = {
            "comm": {"next": self.vt_comm.next_id, "ids": sorted(self.vt_comm.entries)},
            "group": {"next": self.vt_group.next_id, "ids": sorted(self.vt_group.entries)},
            "request": {"next": self.vt_req.next_id,
                        "entries": [[v, marker(r)] for v, r in sorted(self.vt_req.entries.items())]},
        }
        c = self.counters
        counters = {"sent_bytes": c.sent_bytes.tolist(), "sent_msgs": c.sent_msgs.tolist(),
                    "recv_bytes": c.recv_bytes.tolist(), "recv_msgs": c.recv_msgs.tolist()}
        comms = {
            "world": asdict(self.world_desc),
            "comms": [asdict(d) for _, d in sorted(self.comms.items())],
            "zombies": [asdict(d) for _, d in sorted(self.zombies.items())],
            "groups": [[v, list(m)] for v, m in sorted(self.groups.items())],
        }
        return {
            "app-state": app,
            "vtables": vtables,
            "counters": counters,
            "p2p-list": [asdict(r) for _, r in sorted(self.p2p.items())],
            "replay-log": [asdict(r) for r in self.replay_log if not r.settled],
            "active-comms": comms,
            "drained-buffers": [asdict(b) for b in self.buffers],
        }

    @classmethod
    def from_state(cls, rank: int, sections: dict, program, runtime: lh.Runtime) -> "UpperHalf":
        """Rebuild the upper half from image sections.

        Communicators and unfinished requests come back as :class:`Pending`
        placeholders; the restart engine rebinds them to the new lower half.
        """
        app = sections["app-state"]
        n = len(sections["counters"]["sent_bytes"])
        self = cls(rank, n, program, app["vars"], app["mode"], runtime, app["workload"])
        self.pc = app["pc"]
        self.frame = app["frame"]
        self.finished = app["finished"]
        self.real_seq = _unpairs(app["real_seq"])
        self.app_seq = _unpairs(app["app_seq"])
        self.emu_first = _unpairs(app["emu_first"])
        self.emu_ranges = _unpairs(app["emu_ranges"])
        self.dup_counts = _unpairs(app["dup_counts"])
        self.metrics = Metrics(**app["metrics"])
        self.ctx.lh_entries = app["lh_entries"]

        vt = sections["vtables"]
        for vid in vt["comm"]["ids"]:
            if vid != WORLD:
                self.vt_comm.insert(vid, Pending())
        self.vt_comm.next_id = vt["comm"]["next"]
        for vid in vt["group"]["ids"]:
            self.vt_group.insert(vid, Pending())
        self.vt_group.next_id = vt["group"]["next"]
        for vid, m in vt["request"]["entries"]:
            if m == "null":
                real = NULL
            elif m == "pending":
                real = Pending()
            else:
                src, tag, count, payload = m["done"]
                real = Done(Status(src, tag, count, payload))
            self.vt_req.insert(vid, real)
        self.vt_req.next_id = vt["request"]["next"]

        c = sections["counters"]
        for name in ("sent_bytes", "sent_msgs", "recv_bytes", "recv_msgs"):
            setattr(self.counters, name, np.array(c[name], dtype=np.int64))
        self.p2p = {r["vreq"]: P2PRecord(**r) for r in sections["p2p-list"]}
        self.replay_log = [CollRecord(**r) for r in sections["replay-log"]]
        ac = sections["active-comms"]
        self.world_desc = _desc(ac["world"])
        self.comms = {d["vid"]: _desc(d) for d in ac["comms"]}
        self.zombies = {d["vid"]: _desc(d) for d in ac["zombies"]}
        self.groups = {v: tuple(m) for v, m in ac["groups"]}
        self.buffers = [DrainedMessage(**b) for b in sections["drained-buffers"]]
        return self


def _pairs(d: dict) -> list:
    return [[k, v] for k, v in sorted(d.items())]


def _unpairs(pairs) -> dict:
    return {k: v for k, v in pairs}


def _desc(d: dict) -> CommDescriptor:
    return CommDescriptor(d["vid"], tuple(d["members"]), d["gid"], d["dup"])
