"""Deterministic simulated message-passing runtime (the "lower half").

Everything in this module is throw-away state: a checkpoint never serializes a
:class:`Runtime`, and a restart builds a brand new one at the next epoch.
Handles carry the epoch that issued them so that a handle leaking across a
restart is rejected instead of silently aliasing a new object.
"""

from __future__ import annotations

import random
import struct
import zlib
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import (
    InvalidConfiguration,
    InvalidOperation,
    InvalidRank,
    ProtocolViolation,
    StaleHandle,
)

ANY_SOURCE = -1
ANY_TAG = -1  # user tags only
ANY_TAG_ALL = -2  # every tag, wrapper-internal ones included
TAG_UB = 1 << 30  # tags at or above this are reserved for the wrapper layer
UNDEFINED = -32766

COLLECTIVE_KINDS = ("barrier", "bcast", "allreduce", "alltoall", "split")
REDUCE_OPS = ("sum", "max", "bxor")
# Collectives whose completion at any member implies every member arrived.
ALL_ARRIVAL_KINDS = frozenset({"barrier", "allreduce", "alltoall", "split"})

NETWORK_OPS = frozenset({"isend", "deliver", "coll_deposit", "comm_create"})

Event = namedtuple("Event", "step proc op digest")


@dataclass(frozen=True)
class RealComm:
    id: int
    members: tuple
    epoch: int

    @property
    def size(self):
        return len(self.members)


@dataclass(frozen=True)
class RealGroup:
    id: int
    members: tuple
    epoch: int


@dataclass(frozen=True)
class RealRequest:
    id: int
    kind: str  # "p2p-send" | "p2p-recv" | "nb-collective" | "collective"
    epoch: int


REQUEST_NULL = RealRequest(0, "null", -1)


@dataclass
class Status:
    src: int | None
    tag: int | None
    count: int
    payload: bytes = b""
    value: Any = None  # split/create result


@dataclass
class Message:
    src: int
    dst: int
    comm: int
    tag: int
    payload: bytes
    seq: int
    arrival: int
    claimed: bool = False


@dataclass
class _Req:
    handle: RealRequest
    owner: int
    done: bool = False
    status: Status | None = None
    # receive side
    src: int = ANY_SOURCE
    tag: int = ANY_TAG
    comm: int = 0
    msg: Message | None = None
    # collective side
    key: tuple | None = None


@dataclass
class _Rendezvous:
    kind: str
    root: int
    op: str
    comm: RealComm
    contrib: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    collected: set = field(default_factory=set)


def pack_blocks(blocks: Sequence[bytes]) -> bytes:
    """Frame a sequence of byte blocks (alltoall contributions and results)."""
    out = bytearray()
    for b in blocks:
        out += struct.pack("<I", len(b))
        out += b
    return bytes(out)


def unpack_blocks(data: bytes) -> list[bytes]:
    blocks, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ProtocolViolation("truncated block framing")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ProtocolViolation("truncated block framing")
        blocks.append(bytes(data[pos:pos + n]))
        pos += n
    return blocks


def reduce_contributions(op: str, contribs: Sequence[bytes]) -> bytes:
    """Element-wise reduction of little-endian int64 vectors."""
    if op not in REDUCE_OPS:
        raise ProtocolViolation(f"unsupported reduction {op!r}")
    if len({len(c) for c in contribs}) > 1 or len(contribs[0]) % 8:
        raise ProtocolViolation("allreduce contributions must be equal-length int64 vectors")
    arrs = np.stack([np.frombuffer(c, dtype="<i8") for c in contribs])
    if op == "sum":
        res = np.add.reduce(arrs, axis=0, dtype=np.int64)
    elif op == "max":
        res = np.maximum.reduce(arrs, axis=0)
    else:
        res = np.bitwise_xor.reduce(arrs, axis=0)
    return res.astype("<i8").tobytes()


def _digest(args) -> int:
    return zlib.crc32(repr(args).encode())


def tag_matches(msg_tag: int, tag: int) -> bool:
    if tag == ANY_TAG_ALL:
        return True
    if tag == ANY_TAG:
        return msg_tag < TAG_UB
    return msg_tag == tag


class Runtime:
    """One lower-half instance: communicators, transport and collectives."""

    def __init__(self, n: int, epoch: int = 0):
        if n < 1:
            raise InvalidConfiguration(f"process count must be >= 1, got {n}")
        self.size = n
        self.epoch = epoch
        self.step = 0
        self.events: list[Event] = []
        self._next_id = 1
        self._comms: dict[int, RealComm] = {}
        self._groups: dict[int, RealGroup] = {}
        self._reqs: dict[int, _Req] = {}
        self._inbox: list[list[Message]] = [[] for _ in range(n)]
        self._posted: list[list[_Req]] = [[] for _ in range(n)]
        self._chan_seq: dict[tuple, int] = {}
        self._arrival = 0
        self._rdv: dict[tuple, _Rendezvous] = {}
        self._coll_count: dict[tuple, int] = {}
        self._freed: dict[int, set] = {}
        self.world = self._new_comm(tuple(range(n)), log=False)
        # private duplicate of the world for wrapper-internal exchanges, so they
        # can never match a collective the application left half-entered
        self.internal_world = self._new_comm(tuple(range(n)), log=False)

    # -- bookkeeping -------------------------------------------------------

    def _log(self, proc, op, *args):
        self.events.append(Event(self.step, proc, op, _digest(args)))

    def _alloc(self):
        i = self._next_id
        self._next_id += 1
        return i

    def _new_comm(self, members, log=True):
        c = RealComm(self._alloc(), tuple(members), self.epoch)
        self._comms[c.id] = c
        if log:
            self._log(-1, "comm_create", c.members)
        return c

    def _check_comm(self, c: RealComm) -> RealComm:
        if c.epoch != self.epoch:
            raise StaleHandle(f"communicator {c.id} is from epoch {c.epoch}, runtime is at {self.epoch}")
        if c.id not in self._comms:
            raise InvalidOperation(f"communicator {c.id} has been freed")
        return c

    def _check_group(self, g: RealGroup) -> RealGroup:
        if g.epoch != self.epoch:
            raise StaleHandle(f"group {g.id} is from epoch {g.epoch}, runtime is at {self.epoch}")
        if g.id not in self._groups:
            raise InvalidOperation(f"group {g.id} has been freed")
        return g

    def _req(self, r: RealRequest) -> _Req:
        if r.epoch != self.epoch:
            raise StaleHandle(f"request {r.id} is from epoch {r.epoch}, runtime is at {self.epoch}")
        try:
            return self._reqs[r.id]
        except KeyError:
            raise InvalidOperation(f"unknown request {r.id}") from None

    def _member(self, c: RealComm, rank: int):
        if rank not in c.members:
            raise InvalidRank(f"rank {rank} is not a member of communicator {c.id}")

    def network_events(self, since: int = 0) -> list[Event]:
        return [e for e in self.events[since:] if e.op in NETWORK_OPS]

    def event_log_bytes(self) -> bytes:
        return "\n".join(f"{e.step} {e.proc} {e.op} {e.digest:08x}" for e in self.events).encode()

    # -- point to point ----------------------------------------------------

    def lh_isend(self, p: int, dst: int, tag: int, c: RealComm, payload: bytes) -> RealRequest:
        self._check_comm(c)
        self._member(c, p)
        self._member(c, dst)
        chan = (p, dst, c.id, tag)
        seq = self._chan_seq.get(chan, 0)
        self._chan_seq[chan] = seq + 1
        self._arrival += 1
        msg = Message(p, dst, c.id, tag, bytes(payload), seq, self._arrival)
        self._inbox[dst].append(msg)
        posted = self._posted[dst]
        for i, rq in enumerate(posted):
            if self._matches(msg, rq.src, rq.tag, rq.comm):
                rq.msg = msg
                msg.claimed = True
                del posted[i]
                break
        h = RealRequest(self._alloc(), "p2p-send", self.epoch)
        # eager model: the send is complete once the data sits in the network
        self._reqs[h.id] = _Req(h, p, done=True, status=Status(None, tag, len(payload)))
        self._log(p, "isend", dst, tag, c.id, len(payload))
        return h

    @staticmethod
    def _matches(msg, src, tag, comm):
        return (msg.comm == comm and not msg.claimed
                and (src == ANY_SOURCE or msg.src == src) and tag_matches(msg.tag, tag))

    def _find(self, p, src, tag, comm):
        for msg in self._inbox[p]:
            if self._matches(msg, src, tag, comm):
                return msg
        return None

    def lh_irecv(self, p: int, src: int, tag: int, c: RealComm) -> RealRequest:
        self._check_comm(c)
        self._member(c, p)
        if src != ANY_SOURCE:
            self._member(c, src)
        h = RealRequest(self._alloc(), "p2p-recv", self.epoch)
        rq = _Req(h, p, src=src, tag=tag, comm=c.id)
        msg = self._find(p, src, tag, c.id)
        if msg is not None:
            msg.claimed = True
            rq.msg = msg
        else:
            self._posted[p].append(rq)
        self._reqs[h.id] = rq
        self._log(p, "irecv", src, tag, c.id)
        return h

    def lh_iprobe(self, p: int, src: int, tag: int, c: RealComm):
        """Non-destructive look for an unclaimed message; returns (found, status)."""
        self._check_comm(c)
        self._member(c, p)
        self._log(p, "iprobe", src, tag, c.id)
        msg = self._find(p, src, tag, c.id)
        if msg is None:
            return False, None
        return True, Status(msg.src, msg.tag, len(msg.payload))

    def lh_ready(self, r: RealRequest) -> bool:
        """Whether a test of ``r`` would succeed.  Scheduler query, not an MPI call."""
        if r is REQUEST_NULL or r.id == 0:
            return True
        rq = self._req(r)
        if rq.done:
            return True
        if rq.key is not None:
            rdv = self._rdv.get(rq.key)
            return rdv is not None and rq.owner in rdv.results
        return rq.msg is not None

    def lh_test(self, p: int, r: RealRequest):
        if r is REQUEST_NULL or r.id == 0:
            return True, None
        rq = self._req(r)
        self._log(p, "test", r.id)
        if rq.done:
            return True, rq.status
        if rq.key is not None:
            rdv = self._rdv.get(rq.key)
            if rdv is None or rq.owner not in rdv.results:
                return False, None
            res = rdv.results[rq.owner]
            if isinstance(res, bytes):
                rq.status = Status(None, None, len(res), res)
            else:
                rq.status = Status(None, None, 0, b"", res)
            rq.done = True
            rdv.collected.add(rq.owner)
            if len(rdv.collected) == rdv.comm.size:
                del self._rdv[rq.key]
            return True, rq.status
        msg = rq.msg
        if msg is None:
            return False, None
        self._inbox[msg.dst].remove(msg)
        rq.done = True
        rq.status = Status(msg.src, msg.tag, len(msg.payload), msg.payload)
        self._log(p, "deliver", msg.src, msg.tag, msg.comm, len(msg.payload))
        return True, rq.status

    def p2p_inflight(self, dst: int | None = None) -> list[Message]:
        boxes = self._inbox if dst is None else [self._inbox[dst]]
        return [m for box in boxes for m in box]

    # -- collectives -------------------------------------------------------

    def _deposit(self, p, c, kind, contribution, root, op):
        self._check_comm(c)
        self._member(c, p)
        if kind not in COLLECTIVE_KINDS:
            raise ProtocolViolation(f"unknown collective {kind!r}")
        if kind == "bcast" and not 0 <= root < c.size:
            raise InvalidRank(f"bcast root {root} outside communicator of size {c.size}")
        idx = self._coll_count.get((p, c.id), 0)
        self._coll_count[(p, c.id)] = idx + 1
        key = (c.id, idx)
        rdv = self._rdv.get(key)
        if rdv is None:
            rdv = self._rdv[key] = _Rendezvous(kind, root, op, c)
        elif (rdv.kind, rdv.root, rdv.op) != (kind, root, op):
            raise ProtocolViolation(
                f"rank {p} called {kind}(root={root}, op={op}) but instance {idx} on "
                f"communicator {c.id} is {rdv.kind}(root={rdv.root}, op={rdv.op})"
            )
        rdv.contrib[p] = contribution
        self._log(p, "coll_deposit", kind, c.id, idx)
        self._release(rdv)
        return key

    def _release(self, rdv: _Rendezvous):
        members = rdv.comm.members
        if rdv.kind == "bcast":
            root = members[rdv.root]
            if root in rdv.contrib:
                for m in rdv.contrib:
                    rdv.results.setdefault(m, rdv.contrib[root])
            return
        if rdv.results or len(rdv.contrib) < len(members):
            return
        if rdv.kind == "barrier":
            for m in members:
                rdv.results[m] = b""
        elif rdv.kind == "allreduce":
            res = reduce_contributions(rdv.op, [rdv.contrib[m] for m in members])
            for m in members:
                rdv.results[m] = res
        elif rdv.kind == "alltoall":
            blocks = {m: unpack_blocks(rdv.contrib[m]) for m in members}
            for m, bl in blocks.items():
                if len(bl) != len(members):
                    raise ProtocolViolation(f"rank {m} supplied {len(bl)} alltoall blocks, expected {len(members)}")
            for i, m in enumerate(members):
                rdv.results[m] = pack_blocks([blocks[j][i] for j in members])
        else:  # split
            colors: dict[int, list] = {}
            for m in members:
                color, key = rdv.contrib[m]
                colors.setdefault(color, []).append((key, m))
            for color in sorted(colors):
                if color == UNDEFINED:
                    for _, m in colors[color]:
                        rdv.results[m] = None
                    continue
                new = self._new_comm(m for _, m in sorted(colors[color]))
                for _, m in colors[color]:
                    rdv.results[m] = new

    def _coll_request(self, p, key, kind):
        h = RealRequest(self._alloc(), kind, self.epoch)
        self._reqs[h.id] = _Req(h, p, key=key)
        return h

    def lh_icollective(self, p: int, c: RealComm, kind: str, contribution: bytes = b"",
                       root: int = 0, op: str = "sum") -> RealRequest:
        key = self._deposit(p, c, kind, bytes(contribution), root, op)
        return self._coll_request(p, key, "nb-collective")

    def lh_collective(self, p: int, c: RealComm, kind: str, contribution: bytes = b"",
                      root: int = 0, op: str = "sum") -> RealRequest:
        """Blocking collective entry.

        The cooperative model cannot block inside a call, so the caller gets a
        request and must stay inside the lower half until :meth:`lh_ready`.
        """
        key = self._deposit(p, c, kind, bytes(contribution), root, op)
        return self._coll_request(p, key, "collective")

    def lh_collective_started(self, p: int, c: RealComm) -> bool:
        """Local check whether a peer already entered ``p``'s next instance on ``c``."""
        self._check_comm(c)
        idx = self._coll_count.get((p, c.id), 0)
        self._log(p, "coll_probe", c.id, idx)
        return (c.id, idx) in self._rdv

    def lh_comm_split(self, p: int, c: RealComm, color: int, key: int) -> RealRequest:
        """Collective split; the new communicator is ``status.value`` of the completed request."""
        k = self._deposit(p, c, "split", (color, key), 0, "sum")
        return self._coll_request(p, k, "collective")

    def lh_comm_create(self, p: int, c: RealComm, g: RealGroup) -> RealRequest:
        self._check_group(g)
        if p in g.members:
            return self.lh_comm_split(p, c, 0, g.members.index(p))
        return self.lh_comm_split(p, c, UNDEFINED, 0)

    def lh_comm_from_members(self, members: Sequence[int]) -> RealComm:
        """Create a communicator from an explicit membership (restart path)."""
        for m in members:
            if not 0 <= m < self.size:
                raise InvalidRank(f"rank {m} outside world of size {self.size}")
        if len(set(members)) != len(members) or not members:
            raise InvalidConfiguration(f"bad membership {members!r}")
        return self._new_comm(tuple(members))

    def lh_comm_free(self, c: RealComm, p: int):
        """Local free by member ``p``; the object goes once every member let go."""
        self._check_comm(c)
        self._member(c, p)
        if c.id in (self.world.id, self.internal_world.id):
            raise InvalidOperation("cannot free COMM_WORLD")
        gone = self._freed.setdefault(c.id, set())
        if p in gone:
            raise InvalidOperation(f"rank {p} already freed communicator {c.id}")
        gone.add(p)
        if len(gone) == c.size:
            del self._comms[c.id]
            del self._freed[c.id]

    def lh_translate_group_ranks(self, c: RealComm, p: int = -1) -> list[int]:
        self._check_comm(c)
        self._log(p, "translate", c.id)
        return list(c.members)

    # -- groups ------------------------------------------------------------

    def _new_group(self, members):
        g = RealGroup(self._alloc(), tuple(members), self.epoch)
        self._groups[g.id] = g
        return g

    def lh_comm_group(self, c: RealComm) -> RealGroup:
        self._check_comm(c)
        return self._new_group(c.members)

    def lh_group_incl(self, g: RealGroup, ranks: Sequence[int]) -> RealGroup:
        self._check_group(g)
        for r in ranks:
            if not 0 <= r < len(g.members):
                raise InvalidRank(f"group rank {r} outside group of size {len(g.members)}")
        return self._new_group(g.members[r] for r in ranks)

    def lh_group_from_members(self, members: Sequence[int]) -> RealGroup:
        return self._new_group(members)

    def lh_group_free(self, g: RealGroup):
        self._check_group(g)
        del self._groups[g.id]


def lh_init(n: int, epoch: int = 0) -> Runtime:
    return Runtime(n, epoch)


class Scheduler:
    """Seeded pick among runnable processes.

    A process that has been runnable but unpicked for ``window`` consecutive
    picks is chosen next, so every runnable step is eventually taken.
    """

    def __init__(self, seed: int, window: int = 64):
        self.seed = seed
        self.rng = random.Random(seed)
        self.window = window
        self.picks = 0
        self._waiting: dict[int, int] = {}

    def pick(self, runnable: Sequence[int]) -> int:
        if not runnable:
            raise ValueError("nothing to schedule")
        self.picks += 1
        starving = [p for p in runnable if self._waiting.get(p, 0) >= self.window]
        choice = min(starving) if starving else runnable[self.rng.randrange(len(runnable))]
        for p in runnable:
            self._waiting[p] = 0 if p == choice else self._waiting.get(p, 0) + 1
        return choice
