"""Deterministic application programs and their reference outputs.

A program is a flat list of :class:`Step` objects.  ``issue(vars)`` builds the
wrapper call from the current variables, ``then(vars, result)`` folds the
result back in.  Programs are code and are rebuilt at restart; only ``vars``
and the program counter travel in the checkpoint image.

Each process's output is its final 64-bit accumulator, so comparing a native
run with a checkpointed one is a byte comparison.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfiguration
from .interpose import COMM_NULL, WORLD
from .runtime import Status, pack_blocks

TAG = 7
MASK63 = (1 << 63) - 1


class Step:
    __slots__ = ("issue", "then")

    def __init__(self, issue, then=None):
        if not callable(issue):
            call = dict(issue)
            issue = lambda v, c=call: dict(c)  # noqa: E731
        self.issue = issue
        self.then = then


def mix(acc: int, data: bytes) -> int:
    h = hashlib.blake2b(acc.to_bytes(8, "little") + data, digest_size=8)
    return int.from_bytes(h.digest(), "little")


def stamp(acc: int, r: int, nbytes: int) -> bytes:
    """Payload derived from an accumulator, ``nbytes`` long."""
    seed = hashlib.blake2b(acc.to_bytes(8, "little") + r.to_bytes(4, "little"), digest_size=16).digest()
    return (seed * (nbytes // 16 + 1))[:nbytes]


def i64(*vals) -> bytes:
    return np.array(vals, dtype="<i8").tobytes()


def _payload(res) -> bytes:
    if isinstance(res, Status):
        return res.payload
    return res if res is not None else b""


def absorb(v, res):
    v["acc"] = mix(v["acc"], _payload(res))


def noop():
    return {"op": "compute", "steps": 1}


@dataclass
class Workload:
    name: str
    nprocs: int
    params: dict = field(default_factory=dict)

    @property
    def spec(self) -> dict:
        return {"name": self.name, "nprocs": self.nprocs, "params": dict(self.params)}

    def build(self, rank: int):
        """(program, initial vars) of ``rank``."""
        return _REGISTRY[self.name][0](rank, self.nprocs, **self.params)

    def output(self, vars: dict) -> bytes:
        out = vars["acc"].to_bytes(8, "little")
        for b in vars.get("log", ()):
            out += struct.pack("<I", len(b)) + b
        return out

    def expected(self):
        """Reference outputs computed without the simulator, or None."""
        oracle = _REGISTRY[self.name][1]
        return None if oracle is None else oracle(self.nprocs, **self.params)


# -- p2p-ring ---------------------------------------------------------------

def p2p_ring_program(rank, n, rounds=10, msg_bytes=64):
    right, left = (rank + 1) % n, (rank - 1) % n
    prog = []
    for r in range(rounds):
        send = lambda v, r=r: {"op": "send", "dst": right, "tag": TAG,  # noqa: E731
                               "payload": stamp(v["acc"], r, msg_bytes)}
        if r % 2 == 0:
            prog += [Step(send), Step({"op": "recv", "src": left, "tag": TAG}, absorb)]
        else:
            isend = lambda v, r=r: {"op": "isend", "dst": right, "tag": TAG, "slot": "sq",  # noqa: E731
                                    "payload": stamp(v["acc"], r, msg_bytes)}
            prog += [
                Step({"op": "irecv", "src": left, "tag": TAG, "slot": "rq"}),
                Step(isend),
                Step({"op": "wait", "slot": "sq"}),
                Step({"op": "wait", "slot": "rq"}, absorb),
                # second look at each slot retires the request
                Step({"op": "test", "slot": "sq"}),
                Step({"op": "test", "slot": "rq"}),
            ]
    return prog, {"acc": rank + 1, "sq": 0, "rq": 0}


def p2p_ring_reference(n, rounds=10, msg_bytes=64):
    acc = [r + 1 for r in range(n)]
    for r in range(rounds):
        sent = [stamp(a, r, msg_bytes) for a in acc]
        acc = [mix(acc[i], sent[(i - 1) % n]) for i in range(n)]
    return {i: a.to_bytes(8, "little") for i, a in enumerate(acc)}


# -- collective-storm ---------------------------------------------------------

def _split_color(rank, r, every):
    return (rank + r // every) % 2


def collective_storm_program(rank, n, rounds=6, split_every=3):
    prog = []

    def bcast_root(v, r):
        return {"op": "collective", "kind": "bcast", "root": r % n,
                "data": stamp(v["acc"], r, 16) if rank == r % n else b""}

    def a2a(v, r):
        blocks = [bytes([rank % 256, j % 256, r % 256]) + v["acc"].to_bytes(8, "little") for j in range(n)]
        return {"op": "collective", "kind": "alltoall", "data": pack_blocks(blocks)}

    def keep_sub(v, res):
        v["old"], v["sub"] = v["sub"], res

    def free_old(v):
        return {"op": "comm_free", "comm": v["old"]} if v["old"] != COMM_NULL else noop()

    def ar(v, res):
        v["ar"] = int(np.frombuffer(res, dtype="<i8")[0])
        absorb(v, res)

    for r in range(rounds):
        prog += [
            Step({"op": "collective", "kind": "allreduce", "reduce": "sum", "data": i64(rank + r)}, ar),
            Step(lambda v, r=r: bcast_root(v, r), absorb),
            Step(lambda v, r=r: a2a(v, r), absorb),
            Step(lambda v: {"op": "icollective", "kind": "allreduce", "reduce": "max", "slot": "cq",
                            "data": i64(v["acc"] & MASK63)}),
            Step({"op": "compute", "steps": 2}),
            Step({"op": "wait", "slot": "cq"}, absorb),
        ]
        if r % split_every == 0:
            prog += [
                Step({"op": "comm_split", "color": _split_color(rank, r, split_every), "key": rank}, keep_sub),
                Step(free_old),
                Step(lambda v: {"op": "collective", "kind": "allreduce", "reduce": "sum", "comm": v["sub"],
                                "data": i64(v["acc"] % 1000)}, absorb),
                Step(lambda v, r=r: {"op": "collective", "kind": "bcast", "root": 0, "comm": v["sub"],
                                     "data": stamp(v["acc"], r, 8)}, absorb),
            ]
    return prog, {"acc": rank + 1, "sub": COMM_NULL, "old": COMM_NULL, "cq": 0, "ar": 0}


def collective_storm_reference(n, rounds=6, split_every=3):
    acc = [r + 1 for r in range(n)]
    for r in range(rounds):
        total = n * (n - 1) // 2 + n * r
        acc = [mix(a, i64(total)) for a in acc]
        root = r % n
        pay = stamp(acc[root], r, 16)
        acc = [mix(a, pay) for a in acc]
        blocks = {(j, i): bytes([j % 256, i % 256, r % 256]) + acc[j].to_bytes(8, "little")
                  for j in range(n) for i in range(n)}
        acc = [mix(acc[i], pack_blocks([blocks[(j, i)] for j in range(n)])) for i in range(n)]
        top = max(a & MASK63 for a in acc)
        acc = [mix(a, i64(top)) for a in acc]
        if r % split_every == 0:
            groups = {}
            for i in range(n):
                groups.setdefault(_split_color(i, r, split_every), []).append(i)
            new = list(acc)
            for members in groups.values():
                s = sum(acc[i] % 1000 for i in members)
                pay = stamp(mix(acc[members[0]], i64(s)), r, 8)
                for i in members:
                    new[i] = mix(mix(acc[i], i64(s)), pay)
            acc = new
    return {i: a.to_bytes(8, "little") for i, a in enumerate(acc)}


# -- straggler ----------------------------------------------------------------

def straggler_program(rank, n, delay=600, rounds=1):
    prog = []
    for r in range(rounds):
        if rank == 0 and delay > 0:
            prog.append(Step({"op": "compute", "steps": delay}))
        prog += [
            Step({"op": "collective", "kind": "barrier"}),
            Step({"op": "collective", "kind": "allreduce", "reduce": "sum", "data": i64(rank * (r + 1))}, absorb),
        ]
    return prog, {"acc": rank + 1}


def straggler_reference(n, delay=600, rounds=1):
    acc = [r + 1 for r in range(n)]
    for r in range(rounds):
        total = (r + 1) * n * (n - 1) // 2
        acc = [mix(a, i64(total)) for a in acc]
    return {i: a.to_bytes(8, "little") for i, a in enumerate(acc)}


# -- bcast-deadlock -----------------------------------------------------------

BCAST_DATA = b"bcast-from-0"
P2P_DATA = b"p2p-after-bcast"


def bcast_deadlock_program(rank, n):
    def log(v, res):
        v["log"].append(_payload(res))
        absorb(v, res)

    if rank == 0:
        prog = [
            Step({"op": "collective", "kind": "bcast", "root": 0, "data": BCAST_DATA}, log),
            Step({"op": "send", "dst": 1, "tag": TAG, "payload": P2P_DATA}),
        ]
    else:
        prog = [
            Step({"op": "recv", "src": 0, "tag": TAG}, log),
            Step({"op": "collective", "kind": "bcast", "root": 0, "data": b""}, log),
        ]
    return prog, {"acc": rank + 1, "log": []}


def bcast_deadlock_reference(n):
    a0 = mix(1, BCAST_DATA)
    a1 = mix(mix(2, P2P_DATA), BCAST_DATA)

    def out(a, logs):
        return a.to_bytes(8, "little") + b"".join(struct.pack("<I", len(b)) + b for b in logs)

    return {0: out(a0, [BCAST_DATA]), 1: out(a1, [P2P_DATA, BCAST_DATA])}


# -- comm-churn ---------------------------------------------------------------

def comm_churn_program(rank, n, created=20, freed=15, tail=200):
    def keep(v, res):
        v["comms"].append(res)

    prog = []
    for i in range(created):
        # same membership every time, alternating rank order
        prog.append(Step({"op": "comm_split", "color": 0, "key": rank if i % 2 == 0 else -rank}, keep))
    for i in range(freed):
        prog.append(Step(lambda v, i=i: {"op": "comm_free", "comm": v["comms"][i]}))
    for i in range(freed, created):
        prog.append(Step(lambda v, i=i: {"op": "collective", "kind": "allreduce", "reduce": "sum",
                                         "comm": v["comms"][i], "data": i64(rank + i)}, absorb))
    prog.append(Step({"op": "compute", "steps": tail}))
    for i in range(freed, created):
        prog.append(Step(lambda v, i=i: {"op": "collective", "kind": "allreduce", "reduce": "max",
                                         "comm": v["comms"][i], "data": i64(rank * i)}, absorb))
    return prog, {"acc": rank + 1, "comms": []}


def comm_churn_reference(n, created=20, freed=15, tail=200):
    acc = [r + 1 for r in range(n)]
    for i in range(freed, created):
        total = n * (n - 1) // 2 + n * i
        acc = [mix(a, i64(total)) for a in acc]
    for i in range(freed, created):
        acc = [mix(a, i64((n - 1) * i)) for a in acc]
    return {i: a.to_bytes(8, "little") for i, a in enumerate(acc)}


_REGISTRY = {
    "p2p-ring": (p2p_ring_program, p2p_ring_reference),
    "collective-storm": (collective_storm_program, collective_storm_reference),
    "straggler": (straggler_program, straggler_reference),
    "bcast-deadlock": (bcast_deadlock_program, bcast_deadlock_reference),
    "comm-churn": (comm_churn_program, comm_churn_reference),
}
WORKLOAD_NAMES = tuple(_REGISTRY)


def register_workload(name: str, program_fn, reference_fn=None):
    """Add a workload; ``program_fn(rank, n, **params) -> (program, vars)``."""
    _REGISTRY[name] = (program_fn, reference_fn)


def make_workload(name: str, nprocs: int, **params) -> Workload:
    if name not in _REGISTRY:
        raise InvalidConfiguration(f"unknown workload {name!r}; expected one of {tuple(_REGISTRY)}")
    if name == "bcast-deadlock" and nprocs != 2:
        raise InvalidConfiguration("bcast-deadlock needs exactly 2 processes")
    if name in WORKLOAD_NAMES and nprocs < 2:
        raise InvalidConfiguration(f"{name} needs at least 2 processes, got {nprocs}")
    if nprocs < 1:
        raise InvalidConfiguration(f"process count must be >= 1, got {nprocs}")
    return Workload(name, nprocs, params)


def workload_p2p_ring(n, rounds=10, msg_bytes=64):
    return make_workload("p2p-ring", n, rounds=rounds, msg_bytes=msg_bytes)


def workload_collective_storm(n, rounds=6, split_every=3):
    return make_workload("collective-storm", n, rounds=rounds, split_every=split_every)


def workload_straggler(n, delay=600, rounds=1):
    return make_workload("straggler", n, delay=delay, rounds=rounds)


def workload_bcast_deadlock():
    return make_workload("bcast-deadlock", 2)


def workload_comm_churn(n, created=20, freed=15, tail=200):
    return make_workload("comm-churn", n, created=created, freed=freed, tail=tail)


def program_for(rank: int, spec: dict, n: int):
    """Regenerate a process's code from the workload description in its image."""
    wl = Workload(spec["name"], spec.get("nprocs", n), spec.get("params", {}))
    return wl.build(rank)[0]
