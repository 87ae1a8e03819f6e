"""Checkpoint coordinator and the drain / commit protocol run by the wrappers.

The coordinator itself only flips phases and broadcasts the pending flag.
Everything that involves per-pair data (counter exchange, draining, the
per-communicator collective bookkeeping) is carried out by the processes over
the lower half, on a private duplicate of the world communicator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointAborted, DrainStuck, GidCollision, InvalidOperation, RejectedBusy
from .image import CheckpointImage, decode_obj, encode_obj, write_image_set
from .interpose import WORLD, DrainedMessage, P2PCounterMatrix, ProcessReport, UpperHalf
from .runtime import ANY_SOURCE, ANY_TAG_ALL, RealRequest, Runtime, pack_blocks, unpack_blocks

PHASES = ("running", "ckpt-requested", "draining", "committed", "writing", "resumed")
_NEXT = {PHASES[i]: PHASES[(i + 1) % len(PHASES)] for i in range(len(PHASES))}


@dataclass
class DrainStats:
    iterations: int = 0
    bytes: int = 0
    messages: int = 0
    via_test: int = 0
    network_empty: bool = False
    balanced: bool = False


@dataclass
class CoordinatorState:
    phase: str = "running"
    round: int = 0
    reports: dict = field(default_factory=dict)


class Coordinator:
    """Phase machine for checkpoint rounds.

    ``events`` is the coordinator's side channel: it carries phase changes and
    the pending flag, never counters.
    """

    def __init__(self):
        self.state = CoordinatorState()
        self.events: list[tuple] = []
        self.trace: list[tuple] = []  # (round, phase, step)
        self.frozen = False
        self._active: list[ProcessReport] = []

    @property
    def phase(self):
        return self.state.phase

    @property
    def round(self):
        return self.state.round

    def _goto(self, phase, step):
        if _NEXT[self.state.phase] != phase:
            raise InvalidOperation(f"phase {self.state.phase} cannot move to {phase}")
        self.state.phase = phase
        self.trace.append((self.state.round, phase, step))

    def request_checkpoint(self, procs, step: int = 0):
        if self.state.phase != "running":
            self.events.append(("rejected-busy", self.state.round, step))
            raise RejectedBusy(f"round {self.state.round} is still in phase {self.state.phase}")
        self.state.round += 1
        self._goto("ckpt-requested", step)
        for p in procs:
            p.ctx.ckpt_pending = True
        self.frozen = True
        self.events.append(("ckpt-pending", self.state.round, step))

    def collect_reports(self, procs) -> dict:
        reports = {p.rank: p.report() for p in procs}
        seen = {}
        for r in reports.values():
            if r.in_collective:
                other = seen.setdefault(r.gid, sorted(r.members))
                if other != sorted(r.members):
                    raise GidCollision(f"gid {r.gid:#x} names {other} and {r.members}")
        self.state.reports = reports
        self._active = [r for r in reports.values() if r.in_collective]
        return reports

    def all_safe(self) -> bool:
        return all(r.safe for r in self.state.reports.values())

    def allowed(self, proc: UpperHalf) -> bool:
        """Freeze policy while a round is pending.

        Only processes that still have to reach a collective some member is
        blocked in may run, so unrelated work does not start new lower-half
        calls.  The policy is lifted if it stalls everyone.
        """
        if not self.frozen or proc.ctx.in_lower_half:
            return True
        for rep in self._active:
            for vid, d, _ in proc.comm_keys():
                if d.key == rep.key and proc.real_seq.get(vid, 0) <= rep.seq:
                    return True
        return False

    def unfreeze_all(self, step: int = 0):
        self.frozen = False
        self.events.append(("unfreeze", self.state.round, step))

    def checkpoint(self, procs, rt: Runtime, step: int = 0, ckpt_dir=None):
        """Drain, commit and serialize.  Returns ``(blobs, DrainStats)``.

        On a serialization or write failure the round is abandoned and the
        phase returns to running.
        """
        reports = self.collect_reports(procs)
        unsafe = [r for r, rep in reports.items() if not rep.safe]
        if unsafe:
            raise InvalidOperation(f"ranks {unsafe} are inside the lower half")
        self._goto("draining", step)
        rt.step = step  # the wrapper exchanges below are logged at the checkpoint step
        stats = drain_p2p(procs, rt)
        exchange_collective_state(procs, rt)
        self._goto("committed", step)
        self._goto("writing", step)
        try:
            blobs = {}
            for p in procs:
                if p.ctx.in_lower_half:
                    raise InvalidOperation(f"rank {p.rank} entered the lower half during the round")
                sections = p.export_state()
                sections["app-state"]["round"] = self.state.round
                blobs[p.rank] = CheckpointImage(p.rank, len(procs), rt.epoch, sections).to_bytes()
            if ckpt_dir is not None:
                write_image_set(ckpt_dir, self.state.round, blobs)
        except (TypeError, ValueError, OSError, InvalidOperation) as exc:
            self.abort(procs, step)
            raise CheckpointAborted(f"round {self.state.round}: {exc}") from exc
        self.events.append(("written", self.state.round, step))
        return blobs, stats

    def resume(self, procs, step: int = 0):
        self._goto("resumed", step)
        for p in procs:
            p.ctx.ckpt_pending = False
        self.frozen = False
        self._goto("running", step)

    def abort(self, procs, step: int = 0):
        for p in procs:
            p.ctx.ckpt_pending = False
        self.frozen = False
        self.state.phase = "running"
        self.trace.append((self.state.round, "running", step))
        self.events.append(("aborted", self.state.round, step))


def _internal_alltoall(procs, rt: Runtime, blocks_of) -> dict:
    """Alltoall among every process on the private world communicator."""
    reqs = {}
    for p in procs:
        p._enter()
        reqs[p.rank] = rt.lh_icollective(p.rank, rt.internal_world, "alltoall", pack_blocks(blocks_of(p)))
    out = {}
    for p in procs:
        p._enter()
        done, st = rt.lh_test(p.rank, reqs[p.rank])
        assert done, "alltoall with every member present must release"
        out[p.rank] = unpack_blocks(st.payload)
    return out


def _buffered_from(p: UpperHalf, src: int):
    b = m = 0
    for d in p.buffers:
        if d.src == src:
            b += len(d.payload)
            m += 1
    return b, m


def drain_p2p(procs, rt: Runtime) -> DrainStats:
    """Pull every in-flight point-to-point message into upper-half buffers.

    Each process learns from the counter exchange how many bytes and messages
    every peer sent it, and receives until its own counters plus buffers
    account for all of them.
    """
    n = len(procs)
    stats = DrainStats()
    for p in procs:
        p.harvest_local()
    got = _internal_alltoall(
        procs, rt,
        lambda p: [struct.pack("<qq", int(p.counters.sent_bytes[j]), int(p.counters.sent_msgs[j])) for j in range(n)],
    )
    for p in procs:
        expected = [struct.unpack("<qq", b) for b in got[p.rank]]
        _drain_one(p, rt, expected, stats)

    leftover = rt.p2p_inflight()
    stats.network_empty = not leftover
    if leftover:
        m = leftover[0]
        raise DrainStuck(m.src, m.dst, len(m.payload), 1)
    mat = P2PCounterMatrix.gather(procs)
    buffered = np.zeros((n, n), dtype=np.int64)
    for p in procs:
        for d in p.buffers:
            buffered[d.src, p.rank] += len(d.payload)
    bad = np.argwhere(mat.sent != mat.received + buffered)
    stats.balanced = bad.size == 0
    if bad.size:
        i, j = (int(x) for x in bad[0])
        raise DrainStuck(i, j, int(mat.sent[i, j] - mat.received[i, j] - buffered[i, j]), 0)
    return stats


def _drain_one(p: UpperHalf, rt: Runtime, expected, stats: DrainStats):
    def missing(i):
        bb, bm = _buffered_from(p, i)
        return (expected[i][0] - int(p.counters.recv_bytes[i]) - bb,
                expected[i][1] - int(p.counters.recv_msgs[i]) - bm)

    n = len(expected)
    while True:
        short = [i for i in range(n) if missing(i) != (0, 0)]
        if not short:
            return
        stats.iterations += 1
        progress = False
        for i in short:
            for vid, d, real in p.comm_keys():
                if i not in d.members:
                    continue
                while missing(i)[1] > 0:
                    p._enter()
                    found, st = rt.lh_iprobe(p.rank, i, ANY_TAG_ALL, real)
                    if not found:
                        break
                    h = rt.lh_irecv(p.rank, i, st.tag, real)
                    _, st = rt.lh_test(p.rank, h)
                    arrival = p.buffers[-1].arrival + 1 if p.buffers else 0
                    p.buffers.append(DrainedMessage(i, st.tag, vid, d.gid, st.payload, arrival))
                    stats.bytes += len(st.payload)
                    stats.messages += 1
                    progress = True
            if missing(i)[1] > 0:
                # invisible to probe: a posted receive already claimed it
                for v, rec in list(p.p2p.items()):
                    if rec.direction != "recv" or rec.peer not in (i, ANY_SOURCE):
                        continue
                    real = p.vt_req.entries.get(v)
                    if isinstance(real, RealRequest) and rt.lh_ready(real):
                        p._harvest(v)
                        stats.via_test += 1
                        progress = True
        if not progress:
            i = short[0]
            raise DrainStuck(i, p.rank, *missing(i))


def exchange_collective_state(procs, rt: Runtime):
    """Agree, per communicator, on what every member has entered.

    Instances below the smallest entered count are settled everywhere and
    need no replay.  Instances that were emulated in this round are pinned to
    emulation for every member that has yet to reach them.
    """
    n = len(procs)

    def rows(p):
        out = []
        for vid, d, _ in p.comm_keys():
            out.append([d.gid, d.dup, list(d.members), p.real_seq.get(vid, 0),
                        p.app_seq.get(vid, 0), p.emu_first.get(vid, -1)])
        return [encode_obj(out)] * n

    got = _internal_alltoall(procs, rt, rows)
    for p in procs:
        merged: dict[tuple, list] = {}
        for blob in got[p.rank]:
            for gid, dup, members, real_n, app_n, emu in decode_obj(blob):
                key = (gid, dup)
                agg = merged.get(key)
                if agg is None:
                    merged[key] = [tuple(members), real_n, app_n, emu]
                    continue
                if agg[0] != tuple(members):
                    raise GidCollision(f"communicator key {key} names {agg[0]} and {tuple(members)}")
                agg[1] = min(agg[1], real_n)
                agg[2] = max(agg[2], app_n)
                if emu >= 0:
                    agg[3] = emu if agg[3] < 0 else min(agg[3], emu)
        for vid, d, _ in list(p.comm_keys()):
            _, real_min, app_max, emu = merged[d.key]
            if emu >= 0:
                p.emu_ranges.setdefault(vid, []).append([emu, app_max])
            if vid == WORLD or vid in p.comms or vid in p.zombies:
                p.settle(vid, real_min - 1)
        p.emu_first.clear()
