"""Restart from a checkpoint image set.

A new lower half is started at the next epoch.  Only communicators that are
still in some process's active list are created, straight from their
membership; unfinished non-blocking collectives are replayed and unfinished
receives re-posted, and every virtual handle is rebound to its new real handle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import CorruptImage, IncompatibleImage, RestartIncomplete, RestartInconsistency
from .image import VERSION, CheckpointImage
from .interpose import Done, Pending, UpperHalf, VirtualHandleTable
from .runtime import Runtime, Status, lh_init


@dataclass
class RestartPlan:
    images: list
    epoch: int
    comm_order: list  # [(key, members)] sorted by (size, gid, dup)


@dataclass
class RestartStats:
    comms_created: int = 0
    replayed: int = 0
    rebound: int = 0
    orphans: int = 0
    recvs_reposted: int = 0
    recvs_from_buffer: int = 0
    comm_create_events: int = 0
    rebinds: dict = field(default_factory=dict)


def rebind(vtable: VirtualHandleTable, vid: int, real):
    """Point ``vid`` at an epoch-current handle; application memory is untouched."""
    if vid not in vtable:
        raise RestartInconsistency(f"no virtual {vtable.kind} {vid} to rebind")
    vtable.entries[vid] = real


def load_images(blobs) -> list[CheckpointImage]:
    """Decode and cross-check a complete image set, ordered by rank."""
    if isinstance(blobs, dict):
        blobs = [blobs[k] for k in sorted(blobs)]
    if not blobs:
        raise RestartIncomplete("no images")
    imgs = [CheckpointImage.from_bytes(b) if isinstance(b, (bytes, bytearray)) else b for b in blobs]
    n = imgs[0].world_size
    for img in imgs:
        if img.version != VERSION:
            raise IncompatibleImage(f"rank {img.rank} image has format version {img.version}")
        if img.world_size != n:
            raise IncompatibleImage(f"rank {img.rank} image is for {img.world_size} processes, not {n}")
        if img.epoch != imgs[0].epoch or img.sections["app-state"].get("round") != imgs[0].sections["app-state"].get("round"):
            raise IncompatibleImage(f"rank {img.rank} image is from a different checkpoint round")
    ranks = sorted(img.rank for img in imgs)
    if len(set(ranks)) != len(ranks):
        raise CorruptImage(f"duplicate rank images {ranks}")
    absent = sorted(set(range(n)) - set(ranks))
    if absent:
        raise RestartIncomplete(f"missing images for ranks {absent}")
    return sorted(imgs, key=lambda i: i.rank)


def plan_restart(imgs) -> RestartPlan:
    table = {}
    for img in imgs:
        ac = img.sections["active-comms"]
        for d in ac["comms"] + ac["zombies"]:
            key = (d["gid"], d["dup"])
            members = tuple(d["members"])
            if table.setdefault(key, members) != members:
                raise RestartInconsistency(f"communicator {key} has two memberships")
    order = sorted(table.items(), key=lambda kv: (len(kv[1]), kv[0][0], kv[0][1]))
    return RestartPlan(imgs, imgs[0].epoch + 1, order)


def restart(images, seed: int | None = None, program_for=None):
    """Return ``(runtime, processes, stats)`` ready for the scheduler.

    ``program_for(rank, workload_spec)`` regenerates a process's code; by
    default the workload registry is used.  ``seed`` only matters to the
    caller's scheduler and is accepted for symmetry with a fresh run.
    """
    if program_for is None:
        from .workloads import program_for
    imgs = load_images(images)
    plan = plan_restart(imgs)
    n = imgs[0].world_size
    rt: Runtime = lh_init(n, plan.epoch)
    stats = RestartStats()
    procs = []
    for img in imgs:
        spec = img.sections["app-state"]["workload"]
        procs.append(UpperHalf.from_state(img.rank, img.sections, program_for(img.rank, spec, n), rt))

    before = len(rt.events)
    real = {}
    for key, members in plan.comm_order:
        real[key] = rt.lh_comm_from_members(members)
        stats.comms_created += 1
    stats.comm_create_events = sum(1 for e in rt.events[before:] if e.op == "comm_create")
    for p in procs:
        for vid, d in p.comms.items():
            rebind(p.vt_comm, vid, real[d.key])
        for vid, d in p.zombies.items():
            p.zombie_real[vid] = real[d.key]
        for vg, members in p.groups.items():
            rebind(p.vt_group, vg, rt.lh_group_from_members(members))

    # replay unsettled collective instances in the order each process entered them
    for p in procs:
        for rec in sorted(p.replay_log, key=lambda r: (r.comm, r.real_seq)):
            p._enter()
            h = rt.lh_icollective(p.rank, p.real_comm(rec.comm), rec.kind, rec.contribution, rec.root, rec.op)
            stats.replayed += 1
            if rec.vreq and isinstance(p.vt_req.entries.get(rec.vreq), Pending):
                rebind(p.vt_req, rec.vreq, h)
                stats.rebound += 1
            else:
                # completed here but not yet entered by every member
                stats.orphans += 1

    # re-post receives that were still open, drained data first
    for p in procs:
        for v, rec in sorted(p.p2p.items()):
            if not isinstance(p.vt_req.entries.get(v), Pending):
                continue
            if rec.direction == "send":
                raise RestartInconsistency(f"rank {p.rank}: send request {v} was not complete at checkpoint")
            buf = p._take_buffer(rec.peer, rec.tag, rec.comm)
            if buf is not None:
                p.vt_req.entries[v] = Done(Status(buf.src, buf.tag, len(buf.payload), buf.payload))
                p.counters.on_recv(buf.src, len(buf.payload))
                stats.recvs_from_buffer += 1
            else:
                p._enter()
                rebind(p.vt_req, v, rt.lh_irecv(p.rank, rec.peer, rec.tag, p.real_comm(rec.comm)))
                stats.recvs_reposted += 1

    for p in procs:
        for table in (p.vt_comm, p.vt_group, p.vt_req):
            left = [v for v, r in table.entries.items() if isinstance(r, Pending)]
            if left:
                raise RestartInconsistency(f"rank {p.rank}: {table.kind} ids {left} were never rebound")
    return rt, procs, stats
