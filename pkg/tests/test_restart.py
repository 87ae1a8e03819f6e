import pytest

from manasim import System, make_workload
from manasim.errors import CorruptImage, IncompatibleImage, RestartIncomplete, RestartInconsistency, StaleHandle
from manasim.image import CheckpointImage, read_image_set
from manasim.interpose import NULL, WORLD, Done, VirtualHandleTable
from manasim.restart import load_images, plan_restart, rebind, restart
from manasim.runtime import RealComm, RealRequest
from manasim.workloads import Step, absorb, i64, register_workload


def images_at(wl, k, seed=0):
    s = System(wl, seed, inject_at=[k], kill=False)
    s.keep_images = True
    s.run()
    return s.images[0]


def test_rebind_only_known_ids():
    t = VirtualHandleTable("comm")
    v = t.add("old")
    rebind(t, v, "new")
    assert t.lookup(v) == "new"
    with pytest.raises(RestartInconsistency):
        rebind(t, v + 1, "x")


def test_missing_rank_image_is_incomplete():
    blobs = images_at(make_workload("p2p-ring", 3, rounds=4), 12)
    del blobs[1]
    with pytest.raises(RestartIncomplete, match=r"\[1\]"):
        restart(blobs)
    with pytest.raises(RestartIncomplete):
        restart({})


def test_mixed_versions_and_rounds_are_incompatible():
    wl = make_workload("p2p-ring", 2, rounds=6)
    s = System(wl, 0, inject_at=[10, 30], kill=False)
    s.keep_images = True
    s.run()
    first, second = s.images
    with pytest.raises(IncompatibleImage):
        restart({0: first[0], 1: second[1]})
    img = CheckpointImage.from_bytes(first[1])
    img.version = 2
    with pytest.raises(IncompatibleImage):
        load_images([CheckpointImage.from_bytes(first[0]), img])


def test_corrupt_member_of_set_rejected():
    blobs = images_at(make_workload("p2p-ring", 2, rounds=4), 9)
    blobs[1] = blobs[1][:-1] + bytes([blobs[1][-1] ^ 1])
    with pytest.raises(CorruptImage):
        restart(blobs)


def test_restart_moves_to_next_epoch_and_drops_old_handles():
    wl = make_workload("collective-storm", 4, rounds=4)
    blobs = images_at(wl, 70)
    rt, procs, stats = restart(blobs)
    assert rt.epoch == 1
    for p in procs:
        for table in (p.vt_comm, p.vt_group, p.vt_req):
            for real in table.entries.values():
                if isinstance(real, (RealComm, RealRequest)):
                    assert real.epoch == 1
                else:
                    assert real is NULL or isinstance(real, Done)
    with pytest.raises(StaleHandle):
        rt.lh_isend(0, 1, 1, RealComm(1, (0, 1, 2, 3), 0), b"")


def test_virtual_ids_continue_after_restart():
    wl = make_workload("comm-churn", 3, created=6, freed=2, tail=40)
    s = System(wl, 0, inject_at=[60])
    live = {}
    s.on_checkpoint = lambda sys_, blobs: live.update(
        {p.rank: (p.vt_comm.next_id, p.vt_req.next_id, sorted(p.comms)) for p in sys_.procs})
    s.run()
    (rs,) = s.restarts
    live_after = {p.rank: (p.vt_comm.next_id, p.vt_req.next_id, sorted(p.comms)) for p in s.procs}
    assert live and all(len(ids) == 4 for _, _, ids in live.values())
    # the restarted processes kept numbering where the checkpointed ones stopped
    for r, (comm_next, req_next, _) in live.items():
        assert live_after[r][0] >= comm_next and live_after[r][1] >= req_next


def test_plan_orders_by_size_then_gid():
    wl = make_workload("comm-churn", 4, created=8, freed=3, tail=50)
    blobs = images_at(wl, System(wl, 0).run().steps - 30)
    plan = plan_restart(load_images(blobs))
    keys = [(len(m), k[0], k[1]) for k, m in plan.comm_order]
    assert keys == sorted(keys) and len(keys) == 5


def test_unsettled_nonblocking_collective_is_replayed():
    # iallreduce posted, then compute: a checkpoint in between must replay it
    wl = make_workload("collective-storm", 3, rounds=2)
    native = System(wl, 5).run()
    replayed = 0
    for k in range(1, native.steps):
        out = System(wl, 5, inject_at=[k]).run()
        assert out.outputs == native.outputs, k
        replayed += sum(r.replayed for r in out.restarts)
    assert replayed > 0


def test_images_on_disk_restart_and_finish(tmp_path):
    wl = make_workload("p2p-ring", 3, rounds=6)
    native = System(wl, 1).run()
    s = System(wl, 1, inject_at=[25], kill=False, ckpt_dir=tmp_path)
    s.run()
    blobs = read_image_set(tmp_path, 1)
    assert sorted(blobs) == [0, 1, 2]
    resumed = System(wl, 1)
    resumed.rt, resumed.procs, _ = restart(blobs)
    out = resumed.run()
    assert out.outputs == native.outputs


def grandchild_program(rank, n):
    """world -> two halves -> a reversed copy of each half, then reduce on all three levels."""
    def keep(name):
        return lambda v, res: v.__setitem__(name, res)

    half = 0 if rank < n // 2 else 1
    prog = [
        Step({"op": "comm_split", "color": half, "key": rank}, keep("child")),
        Step(lambda v: {"op": "comm_split", "comm": v["child"], "color": 0, "key": -rank}, keep("grand")),
        Step({"op": "compute", "steps": 6}),
    ]
    for comm in ("grand", "child", None):
        call = {"op": "collective", "kind": "allreduce", "data": i64(rank + 1)}
        prog.append(Step(lambda v, c=comm, call=call: {**call, "comm": v[c] if c else WORLD}, absorb))
    return prog, {"acc": rank, "child": 0, "grand": 0}


register_workload("grandchild", grandchild_program)


def test_grandchild_communicators_survive_restart():
    wl = make_workload("grandchild", 4)
    native = System(wl, 0).run()
    for k in range(4, native.steps, 2):
        out = System(wl, 0, inject_at=[k]).run()
        assert out.outputs == native.outputs, k
    out = System(wl, 0, inject_at=[10]).run()
    assert out.restarts[0].comms_created == 4  # two halves, two reversed copies
