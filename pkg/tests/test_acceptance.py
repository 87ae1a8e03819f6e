"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``python -m pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``.
"""

import contextlib
import random
import time

import pytest

from manasim import System, make_workload
from manasim.errors import CorruptImage
from manasim.explore import explore
from manasim.harness import run_equivalence
from manasim.image import CheckpointImage
from manasim.workloads import Step, i64

SIZES = (2, 4, 8, 16)


@contextlib.contextmanager
def criterion(capsys, number, title):
    t0 = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        with capsys.disabled():
            verdict = "PASS" if ok else "FAIL"
            print(f"\nCRITERION {number} {verdict}: {title} ({time.perf_counter() - t0:.1f}s)")


def sweep_workload(name, n):
    # sized so each config runs for roughly 600 scheduler steps
    if name == "p2p-ring":
        return make_workload(name, n, rounds=-(-600 // (5 * n)))
    if name == "collective-storm":
        return make_workload(name, n, rounds=-(-600 // (13 * n)))
    return make_workload(name, n, delay=520)


_drains = []  # every DrainStats seen by criteria 1 and 2


def test_transparency_sweep(capsys):
    with criterion(capsys, 1, "transparency sweep, p2p-ring/collective-storm/straggler, N=2..16"):
        t0 = time.perf_counter()
        failures, points = [], 0
        for name in ("p2p-ring", "collective-storm", "straggler"):
            for n in SIZES:
                wl = sweep_workload(name, n)
                native = System(wl, seed=n, trace=True).run()
                assert native.finished and native.outputs == wl.expected()
                ks = list(range(10, native.steps, 10))
                assert len(ks) >= 50, (name, n, len(ks))
                for k in ks:
                    v = run_equivalence(wl, n, [k], native=native)
                    points += 1
                    _drains.extend(v.checkpointed.drains)
                    assert v.checkpointed.checkpoints == 1
                    if not v.ok:
                        failures.append((name, n, k, v.report))
        assert not failures, failures[:3]
        assert points >= 12 * 50
        assert time.perf_counter() - t0 < 300


@pytest.mark.parametrize("name,rounds", [("p2p-ring", 40), ("collective-storm", 6)])
def test_ten_round_endurance(capsys, name, rounds):
    with criterion(capsys, 2, f"N=32 {name}, 10 checkpoint-kill-restart rounds"):
        t0 = time.perf_counter()
        wl = make_workload(name, 32, rounds=rounds)
        native = System(wl, seed=32).run()
        ks = [native.steps * (i + 1) // 11 for i in range(10)]
        ck = System(wl, seed=32, inject_at=ks, kill=True).run()
        _drains.extend(ck.drains)
        assert ck.checkpoints == 10 and len(ck.restarts) == 10
        assert ck.outputs == native.outputs == wl.expected()
        assert time.perf_counter() - t0 < 120


def test_bcast_deadlock_reproduction(capsys):
    with criterion(capsys, 3, "bcast-deadlock: naive-barrier deadlocks, others complete, 100 seeds"):
        wl = make_workload("bcast-deadlock", 2)
        for seed in range(100):
            naive = System(wl, seed, "naive-barrier").run()
            assert naive.deadlock and not naive.finished, seed
            assert "rank 0" in naive.deadlock and "rank 1" in naive.deadlock
            for mode in ("p2p-emulation", "hybrid-2pc"):
                out = System(wl, seed, mode).run()
                assert out.finished and not out.deadlock, (seed, mode)
                assert out.outputs == wl.expected()


def test_drain_invariant(capsys):
    with criterion(capsys, 4, "every drain leaves the network empty and counters balanced"):
        if not _drains:
            # run standalone: gather drains from a smaller slice of criteria 1 and 2
            for name in ("p2p-ring", "collective-storm", "straggler"):
                wl = sweep_workload(name, 4)
                steps = System(wl, 4).run().steps
                _drains.extend(System(wl, 4, inject_at=range(10, steps, 10)).run().drains)
        assert _drains
        assert all(d.network_empty for d in _drains)
        assert all(d.balanced for d in _drains)


def test_retirement_and_gc(capsys):
    with criterion(capsys, 5, "request tables empty after completion; p2p-ring hwm <= 4"):
        for name in ("p2p-ring", "collective-storm", "straggler", "comm-churn"):
            for n in (2, 5):
                wl = make_workload(name, n)
                out = System(wl, seed=n).run()
                assert out.finished
                assert set(out.request_tables.values()) == {0}, (name, n, out.request_tables)
        for rounds in (2, 10, 100, 400):
            out = System(make_workload("p2p-ring", 4, rounds=rounds), seed=rounds).run()
            assert out.metrics["req_hwm"] <= 4, (rounds, out.metrics["req_hwm"])
            assert set(out.request_tables.values()) == {0}


def test_restart_frugality(capsys):
    with criterion(capsys, 6, "20 created, 15 freed: restart creates exactly 5 communicators"):
        wl = make_workload("comm-churn", 4, created=20, freed=15, tail=200)
        native = System(wl, seed=6).run()
        for k in (native.steps - 50, native.steps - 150):
            ck = System(wl, seed=6, inject_at=[k]).run()
            assert ck.outputs == native.outputs
            (rs,) = ck.restarts
            assert rs.comm_create_events == 5
            assert rs.comms_created == 5


def _coll_program(rank, n, kinds):
    steps = []
    for i, kind in enumerate(kinds):
        call = {"op": "collective", "kind": kind}
        if kind == "allreduce":
            call["data"] = i64(rank + 1 + i)
        elif kind == "bcast":
            call["root"] = i % n
            call["data"] = b"from-%d" % rank
        steps.append(Step(call, lambda v, res: v.__setitem__("out", v["out"] + [res])))
    return steps, {"out": []}


def test_emulation_equivalence(capsys):
    with criterion(capsys, 7, "exhaustive interleavings: emulated collectives match the engine"):
        shapes = [("barrier",), ("bcast",), ("allreduce",), ("barrier", "bcast"),
                  ("bcast", "allreduce"), ("allreduce", "barrier"), ("bcast", "bcast")]
        output = lambda v: repr(v["out"])  # noqa: E731
        for n in (2, 3):
            for kinds in shapes:
                progs = lambda: [_coll_program(r, n, kinds) for r in range(n)]  # noqa: E731
                real = explore(progs(), "hybrid-2pc", output)
                emu = explore(progs(), "p2p-emulation", output)
                assert not real.truncated and not emu.truncated
                assert max(real.max_steps, emu.max_steps) <= 6
                assert len(real.outputs) == 1 and emu.outputs == real.outputs, (n, kinds)
                assert emu.deadlocks == 0 and real.deadlocks == 0


def _random_sections(rng):
    def value(depth):
        pick = rng.randrange(7 if depth < 3 else 4)
        if pick == 0:
            return rng.randrange(-(1 << 62), 1 << 62)
        if pick == 1:
            return rng.randbytes(rng.randrange(40))
        if pick == 2:
            return "".join(rng.choice("abcxyz-_é") for _ in range(rng.randrange(12)))
        if pick == 3:
            return rng.choice([None, True, False, 0])
        if pick == 4:
            return [value(depth + 1) for _ in range(rng.randrange(5))]
        return {f"k{rng.randrange(99)}": value(depth + 1) for _ in range(rng.randrange(5))}

    names = ("app-state", "vtables", "counters", "p2p-list", "replay-log", "active-comms", "drained-buffers")
    return {name: {"x": value(0), "n": rng.randrange(1 << 31)} for name in names}


def test_image_round_trip(capsys):
    with criterion(capsys, 8, "1000 random image round trips, corrupt CRC and truncation rejected"):
        rng = random.Random(8)
        for _ in range(1000):
            img = CheckpointImage(rng.randrange(64), 64, rng.randrange(1000), _random_sections(rng))
            blob = img.to_bytes()
            back = CheckpointImage.from_bytes(blob)
            assert back == img
            assert back.to_bytes() == blob
            bad = bytearray(blob)
            bad[rng.randrange(len(blob))] ^= 1 << rng.randrange(8)
            with pytest.raises(CorruptImage):
                CheckpointImage.from_bytes(bytes(bad))
            with pytest.raises(CorruptImage):
                CheckpointImage.from_bytes(blob[: rng.randrange(len(blob) - 1)])


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
