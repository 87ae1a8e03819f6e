"""A bcast followed by a send, against a receive followed by the same bcast.

Legal for an implementation whose bcast root may return early.  Putting a
barrier in front of every collective makes it hang; the other two modes run it
to completion.

    python demos/bcast_deadlock.py
"""

from manasim import System, make_workload

wl = make_workload("bcast-deadlock", 2)
for mode in ("naive-barrier", "p2p-emulation", "hybrid-2pc"):
    out = System(wl, seed=0, mode=mode).run()
    if out.deadlock:
        print(f"{mode}: DEADLOCK")
        print(out.deadlock)
    else:
        print(f"{mode}: completed in {out.steps} steps, outputs match reference: {out.outputs == wl.expected()}")
