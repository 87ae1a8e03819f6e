"""Create 20 communicators, free 15, checkpoint: restart builds only the 5 alive.

    python demos/comm_churn.py
"""

from manasim import System, make_workload

wl = make_workload("comm-churn", 4, created=20, freed=15, tail=200)
native = System(wl, seed=0).run()
ck = System(wl, seed=0, inject_at=[native.steps - 50]).run()
(stats,) = ck.restarts
print(f"communicators created at restart (lower-half event log): {stats.comm_create_events}")
print(f"non-blocking collectives replayed: {stats.replayed}")
print("outputs identical to the native run:", ck.outputs == native.outputs)
