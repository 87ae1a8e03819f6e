"""Kill a running ring of processes three times and show nothing was lost.

    python demos/checkpoint_restart.py
"""

from manasim import System, make_workload

wl = make_workload("p2p-ring", 6, rounds=12)
native = System(wl, seed=1).run()
print(f"native run: {native.steps} steps, outputs match reference: {native.outputs == wl.expected()}")

points = [native.steps // 4, native.steps // 2, 3 * native.steps // 4]
ck = System(wl, seed=1, inject_at=points, kill=True).run()
print(f"checkpointed at steps {points}, {len(ck.restarts)} kill-and-restart rounds")
for i, (d, r) in enumerate(zip(ck.drains, ck.restarts), 1):
    print(f"  round {i}: drained {d.messages} messages / {d.bytes} bytes "
          f"(network empty: {d.network_empty}, balanced: {d.balanced}); "
          f"restart re-posted {r.recvs_reposted} receives, {r.recvs_from_buffer} served from buffers")
print("final outputs identical to the native run:", ck.outputs == native.outputs)
