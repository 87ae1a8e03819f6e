"""Exhaustive exploration of every interleaving of a small program set.

States are copied at each branch and deduplicated by a fingerprint that
ignores handle numbering, which depends only on allocation order.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .interpose import NULL, Done, Pending, UpperHalf
from .runtime import RealRequest, lh_init


@dataclass
class ExploreResult:
    states: int = 0
    terminals: int = 0
    outputs: set = field(default_factory=set)  # distinct final outputs
    deadlocks: int = 0
    max_steps: int = 0  # most steps any one rank took on any path
    truncated: bool = False


def _req_sig(rt, real):
    if real is NULL:
        return "null"
    if isinstance(real, Done):
        st = real.status
        return ("done", st.src, st.tag, st.payload)
    if isinstance(real, Pending):
        return "pending"
    rq = rt._reqs.get(real.id)
    if rq is None:
        return ("gone", real.kind)
    msg = rq.msg
    return (real.kind, rq.done, rq.key, rq.src, rq.tag, rq.comm,
            None if msg is None else (msg.src, msg.tag, msg.seq, msg.payload))


def fingerprint(rt, procs) -> tuple:
    ps = []
    for p in procs:
        lhr = None if p._lh_req is None else _req_sig(rt, p._lh_req)
        ps.append((
            p.pc, p.finished, repr(p.frame), repr(sorted(p.vars.items())),
            tuple((v, _req_sig(rt, r)) for v, r in sorted(p.vt_req.entries.items())),
            p.ctx.in_lower_half, lhr, repr(p.replay_log),
        ))
    net = tuple(sorted((m.src, m.dst, m.comm, m.tag, m.seq, m.payload, m.claimed) for m in rt.p2p_inflight()))
    posted = tuple(tuple((q.src, q.tag, q.comm) for q in box) for box in rt._posted)
    rdv = tuple(sorted(
        (k, v.kind, tuple(sorted(v.contrib)), tuple(sorted(v.results)), tuple(sorted(v.collected)))
        for k, v in rt._rdv.items()
    ))
    counts = tuple(sorted(rt._coll_count.items()))
    chans = tuple(sorted(rt._chan_seq.items()))
    return tuple(ps), net, posted, rdv, counts, chans


def explore(programs, mode: str, output=None, max_states: int = 200_000) -> ExploreResult:
    """Visit every reachable state of ``programs`` (a list of (program, vars) per rank).

    ``output(vars) -> bytes`` defines what is compared at termination.
    """
    n = len(programs)
    output = output or (lambda v: repr(sorted(v.items())))
    rt = lh_init(n, 0)
    procs = [UpperHalf(r, n, prog, init, mode, rt) for r, (prog, init) in enumerate(programs)]
    res = ExploreResult()
    seen = set()
    stack = [(rt, procs, (0,) * n)]
    while stack:
        rt, procs, steps = stack.pop()
        key = fingerprint(rt, procs)
        if key in seen:
            continue
        seen.add(key)
        res.states += 1
        res.max_steps = max(res.max_steps, max(steps))
        if res.states >= max_states:
            res.truncated = True
            break
        if all(p.finished for p in procs):
            res.terminals += 1
            res.outputs.add(tuple(output(p.vars) for p in procs))
            continue
        ready = [p.rank for p in procs if p.ready()]
        if not ready:
            res.deadlocks += 1
            continue
        for r in ready:
            rt2, procs2 = copy.deepcopy((rt, procs))
            procs2[r].step()
            s2 = list(steps)
            s2[r] += 1
            stack.append((rt2, procs2, tuple(s2)))
    return res


__all__ = ["explore", "ExploreResult", "fingerprint", "RealRequest"]
