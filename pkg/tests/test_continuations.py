import threading

import pytest

from contirq import (REQUEST_NULL, CRState, ErrorClass, LEGAL_TRANSITIONS, RuntimeFault,
                     StatusRecord, UsageError, World, in_continuation, progress_once)
from contirq.matching import Envelope
from contirq.progress import drain

SENTINEL = -999


def sentinel():
    return StatusRecord(SENTINEL, SENTINEL, SENTINEL)


class Log:
    def __init__(self):
        self.edges = []

    def __call__(self, cr, old, new):
        self.edges.append((old, new))


def test_fresh_cr_tests_complete(world1):
    ctx = world1[0]
    cr = ctx.continue_init()
    assert cr.state is CRState.INACTIVE
    assert ctx.cr_test(cr) is True


def test_init_then_free_releases_immediately(world1):
    ctx = world1[0]
    log = Log()
    cr = ctx.continue_init(log)
    ctx.cr_free(cr)
    assert cr.released
    assert log.edges == [(CRState.INACTIVE, CRState.RELEASED)]


def test_attach_to_completed_op_sets_flag_and_skips_body(world1):
    ctx = world1[0]
    r = ctx.irecv(bytearray(2), 0, 0)
    ctx.isend(b"ok", 0, 0)
    calls = []
    st = sentinel()
    cr = ctx.continue_init()
    assert ctx.attach_continue(r, lambda s, d: calls.append(1), None, st, cr) is True
    assert (st.source, st.tag, st.length) == (0, 0, 2)
    progress_once(ctx)
    ctx.cr_wait(cr)
    assert calls == []
    assert cr.state is CRState.INACTIVE
    assert r == REQUEST_NULL


def test_attach_to_active_op_registers(world2):
    a, b = world2
    log = Log()
    cr = b.continue_init(log)
    r = b.irecv(None, 0, 0)
    assert b.attach_continue(r, lambda s, d: None, None, None, cr) is False
    assert cr.state is CRState.ACTIVE_REFERENCED and cr.registered == 1
    assert r == REQUEST_NULL
    assert b.test(r) == (True, StatusRecord())
    assert b.cr_test(cr) is False
    a.isend(b"", 1, 0)
    b.cr_wait(cr)
    assert log.edges == [(CRState.INACTIVE, CRState.ACTIVE_REFERENCED),
                         (CRState.ACTIVE_REFERENCED, CRState.ACTIVE_IDLE),
                         (CRState.ACTIVE_IDLE, CRState.COMPLETE),
                         (CRState.COMPLETE, CRState.INACTIVE)]


def test_body_runs_on_thread_that_finds_completion(world2):
    """A continuation set up by one thread runs inside another thread's isend."""
    a, b = world2
    cr = a.continue_init()
    ran_on = []
    r = a.irecv(bytearray(1), 1, 5)
    assert not a.attach_continue(r, lambda s, d: ran_on.append(threading.get_ident()), None, None, cr)
    b.isend(b"x", 0, 5)  # lands in rank 0's inbound queue, nobody has looked yet
    other = []

    def t2():
        other.append(threading.get_ident())
        a.isend(b"", 1, 6)

    t = threading.Thread(target=t2)
    t.start()
    t.join()
    assert ran_on == other


def test_second_attach_to_non_persistent_op(world2):
    a, b = world2
    cr = b.continue_init()
    r = b.irecv(None, 0, 0)
    b.attach_continue(r, lambda s, d: None, None, None, cr)
    with pytest.raises(UsageError) as e:
        b.attach_continue(r, lambda s, d: None, None, None, cr)
    assert e.value.code is ErrorClass.SECOND_ATTACH
    with pytest.raises(UsageError):
        r2 = b.irecv(None, 0, 1)
        b.attach_continueall([r2, r2], lambda s, d: None, None, None, cr)


def test_multiple_attaches_to_active_persistent_op(world2):
    a, b = world2
    cr = b.continue_init()
    r = b.recv_init(bytearray(1), 0, 0)
    b.start(r)
    hits = []
    for i in range(2):
        assert not b.attach_continue(r, lambda s, d: hits.append(d), i, None, cr)
    assert r != REQUEST_NULL
    a.isend(b"!", 1, 0)
    b.cr_wait(cr)
    assert sorted(hits) == [0, 1]
    # one-shot: the next activation does not re-fire them
    b.wait(r)
    b.start(r)
    a.isend(b"!", 1, 0)
    b.wait(r)
    assert sorted(hits) == [0, 1]


def test_attach_to_completed_persistent_op_takes_flag(world2):
    a, b = world2
    cr = b.continue_init()
    r = b.recv_init(bytearray(1), 0, 0)
    b.start(r)
    a.isend(b"!", 1, 0)
    while r.state.value != "complete":
        progress_once(b)
    st = sentinel()
    assert b.attach_continue(r, lambda s, d: None, None, st, cr) is True
    assert st.length == 1
    inactive = b.recv_init(None, 0, 1)
    assert b.attach_continue(inactive, lambda s, d: None, None, None, cr) is True


def test_continueall_flag_cases(world2):
    a, b = world2
    cr = b.continue_init()
    assert b.attach_continueall([], lambda s, d: None, None, [], cr) is True
    r1 = b.irecv(bytearray(1), 0, 1)
    r2 = b.irecv(bytearray(1), 0, 2)
    a.isend(b"1", 1, 1)
    a.isend(b"2", 1, 2)
    while r1.state.value != "complete" or r2.state.value != "complete":
        progress_once(b)
    sts = [sentinel(), sentinel()]
    assert b.attach_continueall([r1, r2], lambda s, d: None, None, sts, cr) is True
    assert [s.tag for s in sts] == [1, 2]


def test_continueall_fires_after_last_completion(world2):
    a, b = world2
    # oracle: the same exchange completed with plain waits
    ref = [b.irecv(bytearray(3), 0, 1), b.irecv(bytearray(5), 0, 2)]
    a.isend(b"abc", 1, 1)
    a.isend(b"defgh", 1, 2)
    expected = b.waitall(ref)

    cr = b.continue_init()
    calls = []
    r1 = b.irecv(bytearray(3), 0, 1)
    r2 = b.irecv(bytearray(5), 0, 2)
    a.isend(b"abc", 1, 1)
    while r1.state.value != "complete":
        progress_once(b)
    sts = [sentinel(), sentinel()]
    assert b.attach_continueall([r1, r2], lambda s, d: calls.append([x.copy() for x in s]),
                                None, sts, cr) is False
    progress_once(b)
    assert calls == []
    a.isend(b"defgh", 1, 2)
    b.cr_wait(cr)
    assert calls == [expected]
    assert sts == expected


def test_attach_never_invokes_continuations(world1):
    ctx = world1[0]
    cr = ctx.continue_init()
    hits = []
    r = ctx.irecv(None, 0, 0)
    ctx.attach_continue(r, lambda s, d: hits.append(1), None, None, cr)
    r2 = ctx.irecv(None, 0, 9)
    ctx.endpoint.send(Envelope(0, 0, 0, ctx.matching.stamp(0), b""))
    drain(ctx)  # completes r without dispatching
    assert ctx.engine.has_ready() and hits == []
    ctx.attach_continue(r2, lambda s, d: hits.append(2), None, None, cr)
    assert hits == []
    assert ctx.engine.stats.during_attach == 0
    progress_once(ctx)
    assert hits == [1]


def test_no_nested_invocation(world1):
    ctx = world1[0]
    cr = ctx.continue_init()
    order = []

    def outer(s, d):
        order.append(("enter", d, in_continuation()))
        # library calls from inside a body must not run other bodies
        ctx.isend(b"", 0, 100 + d)
        ctx.test(REQUEST_NULL)
        progress_once(ctx)
        order.append(("leave", d))

    for i in range(3):
        r = ctx.irecv(None, 0, i)
        ctx.attach_continue(r, outer, i, None, cr)
        ctx.attach_continue(ctx.irecv(None, 0, 100 + i), lambda s, d: order.append(("inner", d)), i, None, cr)
    for i in range(3):
        ctx.endpoint.send(Envelope(0, 0, i, ctx.matching.stamp(0), b""))
    ctx.cr_wait(cr)
    for k in range(len(order) - 1):
        if order[k][0] == "enter":
            assert order[k + 1][0] == "leave"
    assert ctx.engine.stats.nested == 0
    assert sum(1 for o in order if o[0] == "inner") == 3


def test_body_failure_poisons_runtime(world1):
    ctx = world1[0]
    cr = ctx.continue_init()

    def bad(s, d):
        raise ValueError("boom")

    ctx.attach_continue(ctx.irecv(None, 0, 0), bad, None, None, cr)
    with pytest.raises(RuntimeFault):
        ctx.isend(b"", 0, 0)
    with pytest.raises(RuntimeFault):
        ctx.test(REQUEST_NULL)


def test_attach_to_freed_cr(world1):
    ctx = world1[0]
    cr = ctx.continue_init()
    ctx.cr_free(cr)
    with pytest.raises(UsageError) as e:
        ctx.attach_continue(ctx.irecv(None, 0, 0), lambda s, d: None, None, None, cr)
    assert e.value.code is ErrorClass.CR_FREED


def test_free_while_active_defers_release(world2):
    a, b = world2
    log = Log()
    cr = b.continue_init(log)
    for t in range(3):
        b.attach_continue(b.irecv(None, 0, t), lambda s, d: None, None, None, cr)
    b.cr_free(cr)
    assert cr.state is CRState.ACTIVE_REFERENCED
    a.isend(b"", 1, 0)
    a.isend(b"", 1, 1)
    while cr.registered > 1:
        progress_once(b)
    assert not cr.released
    a.isend(b"", 1, 2)
    while cr.registered:
        progress_once(b)
    assert cr.released
    assert log.edges[-1] == (CRState.ACTIVE_REFERENCED, CRState.RELEASED)
    assert all(e in LEGAL_TRANSITIONS for e in log.edges)


def test_cr_wait_set_is_live(world2):
    a, b = world2
    cr = b.continue_init()
    hits = []

    def chain(s, n):
        hits.append(n)
        if n < 5:
            b.attach_continue(b.irecv(None, 0, n + 1), chain, n + 1, None, cr)
            a.isend(b"", 1, n + 1)

    b.attach_continue(b.irecv(None, 0, 0), chain, 0, None, cr)
    a.isend(b"", 1, 0)
    b.cr_wait(cr)
    assert hits == list(range(6))


def test_concurrent_cr_test_rejected(world1):
    ctx = world1[0]
    cr = ctx.continue_init()
    ctx.attach_continue(ctx.irecv(None, 0, 0), lambda s, d: None, None, None, cr)
    t = threading.Thread(target=ctx.cr_wait, args=(cr,))
    t.start()
    while not ctx.blocked:
        pass
    with pytest.raises(UsageError) as e:
        ctx.cr_test(cr)
    assert e.value.code is ErrorClass.CONCURRENT_WAIT
    ctx.isend(b"", 0, 0)
    t.join(5)
    assert not t.is_alive()


def test_cr_as_operation_waits_for_inner_bodies(world2):
    a, b = world2
    inner = b.continue_init()
    outer = b.continue_init()
    events = []
    for t in range(2):
        b.attach_continue(b.irecv(None, 0, t), lambda s, d: events.append(("inner", d)), t, None, inner)
    assert b.attach_continue(inner, lambda s, d: events.append(("outer",)), None, None, outer) is False
    a.isend(b"", 1, 1)
    progress_once(b)
    assert ("outer",) not in events
    a.isend(b"", 1, 0)
    b.cr_wait(outer)
    assert events[-1] == ("outer",)
    assert sorted(events[:2]) == [("inner", 0), ("inner", 1)]


def test_cr_as_operation_empty_inner(world1):
    ctx = world1[0]
    inner, outer = ctx.continue_init(), ctx.continue_init()
    assert ctx.attach_continue(inner, lambda s, d: None, None, None, outer) is True


def test_cr_chain_of_three_runs_in_topological_order():
    with World(2) as w:
        a, b = w
        crs = [b.continue_init() for _ in range(3)]
        log = []
        b.attach_continue(b.irecv(None, 0, 0), lambda s, d: log.append("leaf"), None, None, crs[0])
        b.attach_continue(crs[0], lambda s, d: log.append("mid"), None, None, crs[1])
        b.attach_continue(crs[1], lambda s, d: log.append("top"), None, None, crs[2])
        a.isend(b"", 1, 0)
        b.cr_wait(crs[2])
        assert log == ["leaf", "mid", "top"]
