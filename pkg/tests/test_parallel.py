import csv
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ridg.errors import ConfigError, Instability, NonConvergence
from ridg.law import get_problem
from ridg.mesh import CartesianMesh, decompose, pad_periodic
from ridg.parallel import (Communicator, Deadlock, ExchangePlan, Mailbox, ProtocolError, TaskCounters,
                           TaskWorker, _Abort, _OperatorCache, allreduce_max, comms_per_stage, run_parallel,
                           scaling_study, write_instrumentation)
from ridg.predictor import NewtonConfig
from ridg.stepper import SchemeConfig, initial_state, run


def mesh_for(prob, n):
    return CartesianMesh(prob.dim, (n,) * prob.dim, prob.lower, prob.upper)


class TestAllreduce:
    def test_examples(self):
        assert allreduce_max([1.0, 3.5, 2.0]) == [3.5, 3.5, 3.5]
        assert allreduce_max([4.25]) == [4.25]

    def test_many_tasks(self):
        vals = list(np.random.default_rng(0).standard_normal(512))
        assert allreduce_max(vals) == [max(vals)] * 512

    @settings(max_examples=10)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12))
    def test_matches_serial(self, vals):
        assert allreduce_max(vals) == [max(vals)] * len(vals)

    def test_empty(self):
        with pytest.raises(ValueError):
            allreduce_max([])


class TestMailbox:
    def test_roundtrip_and_tags(self):
        box = Mailbox(_Abort())
        box.put((0, "a"), "ridg-predict", 1)
        assert box.get((0, "a"), "ridg-predict", timeout=1) == 1
        box.put((1, "a"), "ridg-correct", 2)
        with pytest.raises(ProtocolError):
            box.get((1, "a"), "ridg-predict", timeout=1)

    def test_duplicate_rejected(self):
        box = Mailbox(_Abort())
        box.put((0, "a"), "p", 1)
        with pytest.raises(ProtocolError):
            box.put((0, "a"), "p", 2)

    def test_timeout_is_deadlock(self):
        with pytest.raises(Deadlock):
            Mailbox(_Abort()).get((0, "x"), "p", timeout=0.1)

    def test_abort_wakes_waiter(self):
        from ridg.parallel import WorkerAborted
        abort = _Abort()
        box = Mailbox(abort)
        threading.Timer(0.05, abort.trigger, args=(RuntimeError("boom"),)).start()
        with pytest.raises(WorkerAborted):
            box.get((0, "x"), "p", timeout=5)


class TestPlans:
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_protocol_neighbors(self, d):
        mesh = CartesianMesh(d, (4,) * d, (0.0,) * d, (1.0,) * d)
        dec = decompose(mesh, 2)
        face = ExchangePlan.build(dec, "rkdg-face")
        assert face.messages == 2 * d
        assert all(sum(map(abs, o)) == 1 for o in face.offsets)
        for p in ("ridg-predict", "ridg-correct"):
            plan = ExchangePlan.build(dec, p)
            assert plan.messages == 3**d - 1
            assert all(max(map(abs, o)) == 1 for o in plan.offsets)

    def test_payload_sizes(self):
        mesh = CartesianMesh(2, (6, 4), (0.0, 0.0), (1.0, 1.0))
        plan = ExchangePlan.build(decompose(mesh, (2, 2)), "ridg-predict")
        sizes = dict(zip(plan.offsets, plan.cells))
        assert sizes[(1, 0)] == 2 and sizes[(0, 1)] == 3 and sizes[(1, 1)] == 1

    def test_unknown_protocol(self):
        mesh = CartesianMesh(1, (4,), (0.0,), (1.0,))
        with pytest.raises(ValueError):
            ExchangePlan.build(decompose(mesh, 2), "gossip")

    def test_comms_per_stage(self):
        assert comms_per_stage(SchemeConfig("ridg"), 2) == 8
        assert comms_per_stage(SchemeConfig("ridg"), 3) == 26
        assert comms_per_stage(SchemeConfig("rkdg", 3), 2) == 4


@pytest.mark.parametrize("d,tasks", [(1, 3), (2, (2, 3)), (3, 2)])
def test_exchange_completeness(d, tasks):
    # post every task's sends, then complete: all ghosts (initially NaN) must be filled
    prob = get_problem(f"adv{d}d")
    mesh = CartesianMesh(d, (6,) * d, prob.lower, prob.upper)
    dec = decompose(mesh, tasks)
    Q = np.random.default_rng(0).standard_normal(mesh.shape + (2,))
    blocks = [b[(slice(1, -1),) * d] for b in dec.scatter(Q)]
    comm = Communicator(dec.n_tasks, timeout=2)
    scheme = SchemeConfig("ridg", 1, 0.5)
    cache = _OperatorCache(prob.law, scheme, mesh.h)
    workers = [TaskWorker(dec, t, comm, prob.law, scheme, blocks[t], 1.0, 1, cache) for t in range(dec.n_tasks)]
    ref = pad_periodic(Q, d)
    for protocol in ("ridg-predict", "rkdg-face"):
        pending = [w.sim.exchange.begin(w.Q, protocol) for w in workers]
        for w, (Xpad, finish) in zip(workers, pending):
            assert np.isnan(Xpad).any()
            finish()
            info = w.info
            sl = tuple(slice(s, e + 2) for s, e in zip(info.start[::-1], info.stop[::-1]))
            if protocol == "ridg-predict":
                assert np.array_equal(Xpad, ref[sl])
            else:
                # face ghosts filled, corners stay poisoned
                inner = Xpad[(slice(1, -1),) * d]
                assert not np.isnan(inner).any()
                if d > 1:
                    assert np.isnan(Xpad[(0,) * d]).all()


class TestBitwise:
    @pytest.mark.parametrize("scheme,mdeg", [("ridg", 2), ("rkdg", 2), ("rkdg", 3)])
    def test_adv2d_task_counts(self, scheme, mdeg):
        prob = get_problem("adv2d", 0.05)
        mesh = mesh_for(prob, 12)
        cfg = SchemeConfig(scheme, mdeg, 0.7 if scheme == "ridg" else 0.1)
        ref = run(prob, cfg, mesh).state.Q
        for tasks in (1, (2, 2), (3, 3), (1, 4)):
            res = run_parallel(prob, cfg, mesh, tasks)
            assert np.array_equal(res.state.Q, ref), tasks
            assert res.state.t == 0.05

    def test_burgers_with_threads(self):
        prob = get_problem("burgers2d", 0.02)
        mesh = mesh_for(prob, 8)
        cfg = SchemeConfig("ridg", 2, 0.7)
        ref = run(prob, cfg, mesh).state.Q
        assert np.array_equal(run_parallel(prob, cfg, mesh, 2, threads_per_task=2).state.Q, ref)

    def test_adv1d_and_3d(self):
        for name, n, tasks in (("adv1d", 12, 4), ("adv3d", 4, 2)):
            prob = get_problem(name, 0.05)
            mesh = mesh_for(prob, n)
            cfg = SchemeConfig("ridg", 1, 0.5)
            assert np.array_equal(run_parallel(prob, cfg, mesh, tasks).state.Q, run(prob, cfg, mesh).state.Q)

    def test_conservation(self):
        prob = get_problem("burgers2d", 0.02)
        res = run_parallel(prob, SchemeConfig("ridg", 1, 0.7), mesh_for(prob, 8), 2)
        assert abs(res.mass_final - res.mass_initial) <= 1e-12 * res.mass_initial


class TestInstrumentation:
    def test_ridg_2d_messages_per_step(self):
        prob = get_problem("adv2d", 0.3)
        res = run_parallel(prob, SchemeConfig("ridg", 1, 0.7), mesh_for(prob, 8), 2)
        assert res.steps > 1
        for c in res.counters:
            assert c.messages_per_step == [16] * res.steps
            assert c.by_protocol == {"ridg-predict": 8 * res.steps, "ridg-correct": 8 * res.steps}
            # reference norm once, then per step a CFL max, a finiteness max and a norm sum
            assert c.reductions == 1 + 3 * res.steps

    def test_rkdg_face_messages(self):
        prob = get_problem("adv2d", 0.01)
        res = run_parallel(prob, SchemeConfig("rkdg", 2, 0.1), mesh_for(prob, 8), 2)
        for c in res.counters:
            assert c.messages_per_step == [4 * 3] * res.steps
            assert set(c.by_protocol) == {"rkdg-face"}

    def test_dump(self, tmp_path):
        prob = get_problem("adv1d", 0.02)
        res = run_parallel(prob, SchemeConfig("ridg", 1, 0.9), mesh_for(prob, 8), 2)
        path = tmp_path / "inst.csv"
        write_instrumentation(path, res.counters)
        rows = list(csv.DictReader(path.open()))
        assert [r["task"] for r in rows] == ["0", "1"]
        assert set(rows[0]) == {"task", "messages_sent", "payload_elements", "bytes_sent", "reductions",
                                "wait_time_s", "compute_time_s"}
        assert int(rows[0]["messages_sent"]) == 4 * res.steps
        assert len(res.task_runtime_s) == 2


class TestErrors:
    def test_bad_decomposition(self):
        prob = get_problem("adv2d")
        with pytest.raises(ConfigError):
            run_parallel(prob, SchemeConfig("ridg", 1), mesh_for(prob, 10), 3)

    def test_instability_names_task(self):
        prob = get_problem("adv1d")
        with pytest.raises(Instability) as info:
            run_parallel(prob, SchemeConfig("rkdg", 3, 0.9), mesh_for(prob, 20), 2)
        assert info.value.task in (0, 1)

    def test_nonconvergence_names_task(self):
        prob = get_problem("burgers2d")
        cfg = SchemeConfig("ridg", 1, 0.7, newton=NewtonConfig(tol=1e-30, max_iter=1))
        with pytest.raises(NonConvergence) as info:
            run_parallel(prob, cfg, mesh_for(prob, 4), 2)
        assert info.value.task in range(4) and info.value.element is not None


class TestScaling:
    def test_records(self):
        prob = get_problem("adv2d")
        mesh = mesh_for(prob, 12)
        cfg = SchemeConfig("ridg", 1, 0.7)
        blocks = {}
        recs = scaling_study(prob, cfg, mesh, [1, 4, 9], max_steps=1,
                             on_result=lambda n, r: blocks.setdefault(n, r.decomposition.block))
        assert blocks == {1: (12, 12), 4: (6, 6), 9: (4, 4)}
        base = recs[0].runtime_s
        for r in recs:
            assert r.speedup == pytest.approx(base / r.runtime_s)
            assert r.comms == r.tasks * 1 * 2 * 8
        assert recs[0].efficiency_pct is None

    def test_per_task_mesh_column(self):
        mesh = CartesianMesh(2, (60, 60), (0.0, 0.0), (1.0, 1.0))
        blocks = [decompose(mesh, p).block for p in (2, 3, 4, 5, 6)]
        assert blocks == [(30, 30), (20, 20), (15, 15), (12, 12), (10, 10)]

    def test_rejects_non_power(self):
        prob = get_problem("adv2d")
        with pytest.raises(ValueError):
            scaling_study(prob, SchemeConfig("ridg", 1), mesh_for(prob, 12), [1, 2], max_steps=1)
