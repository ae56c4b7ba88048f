"""Slot-memory filter tests: update arithmetic, invariants, gradient oracle."""

import numpy as np
import pytest

import obmlab.diffcore as dc
import obmlab.losses as ls
import obmlab.obmnet as ob


SMALL = ob.HyperParams(num_tables=3, num_classes=2, K=4, M=2, d_s=6, hidden=8)


def _params(seed=0, hyper=SMALL):
    return ob.init_params(hyper, np.random.default_rng(seed))


def _obs(hyper, offset=(0.05, -0.02), table=0, klass=0, valid=True):
    z = np.zeros(hyper.d_z)
    if valid:
        z[0:2] = offset
        z[2 + table] = 1.0
        z[2 + hyper.num_tables + klass] = 1.0
        z[-1] = 1.0
    return z


def _rand_stream(hyper, rng, length):
    stream = []
    for _ in range(length):
        if rng.random() < 0.5:
            stream.append(_obs(
                hyper,
                offset=rng.uniform(-0.15, 0.15, size=2),
                table=int(rng.integers(hyper.num_tables)),
                klass=int(rng.integers(hyper.num_classes)),
            ))
        else:
            stream.append(_obs(hyper, valid=False))
    return stream


# ---------------------------------------------------------------------------
# sizing and initial state


def test_default_parameter_budget_is_reportable():
    hyper = ob.HyperParams(num_tables=4, num_classes=3)
    params = ob.init_params(hyper, np.random.default_rng(0))
    assert params.total_count() == 49740
    assert abs(params.total_count() - 50_000) < 2_000


def test_hyper_validation():
    with pytest.raises(ValueError):
        ob.HyperParams(num_tables=2, num_classes=2, K=3, M=4).validate()
    hp = ob.HyperParams(num_tables=4, num_classes=3)
    assert hp.d_z == 2 + 4 + 3 + 1
    assert hp.d_y == 2 + 4 + 3
    assert ob.HyperParams.from_dict(hp.to_dict()) == hp


def test_init_memory_shapes_and_counts():
    params = _params()
    mem = ob.init_memory(params, SMALL)
    assert mem.s.shape == (SMALL.K, SMALL.d_s)
    assert mem.n.shape == (1, SMALL.K)
    assert np.all(mem.n.value == SMALL.n_init)
    again = ob.init_memory(params, SMALL)
    assert np.array_equal(mem.s.value, again.s.value)
    assert np.array_equal(mem.n.value, again.n.value)


def test_initial_slot_embeddings_differ_pairwise():
    mem = ob.init_memory(_params(), SMALL)
    s = mem.s.value
    for i in range(len(s)):
        for j in range(i + 1, len(s)):
            assert np.linalg.norm(s[i] - s[j]) > 1e-3


# ---------------------------------------------------------------------------
# attend / suppress


def test_suppress_renormalization_arithmetic():
    a = ob.suppress(dc.constant([[0.5, 0.3, 0.2]]), 2)
    assert np.allclose(a.value, [[0.625, 0.375, 0.0]])


def test_suppress_full_keep_is_identity():
    w = dc.constant([[0.5, 0.3, 0.2]])
    assert np.allclose(ob.suppress(w, 3).value, w.value)


def test_suppress_tie_breaks_to_lower_index():
    a = ob.suppress(dc.constant([[0.25, 0.25, 0.25, 0.25]]), 1)
    assert np.allclose(a.value, [[1.0, 0.0, 0.0, 0.0]])
    a2 = ob.suppress(dc.constant([[0.2, 0.3, 0.3, 0.2]]), 1)
    assert np.allclose(a2.value, [[0.0, 1.0, 0.0, 0.0]])


def test_attend_suppress_shapes_and_sparsity():
    params = _params(3)
    rng = np.random.default_rng(14)
    for _ in range(100):
        mem = ob.MemoryState(
            s=dc.constant(rng.normal(size=(SMALL.K, SMALL.d_s))),
            n=dc.constant(rng.uniform(0.001, 5.0, size=(1, SMALL.K))),
        )
        e = dc.constant(rng.normal(size=(1, SMALL.d_s)))
        w, a = ob.attend_suppress(mem.s, mem.n, e, params, SMALL.M, SMALL)
        assert w.shape == (1, SMALL.K) and a.shape == (1, SMALL.K)
        assert np.all(w.value >= 0) and np.isclose(w.value.sum(), 1.0, atol=1e-12)
        assert np.count_nonzero(a.value) <= SMALL.M
        assert np.isclose(a.value.sum(), 1.0, atol=1e-12)
        # kept entries preserve the relative order of w
        kept = np.nonzero(a.value[0])[0]
        assert set(kept) <= set(np.argsort(-w.value[0])[: SMALL.M])


# ---------------------------------------------------------------------------
# relevance


def test_relevance_in_unit_interval_and_permutation_invariant():
    params = _params(5)
    rng = np.random.default_rng(15)
    for _ in range(50):
        s = rng.normal(size=(SMALL.K, SMALL.d_s))
        n = rng.uniform(0.001, 4.0, size=(1, SMALL.K))
        e = dc.constant(rng.normal(size=(1, SMALL.d_s)))
        r = ob.relevance(e, dc.constant(s), dc.constant(n), params, SMALL)
        assert 0.0 < r.value[0, 0] < 1.0
        perm = rng.permutation(SMALL.K)
        r2 = ob.relevance(e, dc.constant(s[perm]), dc.constant(n[:, perm]), params, SMALL)
        assert np.isclose(r.value[0, 0], r2.value[0, 0], atol=1e-12)


def test_relevance_saturates_with_extreme_final_bias():
    params = _params(6)
    e = dc.constant(np.zeros((1, SMALL.d_s)))
    mem = ob.init_memory(params, SMALL)
    params["rel2_b2"].value[:] = -500.0
    assert ob.relevance(e, mem.s, mem.n, params, SMALL).value[0, 0] < 1e-100
    params["rel2_b2"].value[:] = 500.0
    assert ob.relevance(e, mem.s, mem.n, params, SMALL).value[0, 0] == 1.0


# ---------------------------------------------------------------------------
# step semantics


def test_step_zero_relevance_freezes_slots_but_counts_move():
    params = _params(7)
    params["rel2_b2"].value[:] = -500.0  # r ~ 0
    mem = ob.init_memory(params, SMALL)
    z = _obs(SMALL)
    nxt, out, trace = ob.step(mem, z, params, SMALL, record_trace=True)
    assert trace.r.value[0, 0] < 1e-100
    assert np.array_equal(trace.s_prime.value, mem.s.value)
    # y decodes the unchanged slots
    expect_y = ob.decode_slots(mem.s, params, SMALL)
    assert np.allclose(out.y.value, expect_y.value, atol=1e-12)
    # counts still accumulate the suppressed weights
    assert np.allclose(nxt.n.value, mem.n.value + trace.a.value, atol=1e-15)
    assert nxt.n.value.sum() > mem.n.value.sum()


def test_step_full_relevance_one_hot_overwrites_single_slot():
    hyper = ob.HyperParams(num_tables=3, num_classes=2, K=4, M=1, d_s=6, hidden=8)
    params = ob.init_params(hyper, np.random.default_rng(8))
    params["rel2_b2"].value[:] = 500.0  # r = 1
    mem = ob.init_memory(params, hyper)
    nxt, out, trace = ob.step(mem, _obs(hyper), params, hyper, record_trace=True)
    j = int(np.argmax(trace.a.value))
    assert trace.a.value[0, j] == 1.0
    assert np.array_equal(trace.s_prime.value[j], trace.u.value[j])
    others = [k for k in range(hyper.K) if k != j]
    assert np.array_equal(trace.s_prime.value[others], mem.s.value[others])


def test_step_confidence_is_normalized_counts():
    params = _params(9)
    hyper = ob.HyperParams(num_tables=3, num_classes=2, K=3, M=1, d_s=6, hidden=8)
    params = ob.init_params(hyper, np.random.default_rng(9))
    mem = ob.MemoryState(s=params["slot_init"], n=dc.constant(np.ones((1, 3))))
    nxt, out, _ = ob.step(mem, _obs(hyper), params, hyper)
    # one-hot a on top of n=[1,1,1] gives counts {2,1,1} in some order
    assert np.allclose(sorted(nxt.n.value[0]), [1.0, 1.0, 2.0])
    assert np.allclose(sorted(out.c.value[0]), [0.25, 0.25, 0.5])
    assert np.allclose(out.c.value, nxt.n.value / nxt.n.value.sum(), atol=1e-15)


def test_step_rejects_wrong_observation_width():
    params = _params()
    mem = ob.init_memory(params, SMALL)
    with pytest.raises(dc.ShapeError):
        ob.step(mem, np.zeros(SMALL.d_z + 1), params, SMALL)


def test_step_numeric_error_names_stage():
    params = _params(10)
    params["enc_w2"].value[0, 0] = np.nan
    mem = ob.init_memory(params, SMALL)
    with pytest.raises(ob.NumericError, match="encode"):
        ob.step(mem, _obs(SMALL), params, SMALL)


def test_blend_stays_on_segment_between_s_and_u():
    params = _params(11)
    rng = np.random.default_rng(16)
    mem = ob.init_memory(params, SMALL)
    for z in _rand_stream(SMALL, rng, 40):
        prev_s = mem.s.value.copy()
        mem, out, trace = ob.step(mem, z, params, SMALL, record_trace=True)
        lower = np.minimum(prev_s, trace.u.value) - 1e-12
        upper = np.maximum(prev_s, trace.u.value) + 1e-12
        assert np.all(trace.s_prime.value >= lower)
        assert np.all(trace.s_prime.value <= upper)


def test_structure_rows_blocks():
    raw = dc.constant(np.random.default_rng(1).normal(size=(4, 2 + 3 + 2)))
    out = ob.structure_rows(raw, 3, 2)
    assert np.allclose(out.value[:, 0:2], raw.value[:, 0:2])
    assert np.allclose(out.value[:, 2:5].sum(axis=1), 1.0)
    assert np.allclose(out.value[:, 5:7].sum(axis=1), 1.0)
    assert np.all(out.value[:, 2:] >= 0)


# ---------------------------------------------------------------------------
# trajectories


def test_run_trajectory_empty_stream():
    outputs, traces = ob.run_trajectory(_params(), SMALL, [])
    assert outputs == [] and traces is None


def test_run_trajectory_invariants_hold_per_step():
    params = _params(12)
    rng = np.random.default_rng(17)
    stream = _rand_stream(SMALL, rng, 60)
    outputs, traces = ob.run_trajectory(params, SMALL, stream, record_traces=True)
    prev_n = np.full((1, SMALL.K), SMALL.n_init)
    for out, trace in zip(outputs, traces):
        assert np.all(out.c.value >= 0)
        assert np.isclose(out.c.value.sum(), 1.0, atol=1e-9)
        assert np.count_nonzero(trace.a.value) <= SMALL.M
        assert 0.0 < trace.r.value[0, 0] < 1.0
        n_now = prev_n + trace.a.value
        assert np.all(n_now >= prev_n - 1e-15)
        prev_n = n_now
    assert outputs[0].y.shape == (SMALL.K, SMALL.d_y)


def test_run_trajectory_prefix_property():
    params = _params(13)
    rng = np.random.default_rng(18)
    stream = _rand_stream(SMALL, rng, 20)
    full, _ = ob.run_trajectory(params, SMALL, stream)
    half, _ = ob.run_trajectory(params, SMALL, stream[:10])
    for a, b in zip(half, full[:10]):
        assert np.array_equal(a.y.value, b.y.value)
        assert np.array_equal(a.c.value, b.c.value)


def test_repeated_observation_concentrates_confidence():
    # mass on slots that have ever won attention grows monotonically to 1,
    # and the peak confidence stays above the uniform start
    params = _params(0)
    z = _obs(SMALL)
    outputs, traces = ob.run_trajectory(params, SMALL, [z] * 30, record_traces=True)
    attended: set[int] = set()
    prev_share = 0.0
    for out, trace in zip(outputs, traces):
        attended |= set(np.nonzero(trace.a.value[0])[0])
        share = out.c.value[0, sorted(attended)].sum()
        assert share >= prev_share - 1e-12
        prev_share = share
        assert out.c.value.max() > 1.0 / SMALL.K
    assert prev_share > 0.95
    assert outputs[-1].c.value.max() > 1.0 / SMALL.K + 0.05


def test_run_trajectory_reports_failing_timestep():
    params = _params(14)
    stream = [_obs(SMALL)] * 4
    params["tra_w2"].value[:] = np.inf
    with np.errstate(invalid="ignore"):
        with pytest.raises(ob.NumericError, match="step 0"):
            ob.run_trajectory(params, SMALL, stream)


# ---------------------------------------------------------------------------
# end-to-end gradient oracle


def test_trajectory_gradients_match_finite_differences():
    hyper = ob.HyperParams(num_tables=2, num_classes=2, K=3, M=2, d_s=5, hidden=6)
    rng = np.random.default_rng(19)
    params = ob.init_params(hyper, rng)
    stream = _rand_stream(hyper, rng, 5)
    labels = [rng.uniform(-0.15, 0.15, size=(j, hyper.d_y)) for j in (0, 1, 1, 2, 2)]
    for m in labels:
        if m.size:
            m[:, 2:] = 0.0
            m[:, 2] = 1.0
            m[:, 2 + hyper.num_tables] = 1.0

    def f(store):
        outputs, _ = ob.run_trajectory(store, hyper, stream)
        pairs = [(o.y, o.c) for o in outputs]
        return ls.total_step_loss(pairs, labels, lambda_sparse=0.5).total_node

    err = dc.finite_diff_check(f, params, h=1e-4)
    assert err < 1e-4, f"max relative gradient error {err}"


# ---------------------------------------------------------------------------
# persistence and the predictor interface


def test_checkpoint_round_trip_preserves_behavior(tmp_path):
    params = _params(20)
    stream = _rand_stream(SMALL, np.random.default_rng(20), 12)
    path = tmp_path / "model.json"
    dc.write_checkpoint(str(path), params, header={"hyper": SMALL.to_dict()})
    loaded, header = dc.read_checkpoint(str(path))
    hyper = ob.HyperParams.from_dict(header["hyper"])
    a = ob.Predictor(params, SMALL).run(_FakeTraj(stream))
    b = ob.Predictor(loaded, hyper).run(_FakeTraj(stream))
    for (ya, ca), (yb, cb) in zip(a, b):
        assert np.array_equal(ya, yb)
        assert np.array_equal(ca, cb)


class _FakeTraj:
    def __init__(self, stream):
        class _S:
            def __init__(self, z):
                self.z = z

        self.steps = [_S(z) for z in stream]


def test_predictor_returns_arrays_per_step():
    params = _params(21)
    stream = _rand_stream(SMALL, np.random.default_rng(21), 7)
    outs = ob.Predictor(params, SMALL).run(_FakeTraj(stream))
    assert len(outs) == 7
    for y, c in outs:
        assert isinstance(y, np.ndarray) and y.shape == (SMALL.K, SMALL.d_y)
        assert isinstance(c, np.ndarray) and c.shape == (SMALL.K,)
        assert np.isclose(c.sum(), 1.0, atol=1e-9)
    assert dc.grad_enabled()
