"""Covariance recursion, trace ratios, bounds, and collapse prediction.

Hand-derived fixed points used below (independent sharing, equal counts
unless stated):

* two_node: learner block obeys s_t = 0.25*s_{t-1} + 1 after a round-0
  inflation of 2, giving 1.5, 1.375, 1.34375 at t = 1, 2, 3.
* accumulating(4): learner blocks settle at 6, 4.5 and 19/6 + 2 times
  the single-fit covariance; everything is bounded.
* exp5, second node: trained on one fifth of each round's data straight
  from the source, so its block is exactly 5x single-fit from t = 1 on
  and its upper bound is the constant 5*Tr(V*).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collapsim import asymptotics as asym
from collapsim.asymptotics import (
    CovarianceState,
    LimitProportions,
    ZeroProportion,
)
from collapsim.dynamics import (
    BROADCAST,
    DimensionMismatch,
    SampleSchedule,
    TransitionMatrix,
    transition_matrix,
)
from collapsim.graphs import InteractionGraph, build_canonical, classify

from oracles import random_mixing_case, unrolled_covariance
from strategies import digraphs, spd_matrix


def props_for(graph, n_sample=100, n_rounds=50, **kw):
    sched = SampleSchedule.constant(graph, n_sample, **kw)
    return LimitProportions.from_schedule(graph, sched, n_rounds)


def test_initial_covariance_full_share():
    graph = build_canonical("self_loop")
    props = props_for(graph, n_rounds=0)
    v_star = np.array([[2.0, 0.5], [0.5, 1.0]])
    state = asym.initial_covariance(graph, props, v_star)
    assert state.t == 0
    np.testing.assert_allclose(state.cov, v_star)


def test_initial_covariance_split_shares():
    # two frozen nodes holding 25 and 75 of the 100 round-0 samples
    graph = InteractionGraph(2)
    sched = SampleSchedule(n0={0: 25, 1: 75})
    props = LimitProportions.from_schedule(graph, sched, 0)
    v_star = np.eye(2)
    cov = asym.initial_covariance(graph, props, v_star).cov
    np.testing.assert_allclose(cov[:2, :2], 4.0 * v_star)
    np.testing.assert_allclose(cov[2:, 2:], (4.0 / 3.0) * v_star)
    np.testing.assert_allclose(cov[:2, 2:], 0.0)


def test_initial_covariance_all_nature_is_zero():
    graph = InteractionGraph(2, nature=[0, 1])
    props = LimitProportions.from_schedule(graph, SampleSchedule(), 0)
    cov = asym.initial_covariance(graph, props, np.eye(3)).cov
    assert cov.shape == (6, 6)
    np.testing.assert_array_equal(cov, 0.0)
    assert props.b(0, 0) == 0.0


def test_initial_covariance_missing_share_raises():
    graph = InteractionGraph(1)
    props = LimitProportions(
        graph=graph,
        n_rounds=0,
        p0={},
        edge_frac={},
        totals=(1.0,),
        overlap={},
        alpha_floor=1.0,
    )
    with pytest.raises(ZeroProportion):
        asym.initial_covariance(graph, props, np.eye(2))


def test_round_noise_self_loop_is_single_fit():
    graph = build_canonical("self_loop")
    props = props_for(graph, n_rounds=3)
    v_star = np.array([[3.0, 1.0], [1.0, 2.0]])
    noise = asym.round_noise_cov(graph, props, v_star, 1)
    np.testing.assert_allclose(noise, v_star)


def test_round_noise_two_half_edges():
    # learner 2 trains on two equal shares: q/(S*S) = 1
    graph = InteractionGraph(3, [(0, 2), (1, 2)])
    props = props_for(graph, n_rounds=1)
    v_star = np.diag([2.0, 5.0])
    noise = asym.round_noise_cov(graph, props, v_star, 1)
    np.testing.assert_allclose(noise[4:, 4:], v_star)
    np.testing.assert_array_equal(noise[:4, :4], 0.0)


def test_round_noise_independent_cross_blocks_zero():
    graph = build_canonical("exp5")
    props = props_for(graph, n_rounds=1)
    noise = asym.round_noise_cov(graph, props, np.eye(2), 1)
    d = 2
    for i in range(5):
        for j in range(5):
            if i != j:
                np.testing.assert_array_equal(
                    noise[i * d : (i + 1) * d, j * d : (j + 1) * d], 0.0
                )


def test_round_noise_broadcast_overlap():
    # learners 1 and 2 read prefixes of the same source draw: 30 of 50
    # rows are shared, so q(1,2) = 0.6 while the totals are 0.6 and 1.0
    graph = InteractionGraph(3, [(0, 1), (0, 2)], nature=[0])
    sched = SampleSchedule(
        n0={1: 10, 2: 10},
        edge_overrides={(0, 1): 30, (0, 2): 50},
        sharing_mode=BROADCAST,
    )
    props = LimitProportions.from_schedule(graph, sched, 1)
    assert props.p_bar_edge(1, (0, 1)) == pytest.approx(0.6)
    assert props.p_bar_edge(1, (0, 2)) == pytest.approx(1.0)
    assert props.q_overlap(1, 1, 2) == pytest.approx(0.6)
    assert props.q_overlap(1, 2, 1) == pytest.approx(0.6)
    v_star = np.eye(1)
    noise = asym.round_noise_cov(graph, props, v_star, 1)
    assert noise[1, 2] == pytest.approx(0.6 / (0.6 * 1.0))
    assert noise[1, 1] == pytest.approx(0.6 / 0.36)
    assert noise[2, 2] == pytest.approx(1.0)


def test_round_noise_rejects_round_zero():
    graph = build_canonical("self_loop")
    props = props_for(graph, n_rounds=1)
    with pytest.raises(ValueError):
        asym.round_noise_cov(graph, props, np.eye(2), 0)


def test_proportion_invariants_from_schedule():
    graph = build_canonical("exp5")
    props = props_for(graph, n_sample=137, n_rounds=3, n0=29)
    for t in range(4):
        for s in range(4):
            assert props.b(t, s) * props.b(s, t) == pytest.approx(1.0, abs=1e-12)
    assert sum(props.p0.values()) == pytest.approx(1.0)
    assert props.alpha_floor > 0
    for val in props.edge_frac.values():
        assert val >= props.alpha_floor
    # disjoint per-edge datasets: diagonal overlap is the plain in-sum
    for t in (1, 2, 3):
        for v in graph.learners:
            assert props.q_overlap(t, v, v) == pytest.approx(props.in_sum(t, v))
            for w in graph.learners:
                if w != v:
                    assert props.q_overlap(t, v, w) == 0.0


def test_recurse_identity_mix_scales_by_b():
    rng = np.random.default_rng(7)
    cov = spd_matrix(rng, 6, 1.0)
    prev = CovarianceState(t=4, cov=cov)
    out = asym.recurse_covariance(
        prev, TransitionMatrix(t=5, P=np.eye(2)), 1.7, np.zeros((6, 6))
    )
    assert out.t == 5
    np.testing.assert_allclose(out.cov, 1.7 * cov, rtol=1e-14)


def test_recurse_dimension_mismatch():
    prev = CovarianceState(t=0, cov=np.eye(4))
    with pytest.raises(DimensionMismatch):
        asym.recurse_covariance(
            prev, TransitionMatrix(t=1, P=np.eye(3)), 1.0, np.zeros((4, 4))
        )
    with pytest.raises(DimensionMismatch):
        asym.recurse_covariance(
            prev, TransitionMatrix(t=1, P=np.eye(2)), 1.0, np.zeros((3, 3))
        )


def test_self_loop_series_counts_rounds():
    graph = build_canonical("self_loop")
    props = props_for(graph, n_rounds=100)
    v_star = np.array([[2.0, 0.3], [0.3, 0.5]])
    series = asym.trace_ratio_series(graph, props, v_star, 100)
    for t in range(1, 101):
        assert series[(t, 0)] == pytest.approx(t + 1, abs=1e-10)


def test_two_node_series_matches_hand_recursion():
    graph = build_canonical("two_node")
    props = props_for(graph, n_rounds=3)
    series = asym.trace_ratio_series(graph, props, np.eye(3), 3)
    assert series[(1, 1)] == pytest.approx(1.5, abs=1e-12)
    assert series[(2, 1)] == pytest.approx(1.375, abs=1e-12)
    assert series[(3, 1)] == pytest.approx(1.34375, abs=1e-12)


def test_unrolled_equivalence_on_random_draws():
    rng = np.random.default_rng(20260815)
    for _ in range(50):
        n_rounds = int(rng.integers(2, 31))
        graph, sched = random_mixing_case(rng, n_rounds)
        props = LimitProportions.from_schedule(graph, sched, n_rounds)
        d = int(rng.integers(1, 4))
        v_star = spd_matrix(rng, d, 1.0)
        iterated = asym.covariance_series(graph, props, v_star, n_rounds)[-1].cov
        direct = unrolled_covariance(graph, props, v_star, n_rounds)
        scale = max(1.0, float(np.abs(direct).max()))
        assert float(np.abs(iterated - direct).max()) <= 1e-10 * scale


def test_bounds_sandwich_strictly_on_random_draws():
    rng = np.random.default_rng(20260815)
    for _ in range(50):
        n_rounds = int(rng.integers(2, 31))
        graph, sched = random_mixing_case(rng, n_rounds)
        props = LimitProportions.from_schedule(graph, sched, n_rounds)
        d = int(rng.integers(1, 4))
        v_star = spd_matrix(rng, d, 1.0)
        final = asym.covariance_series(graph, props, v_star, n_rounds)[-1]
        for v in graph.learners:
            tr = float(np.trace(final.block(v, v, d)))
            lower, upper = asym.trace_bounds(graph, props, v_star, n_rounds, v)
            gap = 1e-6 * max(1.0, tr)
            assert lower < tr - gap
            assert upper > tr + gap


def test_unrolled_equivalence_broadcast_mode():
    rng = np.random.default_rng(99)
    for _ in range(5):
        n_rounds = int(rng.integers(2, 16))
        graph, sched = random_mixing_case(rng, n_rounds)
        sched = SampleSchedule(
            n0=sched.n0,
            round_overrides=sched.round_overrides,
            sharing_mode=BROADCAST,
        )
        props = LimitProportions.from_schedule(graph, sched, n_rounds)
        v_star = spd_matrix(rng, 2, 1.0)
        iterated = asym.covariance_series(graph, props, v_star, n_rounds)[-1].cov
        direct = unrolled_covariance(graph, props, v_star, n_rounds)
        scale = max(1.0, float(np.abs(direct).max()))
        assert float(np.abs(iterated - direct).max()) <= 1e-10 * scale
        for v in graph.learners:
            d = 2
            tr = float(np.trace(iterated[v * d : (v + 1) * d, v * d : (v + 1) * d]))
            lower, upper = asym.trace_bounds(graph, props, v_star, n_rounds, v)
            assert lower <= tr * (1 + 1e-9)
            assert upper >= tr * (1 - 1e-9)


def test_self_loop_bounds_degenerate_to_exact():
    graph = build_canonical("self_loop")
    props = props_for(graph, n_rounds=40)
    v_star = np.array([[2.0, 0.0], [0.0, 1.0]])
    for n_rounds in (1, 7, 40):
        lower, upper = asym.trace_bounds(graph, props, v_star, n_rounds, 0)
        exact = (n_rounds + 1) * np.trace(v_star)
        assert lower == pytest.approx(exact, rel=1e-12)
        assert upper == pytest.approx(exact, rel=1e-12)


def test_exp5_second_node_upper_bound_constant():
    graph = build_canonical("exp5")
    props = props_for(graph, n_rounds=60)
    v_star = np.eye(2)
    uppers = [
        asym.trace_bounds(graph, props, v_star, n_rounds, 1)[1]
        for n_rounds in (10, 30, 60)
    ]
    for u in uppers:
        assert u == pytest.approx(5.0 * np.trace(v_star), rel=1e-12)


def test_exp5_series_dichotomy():
    graph = build_canonical("exp5")
    props = props_for(graph, n_rounds=50)
    series = asym.trace_ratio_series(graph, props, np.eye(2), 50)
    ts = np.arange(10, 51)
    for v in (2, 3, 4):
        ys = np.array([series[(t, v)] for t in ts])
        slope = np.polyfit(ts, ys, 1)[0]
        assert slope > 0
    assert abs(series[(50, 1)] - series[(49, 1)]) < 1e-3


def test_accumulating_stays_bounded():
    graph = build_canonical("accumulating", [4])
    props = props_for(graph, n_rounds=120)
    series = asym.trace_ratio_series(graph, props, np.eye(2), 120)
    for v in graph.learners:
        assert series[(120, v)] < 10.0
        assert abs(series[(120, v)] - series[(119, v)]) < 1e-6
    # fixed points worked out by hand for the equal-share schedule
    assert series[(120, 1)] == pytest.approx(6.0, abs=1e-9)
    assert series[(120, 2)] == pytest.approx(4.5, abs=1e-9)
    assert series[(120, 3)] == pytest.approx(19.0 / 6.0, abs=1e-9)


def test_prediction_matches_series_slope_on_canonical_graphs():
    cases = [build_canonical(n) for n in (
        "self_loop",
        "two_node",
        "exp5",
        "exm3",
        "exp8",
        "fig2",
        "onediff_left",
        "onediff_right",
    )]
    cases.append(build_canonical("accumulating", [4]))
    v_star = np.array([[1.0]])
    n_rounds = 200
    for graph in cases:
        props = props_for(graph, n_rounds=n_rounds)
        series = asym.trace_ratio_series(graph, props, v_star, n_rounds)
        verdict = asym.predict_collapse(graph)
        ts = np.arange(n_rounds // 2, n_rounds + 1)
        for v in graph.learners:
            ys = np.array([series[(t, v)] for t in ts])
            slope = np.polyfit(ts, ys, 1)[0]
            assert (slope > 0.01) == (verdict[v] == "collapses"), (graph, v, slope)


def test_predict_collapse_examples():
    fig2 = asym.predict_collapse(build_canonical("fig2"))
    assert fig2 == {
        0: "frozen",
        1: "frozen",
        2: "bounded",
        3: "collapses",
        4: "collapses",
        5: "bounded",
    }
    left = asym.predict_collapse(build_canonical("onediff_left"))
    assert "collapses" not in left.values()
    assert asym.predict_collapse(build_canonical("self_loop")) == {0: "collapses"}


def test_predict_collapse_agrees_with_partition():
    for name in ("exp5", "exp8", "exm3", "onediff_right"):
        graph = build_canonical(name)
        part = classify(graph)
        verdict = asym.predict_collapse(graph)
        assert {v for v, s in verdict.items() if s == "collapses"} == set(part.m_l_c)
        assert {v for v, s in verdict.items() if s == "bounded"} == set(part.m_l_nc)
        assert {v for v, s in verdict.items() if s == "frozen"} == set(part.m_u)


def test_trace_bounds_rejects_non_learner():
    graph = build_canonical("exp5")
    props = props_for(graph, n_rounds=5)
    with pytest.raises(ValueError):
        asym.trace_bounds(graph, props, np.eye(2), 5, 0)


def test_limit_transition_matches_count_based_matrix():
    graph = build_canonical("exp8")
    sched = SampleSchedule.constant(graph, 250)
    props = LimitProportions.from_schedule(graph, sched, 2)
    np.testing.assert_allclose(
        asym.limit_transition(graph, props, 1).P,
        transition_matrix(graph, sched, 1).P,
        atol=1e-15,
    )


def test_covariance_state_check_rejects_bad_matrices():
    good = CovarianceState(t=0, cov=np.eye(4))
    good.check(2, 2)
    with pytest.raises(DimensionMismatch):
        good.check(3, 2)
    skew = np.eye(4)
    skew[0, 1] = 1e-3
    with pytest.raises(AssertionError):
        CovarianceState(t=0, cov=skew).check(2, 2)
    with pytest.raises(AssertionError):
        CovarianceState(t=0, cov=-np.eye(4)).check(2, 2)


def test_series_states_stay_symmetric_psd():
    for name in ("exp5", "exm3"):
        graph = build_canonical(name)
        props = props_for(graph, n_rounds=60)
        for state in asym.covariance_series(graph, props, np.eye(2), 60):
            state.check(graph.n_nodes, 2)


@settings(max_examples=40, deadline=None)
@given(digraphs(max_nodes=6, min_edges=1), st.integers(0, 2**32 - 1))
def test_series_psd_on_arbitrary_digraphs(graph, seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 3))
    v_star = spd_matrix(rng, d, 1.0)
    props = props_for(graph, n_sample=int(rng.integers(10, 400)), n_rounds=8)
    for state in asym.covariance_series(graph, props, v_star, 8):
        state.check(graph.n_nodes, d)
