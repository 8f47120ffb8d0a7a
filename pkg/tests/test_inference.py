import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointplan.energy import agent_energy, default_weights, safety_energy
from jointplan.errors import CapacityError, ConfigurationError, NumericError, ShapeError
from jointplan.inference import (LbpOptions, PairwiseMRF, build_conditional_mrf, build_joint_mrf,
                                 build_unconditional_mrf, enumerate_exact, lbp_batch, lbp_marginals)
from jointplan.trajectory import KinematicState, SamplerProfile, sample_candidates

from conftest import brute_marginals, make_context, random_mrf, random_scene, random_tree_edges

FIXTURES = Path(__file__).parent / "fixtures"
TIGHT = LbpOptions(max_iterations=2000, damping=0.5, tolerance=1e-13)


def softmax(a):
    e = np.exp(a - a.max())
    return e / e.sum()


def tv(p, q):
    return 0.5 * np.abs(p - q).sum(axis=-1)


def test_mrf_validation():
    with pytest.raises(ShapeError):
        PairwiseMRF(np.zeros(3))
    with pytest.raises(ShapeError):
        PairwiseMRF(np.zeros((2, 3)), {(0, 2): np.zeros((3, 3))})
    with pytest.raises(ShapeError):
        PairwiseMRF(np.zeros((2, 3)), {(0, 1): np.zeros((2, 3))})
    m = PairwiseMRF(np.zeros((2, 3)), {(1, 0): np.arange(9.0).reshape(3, 3)})
    assert m.edges == [(0, 1)]
    np.testing.assert_array_equal(m.log_pairwise[(0, 1)], np.arange(9.0).reshape(3, 3).T)


def test_options_validation():
    for kw in (dict(max_iterations=0), dict(damping=1.0), dict(damping=-0.1), dict(tolerance=0.0)):
        with pytest.raises(ConfigurationError):
            LbpOptions(**kw)


def test_exact_single_node_is_softmax():
    u = np.array([[0.3, -1.2, 2.0, 0.0]])
    r = enumerate_exact(PairwiseMRF(u))
    np.testing.assert_allclose(r.unary[0], softmax(u[0]), atol=1e-15)
    assert r.log_partition == pytest.approx(np.log(np.exp(u).sum()))


def test_exact_uniform_two_nodes():
    r = enumerate_exact(PairwiseMRF(np.zeros((2, 4)), {(0, 1): np.zeros((4, 4))}))
    np.testing.assert_allclose(r.unary, 0.25)
    np.testing.assert_allclose(r.pairwise[(0, 1)], 1 / 16)


def test_exact_matches_committed_seed7_tables():
    d = json.loads((FIXTURES / "exact_seed7.json").read_text())
    mrf = PairwiseMRF(np.array(d["unary"]), {(e["i"], e["j"]): np.array(e["potential"]) for e in d["pairwise"]})
    r = enumerate_exact(mrf)
    np.testing.assert_allclose(r.unary, d["marginals"], atol=1e-12)
    for e in d["pairwise_marginals"]:
        np.testing.assert_allclose(r.pairwise[(e["i"], e["j"])], e["table"], atol=1e-12)


def test_exact_matches_brute_force(rng):
    for _ in range(10):
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.6]
        mrf = random_mrf(rng, n, k, edges)
        u, p = brute_marginals(mrf)
        r = enumerate_exact(mrf)
        np.testing.assert_allclose(r.unary, u, atol=1e-12)
        for e in edges:
            np.testing.assert_allclose(r.pairwise[e], p[e], atol=1e-12)


def test_exact_capacity_and_numeric_errors():
    with pytest.raises(CapacityError):
        enumerate_exact(PairwiseMRF(np.zeros((8, 8))))
    with pytest.raises(NumericError):
        enumerate_exact(PairwiseMRF(np.array([[0.0, np.inf]])))
    with pytest.raises(NumericError):
        lbp_marginals(PairwiseMRF(np.array([[0.0, np.nan]])))


def test_exact_handles_collision_scale_potentials():
    u = np.array([[0.0, -1e4, -2e4], [-1e4, 0.0, 0.0]])
    r = enumerate_exact(PairwiseMRF(u, {(0, 1): np.array([[-1e4, 0, 0], [0, 0, 0], [0, 0, 0.0]])}))
    assert np.all(np.isfinite(r.unary))
    np.testing.assert_allclose(r.unary[0], [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(r.unary[1], [0, 0.5, 0.5], atol=1e-12)


def test_lbp_edgeless_is_exact_in_one_iteration(rng):
    u = rng.normal(size=(3, 5))
    r = lbp_marginals(PairwiseMRF(u))
    assert r.iterations <= 1 and r.converged
    np.testing.assert_allclose(r.unary, np.stack([softmax(x) for x in u]), atol=1e-15)


def test_lbp_two_node_tree_exact(rng):
    mrf = random_mrf(rng, 2, 4, [(0, 1)])
    r, ex = lbp_marginals(mrf, TIGHT), enumerate_exact(mrf)
    np.testing.assert_allclose(r.unary, ex.unary, atol=1e-9)
    np.testing.assert_allclose(r.pairwise[(0, 1)], ex.pairwise[(0, 1)], atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 5), st.integers(2, 5))
def test_lbp_exact_on_trees(seed, n, k):
    rng = np.random.default_rng(seed)
    mrf = random_mrf(rng, n, k, random_tree_edges(rng, n))
    assert mrf.is_tree()
    r, ex = lbp_marginals(mrf, TIGHT), enumerate_exact(mrf)
    np.testing.assert_allclose(r.unary, ex.unary, atol=1e-9)


def test_lbp_triangle_seed3_tv_bound():
    rng = np.random.default_rng(3)
    mrf = random_mrf(rng, 3, 4, [(0, 1), (1, 2), (0, 2)], scale=2.0)
    assert not mrf.is_tree()
    r, ex = lbp_marginals(mrf, TIGHT), enumerate_exact(mrf)
    assert tv(r.unary, ex.unary).max() <= 0.05


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 4), st.integers(2, 5), st.integers(1, 60))
def test_lbp_rows_sum_to_one_regardless_of_convergence(seed, n, k, iters):
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    mrf = random_mrf(rng, n, k, edges, scale=4.0)
    r = lbp_marginals(mrf, LbpOptions(max_iterations=iters))
    np.testing.assert_allclose(r.unary.sum(axis=1), 1.0, atol=1e-9)
    for p in r.pairwise.values():
        assert p.sum() == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-50, 50), st.floats(-50, 50))
def test_lbp_shift_invariance(seed, c_unary, c_pair):
    rng = np.random.default_rng(seed)
    mrf = random_mrf(rng, 3, 4, [(0, 1), (1, 2), (0, 2)])
    u = mrf.log_unary.copy()
    u[1] += c_unary
    pairs = dict(mrf.log_pairwise)
    pairs[(0, 2)] = pairs[(0, 2)] + c_pair
    a, b = lbp_marginals(mrf, TIGHT), lbp_marginals(PairwiseMRF(u, pairs), TIGHT)
    np.testing.assert_allclose(a.unary, b.unary, atol=1e-9)


def test_lbp_pairwise_consistency_and_determinism(rng):
    mrf = random_mrf(rng, 4, 4, [(0, 1), (1, 2), (2, 3), (0, 3)], scale=1.0)
    r = lbp_marginals(mrf, TIGHT)
    assert r.converged
    for (i, j), p in r.pairwise.items():
        np.testing.assert_allclose(p.sum(axis=1), r.unary[i], atol=1e-6)
        np.testing.assert_allclose(p.sum(axis=0), r.unary[j], atol=1e-6)
    r2 = lbp_marginals(mrf, TIGHT)
    assert r.unary.tobytes() == r2.unary.tobytes()


def test_lbp_batch_matches_individual_runs(rng):
    mrf = random_mrf(rng, 3, 4, [(0, 1), (1, 2), (0, 2)])
    us = rng.normal(size=(5, 3, 4))
    batch = lbp_batch(mrf, us)
    for u, r in zip(us, batch):
        single = lbp_marginals(PairwiseMRF(u, mrf.log_pairwise))
        np.testing.assert_allclose(r.unary, single.unary, atol=1e-14)
        assert r.iterations == single.iterations
    with pytest.raises(ShapeError):
        lbp_batch(mrf, us[0])


def _converging_pair():
    ego = KinematicState(0.0, 0.0, 0.0, 6.0)
    agents = [KinematicState(6.0, 3.5, -0.05, 6.0), KinematicState(-7.0, 3.5, -0.03, 7.0)]
    prof = SamplerProfile(k=5)
    ctx = make_context(ego, agents)
    return ctx, [sample_candidates(s, prof, ctx.lanes) for s in [ego] + agents]


def test_conditional_mrf_entries_match_energy_calls():
    ctx, sets = _converging_pair()
    w = default_weights()
    ea = agent_energy(ctx, sets, w)
    obs = ctx.observations
    for e in (0, 3):
        mrf = build_conditional_mrf(ctx, sets, w, e)
        assert mrf.edges == [(0, 1)]
        for i in range(2):
            for k in range(5):
                s = safety_energy(sets[0][e], obs[0].box, sets[i + 1][k], obs[i + 1].box, weights=w)
                assert mrf.log_unary[i, k] == pytest.approx(-ea[k, i + 1] - s, abs=1e-12)
        for k in range(5):
            for m in range(5):
                s = safety_energy(sets[1][k], obs[1].box, sets[2][m], obs[2].box, weights=w)
                assert mrf.log_pairwise[(0, 1)][k, m] == pytest.approx(-s, abs=1e-12)
    with pytest.raises(IndexError):
        build_conditional_mrf(ctx, sets, w, 5)


def test_conditional_single_agent_and_distant_pair():
    ego = KinematicState(0.0, 0.0, 0.0, 6.0)
    prof = SamplerProfile(k=4)
    ctx = make_context(ego, [KinematicState(10.0, 3.5, 0.0, 5.0)])
    sets = [sample_candidates(s, prof) for s in [ego, ctx.agents[0].state]]
    mrf = build_conditional_mrf(ctx, sets, default_weights(), 0)
    assert mrf.n_nodes == 1 and not mrf.edges
    far = [KinematicState(10.0, 3.5, 0.0, 5.0), KinematicState(110.0, 0.0, 0.0, 5.0)]
    ctx = make_context(ego, far)
    sets = [sample_candidates(s, prof) for s in [ego] + far]
    assert build_conditional_mrf(ctx, sets, default_weights(), 0).log_pairwise == {}


def test_unconditional_mrf():
    ctx, sets = _converging_pair()
    w = default_weights()
    mrf = build_unconditional_mrf(ctx, sets, w)
    np.testing.assert_allclose(mrf.log_unary, -agent_energy(ctx, sets, w)[:, 1:].T, atol=1e-12)
    zero = w.with_w(np.zeros(len(w.w)))
    far_ctx = make_context(ctx.ego.state, [ctx.agents[0].state])
    r = lbp_marginals(build_unconditional_mrf(far_ctx, sets[:2], zero))
    np.testing.assert_allclose(r.unary, 0.2)
    one = lbp_marginals(build_unconditional_mrf(far_ctx, sets[:2], w))
    np.testing.assert_allclose(one.unary[0], softmax(-agent_energy(far_ctx, sets[:2], w)[:, 1]), atol=1e-12)


def test_unconditional_three_agents_near_exact(rng):
    ctx, sets = random_scene(rng, 3, k=4)
    mrf = build_unconditional_mrf(ctx, sets, default_weights())
    r, ex = lbp_marginals(mrf, TIGHT), enumerate_exact(mrf)
    assert tv(r.unary, ex.unary).max() <= 0.05


def test_joint_mrf_recovers_joint_energy():
    from jointplan.energy import joint_energy
    ctx, sets = _converging_pair()
    w = default_weights()
    mrf = build_joint_mrf(ctx, sets, w)
    for a in [(0, 0, 0), (1, 2, 3), (4, 4, 1)]:
        assert mrf.log_score(a) == pytest.approx(-joint_energy(a, ctx, sets, w), rel=1e-12)
