import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointplan.energy import EnergyWeights, default_weights, energy_tables, joint_energy
from jointplan.errors import ConfigurationError, ShapeError
from jointplan.inference import (ConditionalMarginals, LbpOptions, build_conditional_mrf,
                                 build_unconditional_mrf, enumerate_exact, lbp_marginals)
from jointplan.planner import interactive_cost, noninteractive_cost, plan, relevant_agents
from jointplan.sim.scenario import boxed_in, dense_merge
from jointplan.trajectory import KinematicState, SamplerProfile, sample_candidates

from conftest import make_context, random_scene

NO_SAFETY = dict(safety_collision_weight=0.0, safety_margin=0.0)


def exact_plan_costs(ctx, sets, w):
    """Expected cost per ego candidate under exact conditional marginals."""
    tables = energy_tables(ctx, sets, w)
    return np.array([interactive_cost(e, ctx, sets, w, enumerate_exact(build_conditional_mrf(ctx, sets, w, e, tables)),
                                      tables) for e in range(tables.k)])


def test_no_agents_cost_is_ego_terms():
    ego = KinematicState(0.0, 0.0, 0.0, 6.0)
    ctx = make_context(ego, [])
    sets = [sample_candidates(ego, SamplerProfile(k=4))]
    w = default_weights()
    empty = ConditionalMarginals(np.zeros((0, 4)), {})
    for e in range(4):
        ego_terms = joint_energy([e], ctx, sets, w)
        assert interactive_cost(e, ctx, sets, w, empty) == pytest.approx(ego_terms, abs=1e-12)
        assert noninteractive_cost(e, ctx, sets, w, empty) == interactive_cost(e, ctx, sets, w, empty)


def test_one_agent_two_candidates_hand_expansion():
    ego = KinematicState(0.0, 0.0, 0.0, 6.0)
    agent = KinematicState(7.0, 3.5, -0.05, 5.0)
    prof = SamplerProfile(k=2, accelerations=(-2.0, 1.0), curvatures=(0.0,), families=("straight",))
    ctx = make_context(ego, [agent])
    sets = [sample_candidates(s, prof) for s in (ego, agent)]
    w = default_weights()
    t = energy_tables(ctx, sets, w)
    for e in range(2):
        m = enumerate_exact(build_conditional_mrf(ctx, sets, w, e, t))
        hand = t.agent[0, e] + t.goal[e]
        for k in range(2):
            hand += m.unary[0, k] * (t.agent[1, k] + t.ego_safety[0, e, k])
        assert interactive_cost(e, ctx, sets, w, m) == pytest.approx(hand, abs=1e-12)


def test_cost_rejects_misaligned_marginals():
    ctx, sets = random_scene(np.random.default_rng(0), 2, k=4)
    with pytest.raises(ShapeError):
        interactive_cost(0, ctx, sets, default_weights(), ConditionalMarginals(np.full((1, 4), 0.25)))


def test_distant_agents_cost_independent_of_ego_index_beyond_ego_terms():
    ego = KinematicState(0.0, 0.0, 0.0, 6.0)
    far = [KinematicState(120.0, 3.5, 0.0, 5.0), KinematicState(-80.0, 0.0, 0.0, 5.0)]
    prof = SamplerProfile(k=4)
    ctx = make_context(ego, far)
    sets = [sample_candidates(s, prof) for s in [ego] + far]
    w = default_weights()
    t = energy_tables(ctx, sets, w)
    diffs = []
    for e in range(4):
        m = lbp_marginals(build_conditional_mrf(ctx, sets, w, e, t))
        diffs.append(interactive_cost(e, ctx, sets, w, m, t) - t.agent[0, e] - t.goal[e])
    np.testing.assert_allclose(diffs, diffs[0], atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_interactive_plan_matches_exact_oracle(seed):
    ctx, sets = random_scene(np.random.default_rng(100 + seed), 2, k=3)
    w = default_weights()
    costs = exact_plan_costs(ctx, sets, w)
    res = plan(ctx, sets, w, "interactive", LbpOptions(max_iterations=2000, tolerance=1e-12))
    assert res.chosen_index == int(np.argmin(costs))
    np.testing.assert_allclose(res.costs, costs, rtol=1e-6)


def test_exact_costs_equal_full_expectation():
    ctx, sets = random_scene(np.random.default_rng(4), 2, k=3)
    w = default_weights()
    t = energy_tables(ctx, sets, w)
    costs = exact_plan_costs(ctx, sets, w)
    for e in range(3):
        mrf = build_conditional_mrf(ctx, sets, w, e, t)
        assignments = list(itertools.product(range(3), repeat=2))
        logp = np.array([mrf.log_score(a) for a in assignments])
        p = np.exp(logp - logp.max())
        p /= p.sum()
        expect = t.agent[0, e] + t.goal[e] + sum(
            pa * sum(t.agent[i + 1, a[i]] + t.ego_safety[i, e, a[i]] for i in range(2))
            for pa, a in zip(p, assignments))
        assert costs[e] == pytest.approx(expect, rel=1e-12)


def test_k_one_chooses_zero():
    rng = np.random.default_rng(2)
    ctx, _ = random_scene(rng, 2, k=1)
    prof = SamplerProfile(k=1, accelerations=(0.0,), curvatures=(0.0,), families=("straight",))
    sets = [sample_candidates(o.state, prof) for o in ctx.observations]
    for mode in ("interactive", "non_interactive"):
        assert plan(ctx, sets, default_weights(), mode).chosen_index == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_modes_agree_without_safety(seed):
    ctx, sets = random_scene(np.random.default_rng(seed), 3, k=6)
    w = EnergyWeights(default_weights().w, **NO_SAFETY)
    a = plan(ctx, sets, w, "interactive")
    b = plan(ctx, sets, w, "non_interactive")
    assert a.chosen_index == b.chosen_index
    np.testing.assert_allclose(a.costs, b.costs, atol=1e-9)


def test_doubling_weights_keeps_choice_without_safety():
    ctx, sets = random_scene(np.random.default_rng(8), 2, k=6)
    w = EnergyWeights(default_weights().w, **NO_SAFETY)
    w2 = EnergyWeights(2 * default_weights().w, goal_weight=2 * w.goal_weight, **NO_SAFETY)
    assert plan(ctx, sets, w, "interactive").chosen_index == plan(ctx, sets, w2, "interactive").chosen_index


def test_plan_deterministic_and_tie_break():
    ctx, sets = random_scene(np.random.default_rng(3), 3)
    w = default_weights()
    a, b = plan(ctx, sets, w), plan(ctx, sets, w)
    assert a.chosen_index == b.chosen_index and a.costs.tobytes() == b.costs.tobytes()
    assert a.chosen_index == int(np.argmin(a.costs))
    # identical candidates tie; the lowest index wins
    ego = KinematicState(0.0, 0.0, 0.0, 5.0)
    prof = SamplerProfile(k=1, accelerations=(0.0,), curvatures=(0.0,), families=("straight",))
    one = sample_candidates(ego, prof)
    from jointplan.trajectory import CandidateSet
    twin = CandidateSet(np.repeat(one.array, 3, axis=0), ego, ("straight",) * 3, one.dt)
    r = plan(make_context(ego, []), [twin], w)
    assert r.chosen_index == 0 and np.all(r.costs == r.costs[0])


def test_plan_errors():
    ctx, sets = random_scene(np.random.default_rng(0), 1, k=4)
    with pytest.raises(ConfigurationError):
        plan(ctx, sets, default_weights(), "reactive")
    with pytest.raises(ConfigurationError):
        plan(ctx, [], default_weights())


def test_relevant_agents_radius_and_cap():
    ego = KinematicState(0.0, 0.0, 0.0, 5.0)
    agents = [KinematicState(float(x), 3.5, 0.0, 5.0) for x in (5, -10, 29, 31, 60)]
    ctx = make_context(ego, agents)
    assert relevant_agents(ctx) == [0, 1, 2]
    assert relevant_agents(ctx, max_agents=2) == [0, 1]
    sets = [sample_candidates(s, SamplerProfile(k=4)) for s in [ego] + agents]
    res = plan(ctx, sets, default_weights())
    assert res.agent_ids == (0, 1, 2)
    assert res.predictions.unary.shape == (3, 4)


def _merge_context(seed=0, t_ego=None):
    sc = dense_merge(seed)
    from jointplan.energy import AgentObservation, PlanningContext
    ego = t_ego or sc.ego_init
    agents = [a.state for a in sc.agents]
    ctx = PlanningContext(AgentObservation(ego, sc.ego_box), tuple(AgentObservation(a, sc.agents[i].box)
                                                                   for i, a in enumerate(agents)),
                          sc.route, sc.lanes, sc.speed_limit)
    sets = [sample_candidates(s, SamplerProfile(), sc.lanes) for s in [ego] + agents]
    return ctx, sets


def test_dense_merge_non_interactive_cost_of_merge_is_higher():
    # ego alongside a gap in the platoon: the merge candidates look worse when the
    # predictions ignore that traffic would yield
    ctx, sets = _merge_context(0, KinematicState(-8.0, 0.0, 0.0, 6.0))
    w = default_weights()
    inter = plan(ctx, sets, w, "interactive")
    non = plan(ctx, sets, w, "non_interactive")
    end_y = sets[0].array[:, -1, 1]
    merge = np.flatnonzero(end_y > 1.75)
    assert len(merge)
    assert np.all(non.costs[merge] >= inter.costs[merge])
    assert np.any(non.costs[merge] > inter.costs[merge])


def test_boxed_in_prefers_braking_to_stop():
    sc = boxed_in()
    from jointplan.energy import AgentObservation, PlanningContext
    ctx = PlanningContext(AgentObservation(sc.ego_init, sc.ego_box),
                          tuple(AgentObservation(a.state, a.box) for a in sc.agents), sc.route, sc.lanes)
    sets = [sample_candidates(s, SamplerProfile(), sc.lanes) for s in [sc.ego_init] + [a.state for a in sc.agents]]
    res = plan(ctx, sets, default_weights())
    assert res.chosen_trajectory.speeds[-1] == 0.0
    assert res.costs[res.chosen_index] < default_weights().safety_collision_weight


def test_chosen_plan_avoids_mode_prediction_collisions():
    from jointplan.geometry import BoundingBox
    from jointplan._backend import kernels
    for seed in range(5):
        ctx, sets = random_scene(np.random.default_rng(200 + seed), 3)
        res = plan(ctx, sets, default_weights())
        t = energy_tables(ctx, sets, default_weights())
        safe = [e for e in range(t.k) if not np.any(t.ego_safety[:, e, :].max(axis=1) >= 1e4)]
        if not safe:
            continue
        box = BoundingBox(4.5, 2.0)
        for row, c in enumerate(res.agent_ids):
            mode = int(np.argmax(res.predictions.unary[row]))
            g = kernels.rect_gaps(sets[0].array[[res.chosen_index], :, :3], sets[c + 1].array[[mode], :, :3],
                                  box.length, box.width, box.length, box.width)
            assert g.min() > 0
