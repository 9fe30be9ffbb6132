"""Environment dynamics: resets, option semantics, rewards, termination."""

import itertools
from pathlib import Path

import numpy as np
import pytest

from optfetch.env import (FLAG_INDEX, FLAGS, EpisodeConfig, SmdpEnv,
                          execution_prerequisites)
from optfetch.errors import ConfigError, GraphError
from optfetch.tasks import (CraftWorldParams, generate_craftworld_domain,
                            load_domain_config)

KITCHEN = Path(__file__).resolve().parents[1] / "src/optfetch/configs/kitchen_desk.yaml"


@pytest.fixture(scope="module")
def kitchen():
    graph, _, _ = load_domain_config(KITCHEN)
    return SmdpEnv(graph)


@pytest.fixture(scope="module")
def craft():
    # 3 groups of 3, schemas (0,1) and (1,2): ids 0..8 simple, 9 workshop,
    # 10 c1, 11 c2; make_c1 variant 0 grounds to (p1_1, p2_1) = options 0, 3.
    graph, _ = generate_craftworld_domain(
        CraftWorldParams(n_objects=9, n_groups=3, n_composites=2,
                         schema_arity=2, schemas=((0, 1), (1, 2))), seed=0)
    return SmdpEnv(graph)


def opt(env, name):
    return env.graph.option_index(env.graph.task_by_name(name).task_id)


def topo_order(prereq):
    """Deterministic valid execution order: lowest ready option first."""
    done, order = set(), []
    while len(order) < len(prereq):
        ready = sorted(o for o in prereq
                       if o not in done and prereq[o] <= done)
        order.append(ready[0])
        done.add(ready[0])
    return order


# --- craftworld -------------------------------------------------------------


def test_craft_reset_contents(craft):
    goal = (10, 0)
    state = craft.reset(goal, seed=3)
    required = craft.required_objects(goal)
    assert required == {0, 3, 9}
    present = {i for i in range(craft.n_objects) if state.presence[i]}
    assert required <= present
    distractors = present - required
    assert len(distractors) == 2
    assert all(craft.graph.objects[d].kind == "simple" for d in distractors)
    assert not distractors & {0, 3}
    assert state.inventory.sum() == 0
    assert state.step_count == 0


def test_craft_reset_no_distractors(craft):
    cfg = EpisodeConfig.for_graph(craft.graph, distractor_count=0)
    env = SmdpEnv(craft.graph, cfg)
    state = env.reset((10, 0), seed=3)
    present = {i for i in range(env.n_objects) if state.presence[i]}
    assert present == {0, 3, 9}


def test_craft_reset_deterministic(craft):
    a = craft.reset((10, 0), seed=11)
    b = craft.reset((10, 0), seed=11)
    assert np.array_equal(a.presence, b.presence)
    assert any(
        not np.array_equal(craft.reset((10, 0), seed=s).presence,
                           a.presence)
        for s in range(5))


def test_craft_pickup_moves_object(craft):
    goal = (10, 0)
    state = craft.reset(goal, seed=3)
    nxt, r, done = craft.apply_option(state, 0, goal)
    assert r == 0.0 and not done
    assert nxt.presence[0] == 0 and nxt.inventory[craft.collect_index[0]] == 1
    assert nxt.step_count == 1
    # source state untouched
    assert state.presence[0] == 1 and state.step_count == 0


def test_craft_pickup_absent_is_noop(craft):
    goal = (10, 0)
    state = craft.reset(goal, seed=3)
    absent = next(i for i in craft.simple_ids if not state.presence[i])
    nxt, r, done = craft.apply_option(state, absent, goal)
    assert r == 0.0 and not done
    assert np.array_equal(nxt.inventory, state.inventory)
    assert nxt.step_count == 1


def test_craft_irrelevant_pickup_penalty(craft):
    goal = (10, 0)
    state = craft.reset(goal, seed=3)
    distractor = next(i for i in craft.simple_ids
                      if state.presence[i] and i not in (0, 3))
    _, r, done = craft.apply_option(state, distractor, goal)
    assert r == -0.3 and not done


def test_craft_workshop_requires_ingredients(craft):
    goal = (10, 0)
    state = craft.reset(goal, seed=3)
    nxt, r, done = craft.apply_option(state, 9, goal)
    assert r == 0.0 and not done
    assert nxt.inventory.sum() == 0


def test_craft_full_recipe(craft):
    goal = (10, 0)
    traj = craft.rollout(goal, [0, 3, 9], seed=3)
    assert traj.ret == 1.0
    assert traj.options == (0, 3, 9)
    state = craft.reset(goal, seed=3)
    for o in (0, 3, 9):
        state, r, done = craft.apply_option(state, o, goal)
    assert done
    assert state.inventory[craft.collect_index[10]] == 1
    assert state.inventory[craft.collect_index[0]] == 0
    assert state.inventory[craft.collect_index[3]] == 0


def test_craft_sibling_variant_completes_goal_task(craft):
    # goal variant wants (p1_1, p2_1); assembling (p1_1, p2_2) still makes
    # c1, so completion is judged at the task level.
    goal = (10, 0)
    state = craft.reset(goal, seed=3)
    state.presence[4] = 1
    state, r0, _ = craft.apply_option(state, 0, goal)
    state, r1, _ = craft.apply_option(state, 4, goal)
    assert r1 == pytest.approx(-0.3)
    state, r2, done = craft.apply_option(state, 9, goal)
    assert done and r2 == 1.0
    assert state.inventory[craft.collect_index[10]] == 1


def test_craft_max_len_cutoff(craft):
    goal = (10, 0)
    state = craft.reset(goal, seed=3)
    for i in range(craft.config.max_len):
        state, r, done = craft.apply_option(state, 9, goal)
        assert done == (i == craft.config.max_len - 1)
    assert state.step_count == 10


def test_craft_base_pickup_goal(craft):
    traj = craft.rollout((2, 0), [2], seed=0)
    assert traj.ret == 1.0 and traj.options == (2,)


def test_craft_workshop_goal_rejected(craft):
    with pytest.raises(ConfigError):
        craft.reset((9, 0), seed=0)


def test_unknown_option_rejected(craft):
    state = craft.reset((10, 0), seed=0)
    with pytest.raises(GraphError):
        craft.apply_option(state, 99, (10, 0))


def test_craft_encode_layout(craft):
    assert craft.state_dim == 12 + 11
    goal = (10, 0)
    state = craft.reset(goal, seed=3)
    state, _, _ = craft.apply_option(state, 0, goal)
    vec = craft.encode(state)
    assert vec.shape == (23,) and vec.dtype == np.float64
    assert vec[0] == 0.0 and vec[12 + craft.collect_index[0]] == 1.0
    assert set(np.unique(vec)) <= {0.0, 1.0}


def test_craft_prerequisites(craft):
    prereq = execution_prerequisites(craft, (10, 0))
    assert prereq[9] == {0, 3}
    assert prereq[0] == frozenset() and prereq[3] == frozenset()


# --- kitchen ----------------------------------------------------------------


def kitchen_goal(env, task_name, variant_name):
    task = env.graph.task_by_name(task_name)
    for v in task.variants:
        if v.name == variant_name:
            return (task.task_id, v.variant_id)
    raise KeyError(variant_name)


def test_kitchen_encode_dim(kitchen):
    assert kitchen.state_dim == 14 + 0 + 14 * len(FLAGS) == 140


def test_kitchen_reset_required_present(kitchen):
    goal = kitchen_goal(kitchen, "omelette", "stove")
    required = kitchen.required_objects(goal)
    names = {kitchen.graph.objects[i].name for i in required}
    assert names == {"egg", "pan", "stove"}
    state = kitchen.reset(goal, seed=0)
    assert all(state.presence[i] for i in required)
    assert state.metadata.sum() == 0


def test_kitchen_distractor_filter_blocks_sibling(kitchen):
    # with every distractor coin landing heads, the microwave is the one
    # object whose inclusion would fully furnish the sibling variant
    goal = kitchen_goal(kitchen, "omelette", "stove")
    env = SmdpEnv(kitchen.graph,
                  EpisodeConfig.for_graph(kitchen.graph, distractor_prob=1.0))
    state = env.reset(goal, seed=0)
    microwave = kitchen.graph.object_id("microwave")
    bowl = kitchen.graph.object_id("bowl")
    assert state.presence[bowl] == 1
    assert state.presence[microwave] == 0
    assert state.presence.sum() == 13


def test_kitchen_no_reset_enables_sibling(kitchen):
    for ref in kitchen.graph.composite_variant_refs():
        task = kitchen.graph.tasks[ref[0]]
        alts = [(ref[0], v) for v in range(len(task.variants)) if v != ref[1]]
        for seed in range(4):
            state = kitchen.reset(ref, seed=seed)
            present = {i for i in range(kitchen.n_objects) if state.presence[i]}
            for alt in alts:
                assert not kitchen.required_objects(alt) <= present, \
                    (task.name, ref, alt, seed)


def test_kitchen_valid_order_exact_return(kitchen):
    goal = kitchen_goal(kitchen, "omelette", "stove")
    order = topo_order(execution_prerequisites(kitchen, goal))
    traj = kitchen.rollout(goal, order, seed=1)
    assert len(traj.options) == 5
    assert traj.ret == 1.0 - 0.002 * 5


def test_kitchen_every_topological_order_succeeds(kitchen):
    goal = kitchen_goal(kitchen, "omelette", "stove")
    prereq = execution_prerequisites(kitchen, goal)
    opts = sorted(prereq)
    n_valid = 0
    for perm in itertools.permutations(opts):
        pos = {o: i for i, o in enumerate(perm)}
        if any(pos[d] > pos[o] for o in opts for d in prereq[o]):
            continue
        n_valid += 1
        traj = kitchen.rollout(goal, perm, seed=2)
        assert traj.ret == 1.0 - 0.002 * len(opts), perm
    assert n_valid == 10  # two independent chains of lengths 2 and 3


def test_kitchen_invalid_order_fails(kitchen):
    goal = kitchen_goal(kitchen, "omelette", "stove")
    pe, be = opt(kitchen, "pickup_egg"), opt(kitchen, "break_egg")
    pp, po = opt(kitchen, "pickup_pan"), opt(kitchen, "puton_pan")
    cs = opt(kitchen, "cookon_stove")
    traj = kitchen.rollout(goal, [be, pe, pp, po, cs], seed=2)
    assert traj.ret == pytest.approx(-0.002 * 5)
    state = kitchen.reset(goal, seed=2)
    for o in (be, pe, pp, po, cs):
        state, _, done = kitchen.apply_option(state, o, goal)
    assert not done


def test_kitchen_precondition_noop(kitchen):
    goal = kitchen_goal(kitchen, "omelette", "stove")
    state = kitchen.reset(goal, seed=0)
    nxt, r, done = kitchen.apply_option(state, opt(kitchen, "cookon_stove"), goal)
    assert r == -0.002 and not done
    assert nxt.metadata.sum() == 0 and nxt.step_count == 1


def test_kitchen_flag_effects(kitchen):
    goal = kitchen_goal(kitchen, "omelette", "stove")
    state = kitchen.reset(goal, seed=0)
    egg = kitchen.graph.object_id("egg")
    state, _, _ = kitchen.apply_option(state, opt(kitchen, "pickup_egg"), goal)
    assert state.metadata[egg, FLAG_INDEX["picked_up"]] == 1
    state, _, _ = kitchen.apply_option(state, opt(kitchen, "break_egg"), goal)
    assert state.metadata[egg, FLAG_INDEX["broken"]] == 1
    assert state.metadata.sum() == 2


def test_kitchen_fill_sets_liquid_flag(kitchen):
    goal = kitchen_goal(kitchen, "coffee", "mug")
    state = kitchen.reset(goal, seed=0)
    mug = kitchen.graph.object_id("mug")
    state, _, _ = kitchen.apply_option(state, opt(kitchen, "pickup_mug"), goal)
    state, _, _ = kitchen.apply_option(
        state, opt(kitchen, "fill_mug_with_coffee"), goal)
    assert state.metadata[mug, FLAG_INDEX["contains_coffee"]] == 1


def test_kitchen_goal_is_task_level(kitchen):
    goal = kitchen_goal(kitchen, "omelette", "stove")
    state = kitchen.reset(goal, seed=0)
    for name in ("bowl", "microwave"):
        state.presence[kitchen.graph.object_id(name)] = 1
    alt = kitchen_goal(kitchen, "omelette", "microwave")
    order = topo_order(execution_prerequisites(kitchen, alt))
    total = 0.0
    for o in order:
        state, r, done = kitchen.apply_option(state, o, goal)
        total += r
    assert done and total == 1.0 - 0.002 * 5


def test_kitchen_longest_recipe_exact_return(kitchen):
    goal = kitchen_goal(kitchen, "soup_supper", "stove")
    prereq = execution_prerequisites(kitchen, goal)
    assert len(prereq) == 10
    traj = kitchen.rollout(goal, topo_order(prereq), seed=5)
    assert traj.ret == 1.0 - 0.002 * 10


def test_kitchen_prerequisite_map(kitchen):
    goal = kitchen_goal(kitchen, "omelette", "stove")
    prereq = execution_prerequisites(kitchen, goal)
    assert prereq[opt(kitchen, "break_egg")] == {opt(kitchen, "pickup_egg")}
    assert prereq[opt(kitchen, "puton_pan")] == {opt(kitchen, "pickup_pan")}
    assert prereq[opt(kitchen, "cookon_stove")] == {opt(kitchen, "puton_pan")}
    assert prereq[opt(kitchen, "pickup_egg")] == frozenset()


def test_kitchen_config_from_graph(kitchen):
    cfg = EpisodeConfig.for_graph(kitchen.graph)
    assert cfg.reward_complete == 1.0
    assert cfg.step_penalty == 0.002
    assert cfg.max_len == 500
    assert cfg.distractor_prob == 0.5
    with pytest.raises(ConfigError):
        EpisodeConfig.for_graph(kitchen.graph, bogus=1)


def test_reset_rejects_short_max_len(kitchen):
    env = SmdpEnv(kitchen.graph,
                  EpisodeConfig.for_graph(kitchen.graph, max_len=2))
    with pytest.raises(ConfigError):
        env.reset(kitchen_goal(kitchen, "coffee", "mug"), seed=0)


def test_trace_hook(craft):
    rows = []
    env = SmdpEnv(craft.graph)
    env.attach_trace(lambda *rec: rows.append(rec))
    env.rollout((10, 0), [0, 3, 9], seed=3)
    assert [r[0] for r in rows] == [1, 2, 3]
    assert [r[1] for r in rows] == [0, 3, 9]
    assert rows[-1][2] == 1.0 and rows[-1][3] is True


def test_invariant_checker(craft):
    cfg = EpisodeConfig.for_graph(craft.graph, check_invariants=True)
    env = SmdpEnv(craft.graph, cfg)
    state = env.reset((10, 0), seed=3)
    state, _, _ = env.apply_option(state, 0, (10, 0))
    state.presence[0] = 1  # corrupt: object on map and in inventory
    with pytest.raises(GraphError):
        env.apply_option(state, 3, (10, 0))
