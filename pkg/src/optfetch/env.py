"""Tabular SMDP environments over option libraries.

Two styles share one engine.  In ``craftworld`` style, pickup options move
objects from the grid into the inventory and a workshop option fuses the
ingredients of a composite recipe into a complex object.  In ``kitchen``
style, every option sets a single (object, flag) bit once its preconditions
hold, so any topological order of a recipe's prerequisite graph succeeds.

States are small integer arrays; ``encode`` flattens them to the float
vector consumed by the networks.  All stochasticity (distractor placement)
comes from an explicit per-episode seed, never from global state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, GraphError
from .tasks import TaskGraph, TaskVariant, VariantRef, _rule_effect
from .utils import make_rng

# Flag columns of the metadata matrix, kitchen style only.  Order is part of
# the state encoding contract and must not change between checkpoint writes.
FLAGS = (
    "picked_up",
    "cooked",
    "sliced",
    "broken",
    "on_appliance",
    "appliance_on",
    "contains_coffee",
    "contains_water",
    "contains_wine",
)

FLAG_INDEX = {name: i for i, name in enumerate(FLAGS)}


@dataclass
class EpisodeConfig:
    """Reward/termination knobs for one environment style."""

    reward_complete: float = 1.0
    irrelevant_penalty: float = 0.0
    step_penalty: float = 0.0
    max_len: int = 10
    distractor_count: int = 2
    distractor_prob: float = 0.0
    check_invariants: bool = False

    @classmethod
    def craftworld(cls) -> "EpisodeConfig":
        return cls(reward_complete=1.0, irrelevant_penalty=0.3,
                   step_penalty=0.0, max_len=10,
                   distractor_count=2, distractor_prob=0.0)

    @classmethod
    def kitchen(cls) -> "EpisodeConfig":
        return cls(reward_complete=1.0, irrelevant_penalty=0.0,
                   step_penalty=0.002, max_len=500,
                   distractor_count=0, distractor_prob=0.5)

    @classmethod
    def for_graph(cls, graph: TaskGraph, **overrides) -> "EpisodeConfig":
        base = cls.kitchen() if graph.style == "kitchen" else cls.craftworld()
        merged = dict(graph.episode_overrides)
        merged.update(overrides)
        known = {f.name for f in base.__dataclass_fields__.values()}
        bad = set(merged) - known
        if bad:
            raise ConfigError(f"unknown episode settings: {sorted(bad)}")
        return replace(base, **merged)


@dataclass
class EnvState:
    """Presence on the map, inventory contents, per-object flag matrix."""

    presence: np.ndarray
    inventory: np.ndarray
    metadata: np.ndarray
    step_count: int = 0

    def copy(self) -> "EnvState":
        return EnvState(self.presence.copy(), self.inventory.copy(),
                        self.metadata.copy(), self.step_count)


@dataclass(frozen=True)
class OptionRule:
    """Executable form of one base task's rule, resolved to integer ids."""

    option: int
    name: str
    kind: str
    object_id: int | None
    effect_flag: int | None
    requires: tuple[tuple[int, int], ...]  # (object_id, flag_index)


@dataclass(frozen=True)
class Trajectory:
    options: tuple[int, ...]
    ret: float


def build_rules(graph: TaskGraph) -> tuple[OptionRule, ...]:
    rules = []
    for opt in range(graph.option_count):
        tid = graph.base_task_ids[opt]
        task = graph.tasks[tid]
        rule = task.rule
        if rule is None:
            raise GraphError(f"base task '{task.name}' has no rule")
        if graph.style == "craftworld" and rule.kind not in ("pickup", "workshop"):
            raise ConfigError(
                f"rule kind '{rule.kind}' not available in craftworld style")
        if graph.style == "kitchen" and rule.kind == "workshop":
            raise ConfigError("workshop rules require craftworld style")
        oid = graph.object_id(rule.object_name) if rule.object_name else None
        effect = _rule_effect(rule)
        flag = FLAG_INDEX[effect[1]] if effect is not None else None
        requires = tuple(
            (graph.object_id(obj), FLAG_INDEX[fl]) for obj, fl in rule.requires)
        rules.append(OptionRule(opt, task.name, rule.kind, oid, flag, requires))
    return tuple(rules)


class SmdpEnv:
    """Option-level environment bound to one task graph.

    ``reset`` builds the initial state for a goal variant; ``apply_option``
    advances one SMDP step (a failed precondition is a no-op that still
    consumes the step).  The goal is threaded through calls rather than
    stored so one env instance can serve many variants.
    """

    def __init__(self, graph: TaskGraph, config: EpisodeConfig | None = None):
        self.graph = graph
        self.config = config or EpisodeConfig.for_graph(graph)
        self.rules = build_rules(graph)
        self.n_objects = len(graph.objects)
        self.n_flags = len(FLAGS) if graph.style == "kitchen" else 0

        if graph.style == "craftworld":
            self.collectible_ids = tuple(
                i for i, o in enumerate(graph.objects) if o.kind != "workshop")
            self.workshop_id = next(
                (i for i, o in enumerate(graph.objects) if o.kind == "workshop"),
                None)
        else:
            self.collectible_ids = ()
            self.workshop_id = None
        self.collect_index = {oid: j for j, oid in enumerate(self.collectible_ids)}
        self.simple_ids = tuple(
            i for i, o in enumerate(graph.objects) if o.kind == "simple")

        self._ingredients_cache: dict[VariantRef, frozenset[int]] = {}
        self._goal_sets_cache: dict[int, tuple] = {}
        self._trace = None

    # -- geometry -----------------------------------------------------------

    @property
    def state_dim(self) -> int:
        return self.n_objects + len(self.collectible_ids) + self.n_objects * self.n_flags

    def encode(self, state: EnvState) -> np.ndarray:
        out = np.empty(self.state_dim)
        n, c = self.n_objects, len(self.collectible_ids)
        out[:n] = state.presence
        out[n:n + c] = state.inventory
        if self.n_flags:
            out[n + c:] = state.metadata.reshape(-1)
        return out

    def attach_trace(self, fn) -> None:
        """fn(step, option, reward, done) called after every transition."""
        self._trace = fn

    # -- recipes ------------------------------------------------------------

    def ingredient_objects(self, ref: VariantRef) -> frozenset[int]:
        """Simple objects a variant's recipe picks up (workshop excluded)."""
        cached = self._ingredients_cache.get(ref)
        if cached is not None:
            return cached
        objs = set()
        for opt in self.graph.recipe_options(ref):
            rule = self.rules[opt]
            if rule.kind == "pickup" and rule.object_id is not None:
                objs.add(rule.object_id)
        result = frozenset(objs)
        self._ingredients_cache[ref] = result
        return result

    def required_objects(self, ref: VariantRef) -> frozenset[int]:
        """Objects that must be on the map for the recipe to be executable."""
        objs = set()
        for opt in self.graph.recipe_options(ref):
            rule = self.rules[opt]
            if rule.object_id is not None:
                objs.add(rule.object_id)
            for oid, _ in rule.requires:
                objs.add(oid)
        if self.graph.style == "craftworld" and self.workshop_id is not None:
            tid = ref[0]
            if not self.graph.tasks[tid].base:
                objs.add(self.workshop_id)
        return frozenset(objs)

    def _goal_predicates(self, task_id: int):
        """Per-variant completion predicates for a goal task, precomputed."""
        cached = self._goal_sets_cache.get(task_id)
        if cached is not None:
            return cached
        task = self.graph.tasks[task_id]
        preds = []
        if self.graph.style == "craftworld":
            for v in range(len(task.variants)):
                goal_obj = task.variants[v].goal_object
                if goal_obj is None:
                    if task.rule is not None and task.rule.kind == "pickup":
                        goal_obj = task.rule.object_name
                    else:
                        raise ConfigError(
                            f"task '{task.name}' cannot serve as a goal")
                oid = self.graph.object_id(goal_obj)
                preds.append(("inventory", self.collect_index[oid]))
        else:
            for v in range(len(task.variants)):
                pairs = []
                for opt in self.graph.recipe_options((task_id, v)):
                    rule = self.rules[opt]
                    if rule.effect_flag is not None and rule.object_id is not None:
                        pairs.append((rule.object_id, rule.effect_flag))
                rows = np.array([p[0] for p in pairs], dtype=np.intp)
                cols = np.array([p[1] for p in pairs], dtype=np.intp)
                preds.append(("flags", rows, cols))
        self._goal_sets_cache[task_id] = tuple(preds)
        return self._goal_sets_cache[task_id]

    def goal_achieved(self, state: EnvState, goal: VariantRef) -> bool:
        """Task-level success: any variant of the goal task counts."""
        for pred in self._goal_predicates(goal[0]):
            if pred[0] == "inventory":
                if state.inventory[pred[1]]:
                    return True
            else:
                _, rows, cols = pred
                if rows.size and bool(state.metadata[rows, cols].all()):
                    return True
        return False

    # -- episode ------------------------------------------------------------

    def reset(self, goal: VariantRef, seed: int) -> EnvState:
        graph, cfg = self.graph, self.config
        variant = graph.variant(goal)
        recipe_len = len(graph.recipe_options(goal))
        if recipe_len > cfg.max_len:
            raise ConfigError(
                f"recipe of '{variant.name}' needs {recipe_len} steps, "
                f"max_len is {cfg.max_len}")
        if graph.style == "craftworld" and graph.tasks[goal[0]].rule is not None \
                and graph.tasks[goal[0]].rule.kind == "workshop":
            raise ConfigError("a bare workshop task cannot be a goal")

        rng = make_rng(seed)
        required = self.required_objects(goal)
        presence = np.zeros(self.n_objects, dtype=np.uint8)
        for oid in required:
            presence[oid] = 1

        if graph.style == "craftworld":
            pool = [o for o in self.simple_ids if o not in required]
            count = min(cfg.distractor_count, len(pool))
            if count:
                picks = rng.choice(len(pool), size=count, replace=False)
                for j in picks:
                    presence[pool[j]] = 1
        else:
            present = set(required)
            alt_sets = [self.required_objects((goal[0], v))
                        for v in range(len(graph.tasks[goal[0]].variants))
                        if v != goal[1]]
            for oid in range(self.n_objects):
                if oid in required:
                    continue
                coin = rng.random() < cfg.distractor_prob
                if not coin:
                    continue
                tentative = present | {oid}
                if any(s <= tentative for s in alt_sets):
                    continue  # would make a sibling variant fully available
                present.add(oid)
                presence[oid] = 1

        inventory = np.zeros(len(self.collectible_ids), dtype=np.uint8)
        metadata = np.zeros((self.n_objects, self.n_flags), dtype=np.uint8)
        return EnvState(presence, inventory, metadata, 0)

    def option_executable(self, state: EnvState, option: int,
                          goal: VariantRef) -> bool:
        rule = self._rule(option)
        if self.graph.style == "craftworld":
            if rule.kind == "pickup":
                return bool(state.presence[rule.object_id])
            return self._workshop_ready(state, goal) is not None
        if rule.object_id is not None and not state.presence[rule.object_id]:
            return False
        for oid, flag in rule.requires:
            if not state.metadata[oid, flag]:
                return False
        return True

    def apply_option(self, state: EnvState, option: int,
                     goal: VariantRef) -> tuple[EnvState, float, bool]:
        """One SMDP transition.  Returns (next_state, reward, done)."""
        rule = self._rule(option)
        cfg = self.config
        nxt = state.copy()
        reward = -cfg.step_penalty

        if self.graph.style == "craftworld":
            if rule.kind == "pickup":
                if nxt.presence[rule.object_id]:
                    nxt.presence[rule.object_id] = 0
                    nxt.inventory[self.collect_index[rule.object_id]] = 1
                    if rule.object_id not in self.ingredient_objects(goal):
                        reward -= cfg.irrelevant_penalty
            else:  # workshop
                ready = self._workshop_ready(nxt, goal)
                if ready is not None:
                    for oid in self.ingredient_objects(ready):
                        nxt.inventory[self.collect_index[oid]] = 0
                    goal_obj = self.graph.variant(ready).goal_object
                    made = self.graph.object_id(goal_obj)
                    nxt.inventory[self.collect_index[made]] = 1
        else:
            if self.option_executable(state, option, goal):
                nxt.metadata[rule.object_id, rule.effect_flag] = 1

        nxt.step_count = state.step_count + 1
        achieved = self.goal_achieved(nxt, goal)
        if achieved:
            reward += cfg.reward_complete
        done = achieved or nxt.step_count >= cfg.max_len

        if cfg.check_invariants:
            self._check_invariants(nxt)
        if self._trace is not None:
            self._trace(nxt.step_count, option, reward, done)
        return nxt, reward, done

    def rollout(self, goal: VariantRef, options, seed: int) -> Trajectory:
        """Apply a fixed option sequence from reset; used by tests and oracles."""
        state = self.reset(goal, seed)
        total = 0.0
        executed = []
        for opt in options:
            state, r, done = self.apply_option(state, opt, goal)
            total += r
            executed.append(opt)
            if done:
                break
        return Trajectory(tuple(executed), total)

    # -- internals ----------------------------------------------------------

    def _rule(self, option: int) -> OptionRule:
        if not 0 <= option < len(self.rules):
            raise GraphError(f"unknown option id {option}")
        return self.rules[option]

    def _workshop_ready(self, state: EnvState, goal: VariantRef):
        """Goal-task variant whose ingredients sit in the inventory, if any.

        The goal variant is preferred; sibling variants are checked in id
        order so ties resolve deterministically.
        """
        if self.workshop_id is None or not state.presence[self.workshop_id]:
            return None
        task = self.graph.tasks[goal[0]]
        if task.base:
            return None
        order = [goal] + [(goal[0], v) for v in range(len(task.variants))
                          if v != goal[1]]
        for ref in order:
            ingredients = self.ingredient_objects(ref)
            if ingredients and all(
                    state.inventory[self.collect_index[o]] for o in ingredients):
                return ref
        return None

    def _check_invariants(self, state: EnvState) -> None:
        if state.presence.max(initial=0) > 1 or state.inventory.max(initial=0) > 1:
            raise GraphError("non-binary occupancy")
        if self.n_flags and state.metadata.max(initial=0) > 1:
            raise GraphError("non-binary flag")
        for oid in self.collectible_ids:
            if state.presence[oid] and state.inventory[self.collect_index[oid]]:
                raise GraphError(
                    f"object {oid} both on map and in inventory")
        if state.step_count > self.config.max_len:
            raise GraphError("episode ran past max_len")


def execution_prerequisites(env: SmdpEnv, goal: VariantRef) -> dict[int, frozenset[int]]:
    """Option-level prerequisite sets within one recipe.

    Craftworld: the workshop option requires every pickup in the recipe.
    Kitchen: an option requires whichever recipe options set the flags it
    needs (graph validation guarantees each flag has exactly one setter).
    """
    opts = env.graph.recipe_options(goal)
    prereq: dict[int, frozenset[int]] = {}
    if env.graph.style == "craftworld":
        pickups = frozenset(o for o in opts if env.rules[o].kind == "pickup")
        for o in opts:
            prereq[o] = pickups if env.rules[o].kind == "workshop" else frozenset()
        return prereq
    setter: dict[tuple[int, int], int] = {}
    for o in opts:
        rule = env.rules[o]
        if rule.effect_flag is not None and rule.object_id is not None:
            setter[(rule.object_id, rule.effect_flag)] = o
    for o in opts:
        need = set()
        for pair in env.rules[o].requires:
            dep = setter.get(pair)
            if dep is None:
                raise GraphError(
                    f"option '{env.rules[o].name}' needs {pair} but no recipe "
                    f"option sets it")
            need.add(dep)
        prereq[o] = frozenset(need)
    return prereq
