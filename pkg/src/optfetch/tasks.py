"""Task graphs: base/composite tasks, variants, recipes, and domains.

A task is a group of variants; each variant lists precondition variants
of other tasks. Base tasks have no preconditions and correspond 1:1
with executable options. A variant's recipe is the recursive union of
its preconditions' recipes, bottoming out at base tasks.

Two domain styles exist: "craftworld" (pick up simple objects, combine
at a workshop into a complex object) and "kitchen" (flag-transforming
household options loaded from a config file).
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, GraphError
from .utils import make_rng

VariantRef = tuple[int, int]  # (task_id, variant_id)

RULE_KINDS = ("pickup", "puton", "cookon", "slice", "break", "fill", "workshop")
LIQUIDS = ("coffee", "water", "wine")


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    kind: str            # craftworld: simple | complex | workshop; kitchen: free-form
    group: int | None = None


@dataclass(frozen=True)
class RuleSpec:
    """Binding of a base task to its environment transition rule."""
    kind: str
    object_name: str | None = None
    liquid: str | None = None
    # extra precondition flags beyond presence of the bound object
    requires: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class TaskVariant:
    task_id: int
    variant_id: int
    name: str
    preconditions: tuple[VariantRef, ...]
    goal_object: str | None = None


@dataclass(frozen=True)
class Task:
    task_id: int
    name: str
    variants: tuple[TaskVariant, ...]
    base: bool
    rule: RuleSpec | None = None  # base tasks only


@dataclass
class DomainSplit:
    train: tuple[VariantRef, ...]
    test: tuple[VariantRef, ...]
    validation: tuple[VariantRef, ...] = ()


@dataclass
class TaskGraph:
    style: str                       # "craftworld" | "kitchen"
    objects: tuple[ObjectSpec, ...]
    tasks: tuple[Task, ...]
    groups: tuple[tuple[int, ...], ...] = ()
    episode_overrides: dict = field(default_factory=dict)
    _recipe_cache: dict = field(default_factory=dict, repr=False)
    _object_ids: dict = field(default_factory=dict, repr=False)
    _task_ids: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._object_ids = {o.name: i for i, o in enumerate(self.objects)}
        self._task_ids = {t.name: t.task_id for t in self.tasks}
        if len(self._object_ids) != len(self.objects):
            raise GraphError("duplicate object names")
        if len(self._task_ids) != len(self.tasks):
            raise GraphError("duplicate task names")
        self.base_task_ids = tuple(t.task_id for t in self.tasks if t.base)
        self._option_of_base = {tid: i for i, tid in
                                enumerate(self.base_task_ids)}

    # --- lookups ---

    def object_id(self, name: str) -> int:
        try:
            return self._object_ids[name]
        except KeyError:
            raise GraphError(f"unknown object {name!r}") from None

    def task_by_name(self, name: str) -> Task:
        try:
            return self.tasks[self._task_ids[name]]
        except KeyError:
            raise GraphError(f"unknown task {name!r}") from None

    def variant(self, ref: VariantRef) -> TaskVariant:
        tid, vid = ref
        if not (0 <= tid < len(self.tasks)):
            raise GraphError(f"task id {tid} out of range")
        task = self.tasks[tid]
        if not (0 <= vid < len(task.variants)):
            raise GraphError(
                f"variant id {vid} out of range for task {task.name!r}")
        return task.variants[vid]

    @property
    def option_count(self) -> int:
        return len(self.base_task_ids)

    def option_index(self, base_task_id: int) -> int:
        try:
            return self._option_of_base[base_task_id]
        except KeyError:
            raise GraphError(
                f"task id {base_task_id} is not a base task") from None

    def option_name(self, option: int) -> str:
        return self.tasks[self.base_task_ids[option]].name

    def composite_variant_refs(self) -> list[VariantRef]:
        return [(t.task_id, v.variant_id) for t in self.tasks if not t.base
                for v in t.variants]

    def recipe(self, ref: VariantRef) -> frozenset[int]:
        """Recipe of a variant as a frozenset of base task ids (cached)."""
        if ref not in self._recipe_cache:
            self._recipe_cache[ref] = expand_recipe(self, ref)
        return self._recipe_cache[ref]

    def recipe_options(self, ref: VariantRef) -> frozenset[int]:
        return frozenset(self.option_index(t) for t in self.recipe(ref))

    def fingerprint(self) -> str:
        """Structural hash used to guard checkpoint/domain pairing."""
        desc = {
            "style": self.style,
            "objects": [(o.name, o.kind, o.group) for o in self.objects],
            "groups": [list(g) for g in self.groups],
            "tasks": [
                (t.name, t.base,
                 list(t.rule and (t.rule.kind, t.rule.object_name,
                                  t.rule.liquid, list(t.rule.requires)) or ()),
                 [(v.name, list(v.preconditions), v.goal_object)
                  for v in t.variants])
                for t in self.tasks],
        }
        blob = json.dumps(desc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def expand_recipe(graph: TaskGraph, ref: VariantRef,
                  _stack: tuple[VariantRef, ...] = ()) -> frozenset[int]:
    """Recursive union of precondition recipes; base variants map to
    themselves. Cycles raise GraphError naming the offending path."""
    if ref in _stack:
        loop = _stack[_stack.index(ref):] + (ref,)
        names = " -> ".join(
            f"{graph.tasks[t].name}[{graph.variant((t, v)).name}]"
            for t, v in loop)
        raise GraphError(f"precondition cycle: {names}")
    variant = graph.variant(ref)
    task = graph.tasks[ref[0]]
    if task.base:
        return frozenset((task.task_id,))
    out: set[int] = set()
    for sub in variant.preconditions:
        out |= expand_recipe(graph, sub, _stack + (ref,))
    return frozenset(out)


# --- craftworld generation ---

@dataclass
class CraftWorldParams:
    n_objects: int = 60
    n_groups: int = 12
    n_composites: int = 8
    schema_arity: int = 3
    include_workshop: bool = True
    schemas: tuple[tuple[int, ...], ...] | None = None
    train_fraction: float = 0.8


def generate_craftworld_domain(params: CraftWorldParams,
                               seed: int) -> tuple[TaskGraph, DomainSplit]:
    """Grouped simple objects, pickup options, one workshop option, and
    composite tasks grounded over random group schemas.

    Schemas are sampled without replacement so recipes never collide
    across composites, which keeps train/test recipes disjoint.
    """
    p = params
    if p.n_groups < 1 or p.n_objects < 1 or p.n_objects % p.n_groups:
        raise ConfigError(
            f"{p.n_objects} objects do not split into {p.n_groups} equal groups")
    wants_composites = p.n_composites > 0 or p.schemas
    if wants_composites and p.schema_arity > p.n_groups:
        raise ConfigError(
            f"schema arity {p.schema_arity} exceeds group count {p.n_groups}")
    if not 0.0 < p.train_fraction < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    group_size = p.n_objects // p.n_groups
    rng = make_rng(seed)

    objects = [ObjectSpec(f"p{g + 1}_{m + 1}", "simple", group=g)
               for g in range(p.n_groups) for m in range(group_size)]
    groups = tuple(tuple(range(g * group_size, (g + 1) * group_size))
                   for g in range(p.n_groups))
    if p.include_workshop:
        objects.append(ObjectSpec("workshop", "workshop"))

    tasks: list[Task] = []
    for oid in range(p.n_objects):
        name = f"pickup_{objects[oid].name}"
        variant = TaskVariant(oid, 0, "only", (), goal_object=objects[oid].name)
        tasks.append(Task(oid, name, (variant,), base=True,
                          rule=RuleSpec("pickup", objects[oid].name)))
    workshop_refs: tuple[VariantRef, ...] = ()
    if p.include_workshop:
        tid = len(tasks)
        variant = TaskVariant(tid, 0, "only", (), goal_object="workshop")
        tasks.append(Task(tid, "use_workshop", (variant,), base=True,
                          rule=RuleSpec("workshop", "workshop")))
        workshop_refs = ((tid, 0),)

    if p.schemas is not None:
        schemas = [tuple(s) for s in p.schemas]
        for s in schemas:
            if len(set(s)) != len(s) or any(not 0 <= g < p.n_groups for g in s):
                raise ConfigError(f"bad schema {s}")
        if len(set(schemas)) != len(schemas):
            raise ConfigError("duplicate schemas")
        n_composites = len(schemas)
    elif p.n_composites == 0:
        schemas = []
        n_composites = 0
    else:
        combos = list(itertools.combinations(range(p.n_groups),
                                             p.schema_arity))
        if p.n_composites > len(combos):
            raise ConfigError(
                f"{p.n_composites} composites need distinct schemas but only "
                f"{len(combos)} group combinations exist")
        picks = rng.choice(len(combos), size=p.n_composites, replace=False)
        schemas = [combos[i] for i in sorted(picks)]
        n_composites = p.n_composites

    for ci in range(n_composites):
        tid = len(tasks)
        goal = f"c{ci + 1}"
        objects.append(ObjectSpec(goal, "complex"))
        variants = []
        member_lists = [groups[g] for g in schemas[ci]]
        for vid, grounding in enumerate(itertools.product(*member_lists)):
            pre = tuple((oid, 0) for oid in grounding) + workshop_refs
            variants.append(TaskVariant(tid, vid, f"v{vid}", pre,
                                        goal_object=goal))
        tasks.append(Task(tid, f"make_{goal}", tuple(variants), base=False))

    graph = TaskGraph("craftworld", tuple(objects), tuple(tasks),
                      groups=groups)

    train: list[VariantRef] = []
    test: list[VariantRef] = []
    for task in graph.tasks:
        if task.base:
            continue
        order = rng.permutation(len(task.variants))
        n_train = int(round(p.train_fraction * len(task.variants)))
        for pos, vid in enumerate(order):
            ref = (task.task_id, int(vid))
            (train if pos < n_train else test).append(ref)
    return graph, DomainSplit(train=tuple(sorted(train)),
                              test=tuple(sorted(test)))


# --- config file load/save ---

def _req(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"{where}: missing field {key!r}")
    return mapping[key]


def _parse_requires(raw, where: str) -> tuple[tuple[str, str], ...]:
    out = []
    for i, item in enumerate(raw or ()):
        if not isinstance(item, dict) or set(item) != {"object", "flag"}:
            raise ConfigError(
                f"{where}.requires[{i}]: expected {{object, flag}}")
        out.append((str(item["object"]), str(item["flag"])))
    return tuple(out)


def load_domain_config(path) -> tuple[TaskGraph, DomainSplit,
                                      tuple[RuleSpec, ...]]:
    """Load a domain description (objects, base tasks, composites, split).

    Returns the graph, the variant split, and the option rule bindings
    in library order.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    style = raw.get("style", "kitchen")
    if style not in ("kitchen", "craftworld"):
        raise ConfigError(f"{path}: unknown style {style!r}")

    objects = []
    group_map: dict[int, list[int]] = {}
    for i, ospec in enumerate(_req(raw, "objects", str(path))):
        where = f"objects[{i}]"
        if isinstance(ospec, str):
            ospec = {"name": ospec, "kind": "item"}
        name = str(_req(ospec, "name", where))
        group = ospec.get("group")
        objects.append(ObjectSpec(name, str(ospec.get("kind", "item")),
                                  group=group))
        if group is not None:
            group_map.setdefault(int(group), []).append(i)
    groups = tuple(tuple(group_map[g]) for g in sorted(group_map))

    tasks: list[Task] = []
    for i, bspec in enumerate(_req(raw, "base_tasks", str(path))):
        where = f"base_tasks[{i}]"
        name = str(_req(bspec, "name", where))
        kind = str(_req(bspec, "kind", where))
        if kind not in RULE_KINDS:
            raise ConfigError(f"{where}: unknown kind {kind!r}")
        obj = bspec.get("object")
        if obj is None and kind != "workshop":
            raise ConfigError(f"{where}: kind {kind!r} needs an object")
        if obj is None:
            obj = "workshop"
        obj = str(obj)
        if obj not in {o.name for o in objects}:
            raise ConfigError(f"{where}: unknown object {obj!r}")
        liquid = bspec.get("liquid")
        if kind == "fill":
            if liquid not in LIQUIDS:
                raise ConfigError(
                    f"{where}: fill needs a liquid out of {LIQUIDS}")
        elif liquid is not None:
            raise ConfigError(f"{where}: only fill tasks take a liquid")
        rule = RuleSpec(kind, obj, liquid,
                        _parse_requires(bspec.get("requires"), where))
        tid = len(tasks)
        variant = TaskVariant(tid, 0, "only", (), goal_object=obj)
        tasks.append(Task(tid, name, (variant,), base=True, rule=rule))

    n_base = len(tasks)
    name_to_tid = {t.name: t.task_id for t in tasks}
    composite_variant_names: dict[str, dict[str, int]] = {}

    composites_raw = raw.get("composite_tasks", [])
    # first pass fixes task ids so forward references resolve
    for i, cspec in enumerate(composites_raw):
        name = str(_req(cspec, "name", f"composite_tasks[{i}]"))
        if name in name_to_tid:
            raise ConfigError(f"composite_tasks[{i}]: duplicate name {name!r}")
        name_to_tid[name] = len(tasks) + i
        composite_variant_names[name] = {
            str(_req(v, "name", f"composite_tasks[{i}].variants[{j}]")): j
            for j, v in enumerate(_req(cspec, "variants",
                                       f"composite_tasks[{i}]"))}

    def resolve_ref(item, where: str) -> VariantRef:
        if isinstance(item, str):
            if item not in name_to_tid:
                raise ConfigError(f"{where}: unknown task {item!r}")
            tid = name_to_tid[item]
            if tid >= n_base:
                # composite referenced by bare name must be single-variant
                vnames = composite_variant_names.get(item, {})
                if len(vnames) != 1:
                    raise ConfigError(
                        f"{where}: {item!r} has multiple variants; "
                        f"use [task, variant]")
            return (tid, 0)
        if isinstance(item, (list, tuple)) and len(item) == 2:
            tname, vname = str(item[0]), str(item[1])
            if tname not in name_to_tid:
                raise ConfigError(f"{where}: unknown task {tname!r}")
            tid = name_to_tid[tname]
            if tid < n_base:
                raise ConfigError(
                    f"{where}: base task {tname!r} takes no variant")
            vnames = composite_variant_names[tname]
            if vname not in vnames:
                raise ConfigError(
                    f"{where}: task {tname!r} has no variant {vname!r}")
            return (tid, vnames[vname])
        raise ConfigError(f"{where}: expected task name or [task, variant]")

    for i, cspec in enumerate(composites_raw):
        name = str(cspec["name"])
        tid = len(tasks)
        variants = []
        for j, vspec in enumerate(cspec["variants"]):
            where = f"composite_tasks[{i}].variants[{j}]"
            refs = tuple(resolve_ref(r, where)
                         for r in _req(vspec, "requires", where))
            if not refs:
                raise ConfigError(f"{where}: empty requires")
            variants.append(TaskVariant(tid, j, str(vspec["name"]), refs,
                                        goal_object=vspec.get("goal_object")))
        tasks.append(Task(tid, name, tuple(variants), base=False))

    graph = TaskGraph(style, tuple(objects), tuple(tasks), groups=groups,
                      episode_overrides=dict(raw.get("episode", {})))
    bindings = tuple(graph.tasks[tid].rule for tid in graph.base_task_ids)
    split = _parse_split(raw.get("split"), graph, str(path))
    return graph, split, bindings


def _parse_split(raw, graph: TaskGraph, where: str) -> DomainSplit:
    refs = sorted(graph.composite_variant_refs())
    if raw is None:
        return DomainSplit(train=tuple(refs), test=())
    if "ratios" in raw:
        ratios = list(raw["ratios"])
        if len(ratios) not in (2, 3) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"{where}: split ratios must sum to 1")
        rng = make_rng(int(raw.get("seed", 0)))
        order = [refs[i] for i in rng.permutation(len(refs))]
        n_train = int(round(ratios[0] * len(refs)))
        n_val = int(round(ratios[1] * len(refs))) if len(ratios) == 3 else 0
        train = order[:n_train]
        val = order[n_train:n_train + n_val]
        test = order[n_train + n_val:]
        return DomainSplit(train=tuple(sorted(train)),
                           test=tuple(sorted(test)),
                           validation=tuple(sorted(val)))
    known = set(refs)

    def parse_refs(items, section):
        out = []
        for item in items or ():
            if not isinstance(item, (list, tuple)) or len(item) != 2:
                raise ConfigError(
                    f"{where}: split.{section} entries are [task, variant]")
            task = graph.task_by_name(str(item[0]))
            vid = None
            for v in task.variants:
                if v.name == str(item[1]):
                    vid = v.variant_id
            if vid is None:
                raise ConfigError(
                    f"{where}: no variant {item[1]!r} on task {item[0]!r}")
            ref = (task.task_id, vid)
            if ref not in known:
                raise ConfigError(f"{where}: {item} is not a composite variant")
            out.append(ref)
        return tuple(sorted(out))

    return DomainSplit(train=parse_refs(raw.get("train"), "train"),
                       test=parse_refs(raw.get("test"), "test"),
                       validation=parse_refs(raw.get("validation"),
                                             "validation"))


def save_domain_config(graph: TaskGraph, split: DomainSplit, path) -> None:
    """Write a domain (plus explicit split) in the load_domain_config format."""
    doc: dict = {"style": graph.style, "objects": [], "base_tasks": [],
                 "composite_tasks": []}
    if graph.episode_overrides:
        doc["episode"] = dict(graph.episode_overrides)
    for o in graph.objects:
        entry = {"name": o.name, "kind": o.kind}
        if o.group is not None:
            entry["group"] = int(o.group)
        doc["objects"].append(entry)
    for tid in graph.base_task_ids:
        task = graph.tasks[tid]
        rule = task.rule
        entry = {"name": task.name, "kind": rule.kind,
                 "object": rule.object_name}
        if rule.liquid is not None:
            entry["liquid"] = rule.liquid
        if rule.requires:
            entry["requires"] = [{"object": o, "flag": f}
                                 for o, f in rule.requires]
        doc["base_tasks"].append(entry)

    def ref_name(ref: VariantRef):
        task = graph.tasks[ref[0]]
        if task.base:
            return task.name
        return [task.name, graph.variant(ref).name]

    for task in graph.tasks:
        if task.base:
            continue
        variants = []
        for v in task.variants:
            entry = {"name": v.name,
                     "requires": [ref_name(r) for r in v.preconditions]}
            if v.goal_object is not None:
                entry["goal_object"] = v.goal_object
            variants.append(entry)
        doc["composite_tasks"].append({"name": task.name, "variants": variants})
    doc["split"] = {
        section: [[graph.tasks[t].name, graph.variant((t, v)).name]
                  for t, v in getattr(split, section)]
        for section in ("train", "validation", "test")}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


# --- validation ---

@dataclass
class Finding:
    level: str   # "error" | "warning"
    code: str
    message: str


@dataclass
class ValidationReport:
    findings: list[Finding]

    @property
    def ok(self) -> bool:
        return not any(f.level == "error" for f in self.findings)

    def lines(self) -> list[str]:
        if not self.findings:
            return ["graph valid: no findings"]
        return [f"{f.level.upper()} [{f.code}] {f.message}"
                for f in self.findings]


def validate_graph(graph: TaskGraph) -> ValidationReport:
    """Structural checks: acyclicity, reference sanity, rule bindings,
    precondition-flag closure, recipe uniqueness."""
    findings: list[Finding] = []
    err = lambda code, msg: findings.append(Finding("error", code, msg))
    warn = lambda code, msg: findings.append(Finding("warning", code, msg))

    effect_owner: dict[tuple[str, str], str] = {}
    for tid in graph.base_task_ids:
        task = graph.tasks[tid]
        rule = task.rule
        if rule is None:
            err("missing-rule", f"base task {task.name!r} has no rule binding")
            continue
        if rule.kind not in RULE_KINDS:
            err("bad-rule-kind",
                f"base task {task.name!r} has unknown kind {rule.kind!r}")
        if rule.object_name is not None and \
                rule.object_name not in {o.name for o in graph.objects}:
            err("dangling-object",
                f"base task {task.name!r} binds missing object "
                f"{rule.object_name!r}")
        effect = _rule_effect(rule)
        if effect is not None:
            if effect in effect_owner:
                err("duplicate-effect",
                    f"tasks {effect_owner[effect]!r} and {task.name!r} both "
                    f"set {effect}")
            effect_owner[effect] = task.name

    recipes_seen: dict[frozenset, VariantRef] = {}
    used_base: set[int] = set()
    for task in graph.tasks:
        if task.base:
            if task.variants[0].preconditions:
                err("base-preconditions",
                    f"base task {task.name!r} has preconditions")
            continue
        for v in task.variants:
            ref = (task.task_id, v.variant_id)
            if not v.preconditions:
                err("empty-preconditions",
                    f"{task.name}[{v.name}] is composite but has no "
                    f"preconditions")
                continue
            try:
                for sub in v.preconditions:
                    graph.variant(sub)
                recipe = graph.recipe(ref)
            except GraphError as exc:
                err("unreachable", f"{task.name}[{v.name}]: {exc}")
                continue
            used_base |= recipe
            if recipe in recipes_seen:
                other = recipes_seen[recipe]
                err("duplicate-recipe",
                    f"{task.name}[{v.name}] has the same recipe as "
                    f"{graph.tasks[other[0]].name}"
                    f"[{graph.variant(other).name}]")
            recipes_seen[recipe] = ref
            # every extra required flag must be produced inside the recipe
            effects = {_rule_effect(graph.tasks[b].rule)
                       for b in recipe if graph.tasks[b].rule}
            for b in recipe:
                rule = graph.tasks[b].rule
                if rule is None:
                    continue
                for obj, flag in rule.requires:
                    if (obj, flag) not in effects:
                        err("unsatisfiable-precondition",
                            f"{task.name}[{v.name}]: option "
                            f"{graph.tasks[b].name!r} requires {flag} on "
                            f"{obj!r} but nothing in the recipe sets it")

    if graph.composite_variant_refs():
        for tid in graph.base_task_ids:
            rule = graph.tasks[tid].rule
            if tid not in used_base and rule and rule.kind != "workshop":
                warn("orphan-option",
                     f"base task {graph.tasks[tid].name!r} appears in no "
                     f"composite recipe")
    return ValidationReport(findings)


def _rule_effect(rule: RuleSpec | None) -> tuple[str, str] | None:
    """(object, flag) a rule sets; None for workshop (goal-dependent)."""
    if rule is None or rule.kind == "workshop":
        return None
    flag = {"pickup": "picked_up", "puton": "on_appliance",
            "cookon": "cooked", "slice": "sliced", "break": "broken",
            "fill": f"contains_{rule.liquid}"}[rule.kind]
    return (rule.object_name, flag)
