"""Experiment orchestration: baselines, test protocol, sweeps, result files.

Seeds for every unit of work are derived from (master seed, purpose, ids),
never from call order, so reruns and worker scheduling cannot change any
result.  Retrieval metrics are recorded for the full test split; policy
learning runs on a seeded sample of it, one fresh policy per
(variant, baseline) pair.
"""

from __future__ import annotations

import csv
import hashlib
import json
import multiprocessing
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .a2c import A2CConfig, CurvePoint, train_policy
from .env import EpisodeConfig, SmdpEnv
from .errors import ConfigError
from .index import (RetrievalModel, load_checkpoint, make_index, make_qgn,
                    save_checkpoint, select_options)
from .meta import HrlOracle, MetaTrainConfig, OracleConfig, meta_train
from .tasks import (CraftWorldParams, DomainSplit, TaskGraph, VariantRef,
                    generate_craftworld_domain, load_domain_config)
from .utils import derive_seed, make_rng

BASELINE_LABELS = ("oi-hrl", "hrl-n", "hrl-n+k", "hrl-full")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    k: int = 0

    def __post_init__(self):
        if self.kind not in BASELINE_LABELS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "hrl-n+k" and self.k < 1:
            raise ConfigError("hrl-n+k needs k >= 1")
        if self.kind != "hrl-n+k" and self.k:
            raise ConfigError(f"baseline {self.kind} takes no k")

    @property
    def label(self) -> str:
        return f"hrl-n+{self.k}" if self.kind == "hrl-n+k" else self.kind

    @staticmethod
    def parse(text: str) -> "BaselineSpec":
        t = text.strip().lower()
        if t in ("oi-hrl", "hrl-n", "hrl-full"):
            return BaselineSpec(t)
        if t.startswith("hrl-n+"):
            try:
                return BaselineSpec("hrl-n+k", int(t[len("hrl-n+"):]))
            except ValueError:
                pass
        raise ConfigError(f"cannot parse baseline {text!r}")


def parse_baselines(text) -> tuple[BaselineSpec, ...]:
    items = text.split(",") if isinstance(text, str) else list(text)
    specs = tuple(BaselineSpec.parse(str(t)) for t in items if str(t).strip())
    if not specs:
        raise ConfigError("empty baseline list")
    if len({s.label for s in specs}) != len(specs):
        raise ConfigError("duplicate baselines")
    return specs


@dataclass(frozen=True)
class RetrievalMetrics:
    sufficient: bool
    extra_count: int
    missing_count: int

    @staticmethod
    def from_sets(fetched, recipe) -> "RetrievalMetrics":
        fetched, recipe = frozenset(fetched), frozenset(recipe)
        missing = len(recipe - fetched)
        return RetrievalMetrics(missing == 0, len(fetched - recipe), missing)


def select_baseline_options(spec: BaselineSpec, env: SmdpEnv,
                            goal: VariantRef,
                            model: RetrievalModel | None,
                            seed: int, p: float = 0.9) -> tuple[int, ...]:
    """Option set for one arm.  Oracle arms read the recipe (privileged);
    the retrieval arm queries the model on a freshly reset s0."""
    recipe = env.graph.recipe_options(goal)
    k_all = env.graph.option_count
    if spec.kind == "hrl-n":
        return tuple(sorted(recipe))
    if spec.kind == "hrl-full":
        return tuple(range(k_all))
    if spec.kind == "hrl-n+k":
        pool = sorted(set(range(k_all)) - recipe)
        if spec.k > len(pool):
            raise ConfigError(
                f"cannot add {spec.k} irrelevant options; only {len(pool)} "
                f"exist outside the recipe")
        rng = make_rng(derive_seed(seed, "extra-options"))
        picks = rng.choice(len(pool), size=spec.k, replace=False)
        return tuple(sorted(recipe | {pool[i] for i in picks}))
    if model is None:
        raise ConfigError("retrieval arm needs a meta-trained model")
    state = env.reset(goal, derive_seed(seed, "retrieval-reset"))
    return select_options(env.encode(state), model.index, model.qgn, p).fetched


# --- run configuration -------------------------------------------------------


@dataclass
class RunConfig:
    domain_config: str | None = None
    craftworld: dict | None = None
    retrieval_hidden: int = 100
    key_dim: int = 50
    key_init: str = "auto"
    p: float = 0.9
    meta: MetaTrainConfig = field(
        default_factory=lambda: MetaTrainConfig(iterations=5000))
    oracle: OracleConfig = field(default_factory=OracleConfig)
    a2c: A2CConfig = field(default_factory=A2CConfig)
    baselines: tuple[BaselineSpec, ...] = field(
        default_factory=lambda: parse_baselines("oi-hrl,hrl-n,hrl-n+2,hrl-full"))
    test_sample: int = 100
    seed: int = 0
    workers: int = 1
    checkpoint: str | None = None

    @staticmethod
    def from_yaml(path) -> "RunConfig":
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: run config must be a mapping")
        cfg = RunConfig()
        domain = raw.get("domain", {})
        cfg.domain_config = domain.get("config")
        if cfg.domain_config and not Path(cfg.domain_config).is_absolute():
            # relative to the run config's own directory
            cfg.domain_config = str(Path(path).parent / cfg.domain_config)
        cfg.craftworld = domain.get("craftworld")
        if cfg.domain_config is None and cfg.craftworld is None:
            raise ConfigError(f"{path}: domain.config or domain.craftworld "
                              "must be given")
        retrieval = raw.get("retrieval", {})
        cfg.retrieval_hidden = int(retrieval.get("hidden", cfg.retrieval_hidden))
        cfg.key_dim = int(retrieval.get("key_dim", cfg.key_dim))
        cfg.key_init = str(retrieval.get("key_init", cfg.key_init))
        cfg.p = float(retrieval.get("p", cfg.p))
        seed = int(raw.get("seed", 0))
        meta = raw.get("meta", {})
        defaults = MetaTrainConfig(iterations=1)
        cfg.meta = MetaTrainConfig(
            iterations=int(meta.get("iterations", 5000)),
            batch_size=int(meta.get("batch_size", 32)),
            # the training gate may sit above the deployment threshold
            p=float(meta.get("p", cfg.p)), seed=seed,
            optimizer=str(meta.get("optimizer", defaults.optimizer)),
            learning_rate=float(meta.get("learning_rate",
                                         defaults.learning_rate)),
            momentum=float(meta.get("momentum", defaults.momentum)),
            lr_warmup=float(meta.get("lr_warmup", defaults.lr_warmup)),
            lr_hold=float(meta.get("lr_hold", defaults.lr_hold)),
            lr_floor=float(meta.get("lr_floor", defaults.lr_floor)),
            weight_decay=float(meta.get("weight_decay",
                                        defaults.weight_decay)),
            key_lr_scale=float(meta.get("key_lr_scale",
                                        defaults.key_lr_scale)),
            average_tail=float(meta.get("average_tail",
                                        defaults.average_tail)))
        oracle = raw.get("oracle", {})
        cfg.oracle = OracleConfig(int(oracle.get("trajectories_per_call", 4)))
        a2c_raw = dict(raw.get("a2c", {}))
        cfg.a2c = A2CConfig(**{**a2c_raw, "seed": seed})
        ev = raw.get("evaluation", {})
        if "baselines" in ev:
            cfg.baselines = parse_baselines(ev["baselines"])
        cfg.test_sample = int(ev.get("test_sample", cfg.test_sample))
        cfg.seed = seed
        cfg.workers = int(raw.get("workers", 1))
        cfg.checkpoint = raw.get("checkpoint")
        if cfg.checkpoint and not Path(cfg.checkpoint).is_absolute():
            cfg.checkpoint = str(Path(path).parent / cfg.checkpoint)
        return cfg

    def to_dict(self) -> dict:
        d = {
            "domain": {"config": self.domain_config,
                       "craftworld": self.craftworld},
            "retrieval": {"hidden": self.retrieval_hidden,
                          "key_dim": self.key_dim,
                          "key_init": self.key_init, "p": self.p},
            "meta": asdict(self.meta),
            "oracle": asdict(self.oracle),
            "a2c": asdict(self.a2c),
            "evaluation": {"baselines": [b.label for b in self.baselines],
                           "test_sample": self.test_sample},
            "seed": self.seed,
            "workers": self.workers,
            "checkpoint": self.checkpoint,
        }
        return d


def load_domain(config: RunConfig) -> tuple[TaskGraph, DomainSplit]:
    if config.domain_config:
        graph, split, _ = load_domain_config(config.domain_config)
        return graph, split
    params = dict(config.craftworld or {})
    seed = int(params.pop("seed", config.seed))
    if "schemas" in params and params["schemas"] is not None:
        params["schemas"] = tuple(tuple(s) for s in params["schemas"])
    return generate_craftworld_domain(CraftWorldParams(**params), seed)


def build_model(env: SmdpEnv, config: RunConfig) -> RetrievalModel:
    rng = make_rng(derive_seed(config.seed, "retrieval-init"))
    k = env.graph.option_count
    scheme = config.key_init
    if scheme == "auto":
        # identity keys beat random ones whenever they fit
        scheme = "identity" if config.key_dim >= k else "glorot"
    index = make_index(k, config.key_dim, rng, scheme=scheme)
    qgn = make_qgn(env.state_dim, config.retrieval_hidden, config.key_dim, rng)
    return RetrievalModel(index, qgn)


# --- evaluation --------------------------------------------------------------


@dataclass
class EvalDataset:
    retrieval_rows: list[dict]
    curve_rows: list[dict]
    reward_aggregates: list[dict]
    length_aggregates: list[dict]
    manifest: dict


def _variant_label(ref: VariantRef) -> str:
    return f"{ref[0]}:{ref[1]}"


def _retrieval_pass(env, refs, baselines, model, master_seed, p):
    """Fetched sets and metrics for every (variant, arm)."""
    rows, fetched_map = [], {}
    for ref in refs:
        recipe = env.graph.recipe_options(ref)
        for spec in baselines:
            seed = derive_seed(master_seed, "fetch", ref[0], ref[1], spec.label)
            fetched = select_baseline_options(spec, env, ref, model, seed, p)
            fetched_map[(ref, spec.label)] = fetched
            m = RetrievalMetrics.from_sets(fetched, recipe)
            rows.append({
                "variant_id": _variant_label(ref),
                "baseline": spec.label,
                "sufficient": int(m.sufficient),
                "extra": m.extra_count,
                "missing": m.missing_count,
                "master_seed": master_seed,
                "variant_seed": seed,
            })
    return rows, fetched_map


_WORKER_ENV = None


def _worker_init(graph):
    global _WORKER_ENV
    _WORKER_ENV = SmdpEnv(graph)


def _worker_run(args):
    goal, label, fetched, a2c_dict, job_seed = args
    cfg = A2CConfig(**{**a2c_dict, "seed": job_seed})
    _, curve = train_policy(_WORKER_ENV, goal, fetched, cfg)
    return goal, label, curve


def _curve_to_rows(ref, label, curve, master_seed, job_seed):
    return [{
        "variant_id": _variant_label(ref),
        "baseline": label,
        "update": pt.update,
        "iteration": pt.env_steps,
        "mean_reward": pt.mean_reward,
        "mean_length": pt.mean_length,
        "completion": pt.completion,
        "master_seed": master_seed,
        "variant_seed": job_seed,
    } for pt in curve]


def _aggregate(curve_rows, baselines, value_key):
    """Per (baseline, iteration): mean and 95% normal CI across variants."""
    out = []
    for spec in baselines:
        rows = [r for r in curve_rows if r["baseline"] == spec.label]
        iterations = sorted({r["iteration"] for r in rows})
        for it in iterations:
            vals = np.array([r[value_key] for r in rows
                             if r["iteration"] == it])
            mean = float(vals.mean())
            if len(vals) > 1:
                half = float(1.96 * vals.std(ddof=1) / np.sqrt(len(vals)))
            else:
                half = 0.0
            out.append({"baseline": spec.label, "iteration": it,
                        "mean": mean, "ci_lo": mean - half,
                        "ci_hi": mean + half})
    return out


def sample_test_variants(split: DomainSplit, size: int, master_seed: int):
    refs = sorted(split.test)
    if size >= len(refs):
        return refs
    rng = make_rng(derive_seed(master_seed, "test-sample"))
    picks = rng.choice(len(refs), size=size, replace=False)
    return [refs[i] for i in sorted(picks)]


def run_evaluation(env: SmdpEnv, split: DomainSplit,
                   model: RetrievalModel | None,
                   config: RunConfig) -> EvalDataset:
    """Retrieval metrics on the full test split; policy training on a
    seeded sample of it, one fresh policy per (variant, baseline)."""
    if not split.test:
        raise ConfigError("test split is empty")
    needs_model = any(s.kind == "oi-hrl" for s in config.baselines)
    if needs_model and model is None:
        raise ConfigError("oi-hrl arm requires a meta-trained checkpoint")

    all_refs = sorted(split.test)
    retrieval_rows, fetched_map = _retrieval_pass(
        env, all_refs, config.baselines, model, config.seed, config.p)

    a2c_refs = sample_test_variants(split, config.test_sample, config.seed)
    a2c_dict = {k: v for k, v in asdict(config.a2c).items() if k != "seed"}
    jobs = []
    for ref in a2c_refs:
        for spec in config.baselines:
            job_seed = derive_seed(config.seed, "a2c", ref[0], ref[1],
                                   spec.label)
            jobs.append((ref, spec.label, fetched_map[(ref, spec.label)],
                         a2c_dict, job_seed))

    curve_rows = []
    if config.workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(config.workers, initializer=_worker_init,
                      initargs=(env.graph,)) as pool:
            results = pool.map(_worker_run, jobs)
        for (ref, label, fetched, _, job_seed), (_, _, curve) in zip(jobs, results):
            curve_rows.extend(_curve_to_rows(ref, label, curve,
                                             config.seed, job_seed))
    else:
        for ref, label, fetched, a2c_d, job_seed in jobs:
            cfg = A2CConfig(**{**a2c_d, "seed": job_seed})
            _, curve = train_policy(env, ref, fetched, cfg)
            curve_rows.extend(_curve_to_rows(ref, label, curve,
                                             config.seed, job_seed))

    reward_agg = _aggregate(curve_rows, config.baselines, "mean_reward")
    length_agg = _aggregate(curve_rows, config.baselines, "mean_length")
    manifest = {
        "config": config.to_dict(),
        "master_seed": config.seed,
        "domain_fingerprint": env.graph.fingerprint(),
        "checkpoint_sha256": _file_hash(config.checkpoint),
        "n_test_variants": len(all_refs),
        "n_policy_variants": len(a2c_refs),
    }
    return EvalDataset(retrieval_rows, curve_rows, reward_agg, length_agg,
                       manifest)


def _file_hash(path) -> str | None:
    if not path or not Path(path).exists():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- train-size sweep ---------------------------------------------------------


def run_trainsize_sweep(env: SmdpEnv, split: DomainSplit, config: RunConfig,
                        fractions, seeds_per_fraction: int = 3) -> list[dict]:
    """Retrain from scratch on a subset of train variants per (fraction,
    repetition); evaluate retrieval metrics on the full test split with
    resets fixed across fractions so the comparison is paired."""
    rows = []
    train = sorted(split.train)
    test = sorted(split.test)
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"fraction {fraction} outside (0, 1]")
        n = round(fraction * len(train))
        if n < 1:
            raise ConfigError(f"fraction {fraction} keeps no train variants")
        for rep in range(seeds_per_fraction):
            if fraction == 1.0:
                subset = list(train)
            else:
                rng = make_rng(derive_seed(config.seed, "sweep-subset",
                                           rep, int(fraction * 1_000_000)))
                picks = rng.choice(len(train), size=n, replace=False)
                subset = [train[i] for i in sorted(picks)]
            # rep 0 reuses the main run's init/meta seeds so fraction 1.0
            # reproduces the main model exactly
            rep_cfg = replace(config, seed=config.seed if rep == 0
                              else derive_seed(config.seed, "sweep-rep", rep))
            model = build_model(env, rep_cfg)
            meta_cfg = replace(config.meta, seed=rep_cfg.seed)
            meta_train(env, DomainSplit(train=tuple(subset), test=split.test),
                       model, meta_cfg, config.oracle)
            suff, extra, missing = [], [], []
            for ref in test:
                seed = derive_seed(config.seed, "fetch", ref[0], ref[1],
                                   "oi-hrl")
                fetched = select_baseline_options(
                    BaselineSpec("oi-hrl"), env, ref, model, seed, config.p)
                m = RetrievalMetrics.from_sets(
                    fetched, env.graph.recipe_options(ref))
                suff.append(m.sufficient)
                extra.append(m.extra_count)
                missing.append(m.missing_count)
            rows.append({
                "fraction": fraction,
                "rep": rep,
                "n_train": n,
                "sufficient_fraction": float(np.mean(suff)),
                "mean_extra": float(np.mean(extra)),
                "mean_missing": float(np.mean(missing)),
                "master_seed": config.seed,
            })
    return rows


# --- recipe-length completion report -------------------------------------------


def completion_report(env: SmdpEnv, refs, model: RetrievalModel,
                      config: RunConfig, n_buckets: int = 3) -> list[dict]:
    """Retrieval quality and oracle-verified completion grouped into
    contiguous recipe-length buckets of roughly equal variant counts."""
    refs = sorted(refs)
    oracle = HrlOracle(env, config.oracle)
    per_variant = []
    for ref in refs:
        recipe = env.graph.recipe_options(ref)
        seed = derive_seed(config.seed, "fetch", ref[0], ref[1], "oi-hrl")
        fetched = select_baseline_options(BaselineSpec("oi-hrl"), env, ref,
                                          model, seed, config.p)
        m = RetrievalMetrics.from_sets(fetched, recipe)
        trajs = oracle.solve(ref, fetched,
                             derive_seed(config.seed, "report-oracle",
                                         ref[0], ref[1]))
        per_variant.append({
            "length": len(recipe),
            "sufficient": m.sufficient,
            "extra": m.extra_count,
            "missing": m.missing_count,
            "completed": bool(trajs),
            "returns": [t.ret for t in trajs],
        })
    lengths = sorted({v["length"] for v in per_variant})
    n_buckets = min(n_buckets, len(lengths))
    # contiguous length ranges holding roughly equal variant counts
    edges, count, target = [], 0, len(per_variant) / n_buckets
    for ln in lengths:
        count += sum(1 for v in per_variant if v["length"] == ln)
        if count >= target * (len(edges) + 1) and len(edges) < n_buckets - 1:
            edges.append(ln)
    rows = []
    bounds = [(lengths[0] if not i else edges[i - 1] + 1,
               edges[i] if i < len(edges) else lengths[-1])
              for i in range(len(edges) + 1)]
    for lo, hi in bounds:
        group = [v for v in per_variant if lo <= v["length"] <= hi]
        if not group:
            continue
        rows.append({
            "recipe_length": f"{lo}-{hi}" if lo != hi else str(lo),
            "n_variants": len(group),
            "sufficient_fraction": float(np.mean([v["sufficient"] for v in group])),
            "completion_rate": float(np.mean([v["completed"] for v in group])),
            "mean_extra": float(np.mean([v["extra"] for v in group])),
            "mean_missing": float(np.mean([v["missing"] for v in group])),
        })
    return rows


# --- emission ------------------------------------------------------------------


RETRIEVAL_COLUMNS = ("variant_id", "baseline", "sufficient", "extra",
                     "missing", "master_seed", "variant_seed")
CURVE_COLUMNS = ("variant_id", "baseline", "update", "iteration",
                 "mean_reward", "mean_length", "completion", "master_seed",
                 "variant_seed")
AGGREGATE_COLUMNS = ("baseline", "iteration", "mean", "ci_lo", "ci_hi")


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            # repr of a builtin float is its shortest exact form
            w.writerow([repr(float(row[c])) if isinstance(row[c], float)
                        else row[c] for c in columns])


def emit_results(dataset: EvalDataset, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "retrieval": out / "retrieval.csv",
        "curves": out / "curves.csv",
        "aggregate": out / "aggregate.csv",
        "aggregate_length": out / "aggregate_length.csv",
        "manifest": out / "manifest.json",
    }
    _write_csv(paths["retrieval"], RETRIEVAL_COLUMNS, dataset.retrieval_rows)
    _write_csv(paths["curves"], CURVE_COLUMNS, dataset.curve_rows)
    _write_csv(paths["aggregate"], AGGREGATE_COLUMNS, dataset.reward_aggregates)
    _write_csv(paths["aggregate_length"], AGGREGATE_COLUMNS,
               dataset.length_aggregates)
    paths["manifest"].write_text(json.dumps(dataset.manifest, indent=2,
                                            sort_keys=True) + "\n")
    return paths


def emit_sweep(rows, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    _write_csv(path, ("fraction", "rep", "n_train", "sufficient_fraction",
                      "mean_extra", "mean_missing", "master_seed"), rows)
    return path


def emit_completion_report(rows, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "completion_by_length.csv"
    _write_csv(path, ("recipe_length", "n_variants", "sufficient_fraction",
                      "completion_rate", "mean_extra", "mean_missing"), rows)
    return path


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
