"""Command-line front end.

Subcommands cover the full workflow: generate a procedural domain file,
meta-train the retrieval model, evaluate baselines on the test split,
sweep the train split size, and summarize result files.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .errors import OptfetchError
from .harness import (RunConfig, build_model, completion_report, emit_completion_report,
                      emit_results, emit_sweep, load_domain, parse_baselines,
                      read_csv_rows, run_evaluation, run_trainsize_sweep)
from .index import RetrievalModel, load_checkpoint, save_checkpoint
from .meta import meta_train
from .env import EpisodeConfig, SmdpEnv
from .tasks import (CraftWorldParams, generate_craftworld_domain,
                    save_domain_config, validate_graph)


def _add_common(p: argparse.ArgumentParser, *names):
    if "config" in names:
        p.add_argument("--config", help="run configuration yaml")
    if "seed" in names:
        p.add_argument("--seed", type=int, default=None,
                       help="master seed; overrides the config")
    if "out" in names:
        p.add_argument("--out", required=True, help="output directory")
    if "baselines" in names:
        p.add_argument("--baselines", default=None,
                       help="comma list, e.g. oi-hrl,hrl-n,hrl-n+2,hrl-full")
    if "fractions" in names:
        p.add_argument("--fractions", default="0.25,0.5,1.0",
                       help="comma list of train-split fractions")
    if "workers" in names:
        p.add_argument("--workers", type=int, default=None,
                       help="concurrent policy-training jobs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optfetch",
        description="option retrieval and hierarchical policy workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-domain",
                       help="generate a crafting domain file")
    _add_common(g, "config", "seed", "out")

    m = sub.add_parser("meta-train", help="train the retrieval model")
    _add_common(m, "config", "seed", "out")
    m.set_defaults(require_config=True)

    e = sub.add_parser("evaluate", help="run baselines on the test split")
    _add_common(e, "config", "seed", "out", "baselines", "workers")
    e.add_argument("--retrieval-only", action="store_true",
                   help="skip policy learning; emit retrieval metrics and "
                        "the recipe-length completion report")
    e.set_defaults(require_config=True)

    s = sub.add_parser("sweep", help="retrain across train-split fractions")
    _add_common(s, "config", "seed", "out", "fractions", "workers")
    s.set_defaults(require_config=True)

    r = sub.add_parser("report", help="summarize result files in a directory")
    _add_common(r, "out")
    return parser


def _load_run_config(args) -> RunConfig:
    if getattr(args, "require_config", False) and not args.config:
        raise OptfetchError(f"{args.command} needs --config")
    config = RunConfig.from_yaml(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.meta = replace(config.meta, seed=args.seed)
        config.a2c = replace(config.a2c, seed=args.seed)
    if getattr(args, "baselines", None):
        config.baselines = parse_baselines(args.baselines)
    if getattr(args, "workers", None):
        config.workers = args.workers
    return config


def _checkpoint_path(config: RunConfig, out: Path) -> Path:
    return Path(config.checkpoint) if config.checkpoint else out / "checkpoint.bin"


def cmd_generate_domain(args) -> int:
    params = {}
    if args.config:
        with open(args.config) as f:
            raw = yaml.safe_load(f) or {}
        params = dict(raw.get("craftworld", raw))
    seed = args.seed if args.seed is not None else int(params.pop("seed", 0))
    params.pop("seed", None)
    if "schemas" in params and params["schemas"] is not None:
        params["schemas"] = tuple(tuple(s) for s in params["schemas"])
    graph, split = generate_craftworld_domain(CraftWorldParams(**params), seed)
    report = validate_graph(graph)
    for line in report.lines():
        print(line)
    if not report.ok:
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "domain.yaml"
    save_domain_config(graph, split, path)
    print(f"{len(graph.objects)} objects, {graph.option_count} options, "
          f"{len(graph.composite_variant_refs())} composite variants")
    print(f"train {len(split.train)} / test {len(split.test)} variants")
    print(f"wrote {path}")
    return 0


def cmd_meta_train(args) -> int:
    config = _load_run_config(args)
    graph, split = load_domain(config)
    env = SmdpEnv(graph, EpisodeConfig.for_graph(graph))
    model = build_model(env, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    every = max(1, config.meta.iterations // 20)

    def log(it, loss, skipped):
        if it % every == 0 or it == config.meta.iterations - 1:
            print(f"iter {it:6d}  loss {loss:.4f}  skipped {skipped}")

    report = meta_train(env, split, model, config.meta, config.oracle, log=log)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(model.index, model.qgn, ckpt, graph.fingerprint())
    (out / "meta_train.csv").write_text(
        "iteration,loss,skipped\n" + "\n".join(report.lines()) + "\n")
    recent = np.asarray(report.losses[-100:], dtype=float)
    tail = float(np.nanmean(recent)) if np.isfinite(recent).any() else float("nan")
    print(f"final mean loss (last 100 iters): {tail:.4f}")
    print(f"wrote {ckpt}")
    return 0


def _load_model(config: RunConfig, env: SmdpEnv, out: Path) -> RetrievalModel | None:
    if not any(b.kind == "oi-hrl" for b in config.baselines):
        return None
    path = _checkpoint_path(config, out)
    if not path.exists():
        raise OptfetchError(
            f"checkpoint {path} not found; run meta-train first or set "
            "'checkpoint' in the config")
    index, qgn = load_checkpoint(path, domain_hash=env.graph.fingerprint(),
                                 state_dim=env.state_dim,
                                 key_dim=config.key_dim)
    config.checkpoint = str(path)
    return RetrievalModel(index, qgn)


def cmd_evaluate(args) -> int:
    config = _load_run_config(args)
    graph, split = load_domain(config)
    env = SmdpEnv(graph, EpisodeConfig.for_graph(graph))
    out = Path(args.out)
    model = _load_model(config, env, out)

    if args.retrieval_only:
        from .harness import EvalDataset, _retrieval_pass
        rows, _ = _retrieval_pass(env, sorted(split.test), config.baselines,
                                  model, config.seed, config.p)
        dataset = EvalDataset(rows, [], [], [], {
            "config": config.to_dict(), "master_seed": config.seed,
            "domain_fingerprint": graph.fingerprint(),
            "checkpoint_sha256": None, "n_test_variants": len(split.test),
            "n_policy_variants": 0})
        paths = emit_results(dataset, out)
        if model is not None:
            buckets = completion_report(env, split.test, model, config)
            paths["completion"] = emit_completion_report(buckets, out)
        suff = np.mean([int(r["sufficient"]) for r in rows
                        if r["baseline"] == "oi-hrl"]) if model else float("nan")
        print(f"retrieval sufficient fraction (oi-hrl): {suff:.3f}")
        for name, p in paths.items():
            print(f"wrote {p}")
        return 0

    dataset = run_evaluation(env, split, model, config)
    paths = emit_results(dataset, out)
    final_it = max((r["iteration"] for r in dataset.reward_aggregates),
                   default=0)
    for row in dataset.reward_aggregates:
        if row["iteration"] == final_it:
            print(f"{row['baseline']:>10s}  reward {row['mean']:.3f} "
                  f"[{row['ci_lo']:.3f}, {row['ci_hi']:.3f}]")
    for name, p in paths.items():
        print(f"wrote {p}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_run_config(args)
    graph, split = load_domain(config)
    env = SmdpEnv(graph, EpisodeConfig.for_graph(graph))
    fractions = [float(x) for x in str(args.fractions).split(",") if x.strip()]
    rows = run_trainsize_sweep(env, split, config, fractions)
    path = emit_sweep(rows, args.out)
    for row in rows:
        print(f"fraction {row['fraction']:<5} rep {row['rep']}  "
              f"sufficient {row['sufficient_fraction']:.3f}  "
              f"extra {row['mean_extra']:.2f}")
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise OptfetchError(f"{out} is not a directory")
    seen = False
    retrieval = out / "retrieval.csv"
    if retrieval.exists():
        seen = True
        rows = read_csv_rows(retrieval)
        print("== retrieval ==")
        for label in sorted({r["baseline"] for r in rows}):
            grp = [r for r in rows if r["baseline"] == label]
            suff = np.mean([int(r["sufficient"]) for r in grp])
            extra = np.mean([int(r["extra"]) for r in grp])
            missing = np.mean([int(r["missing"]) for r in grp])
            print(f"{label:>10s}  sufficient {suff:.3f}  "
                  f"extra {extra:.2f}  missing {missing:.2f}  n={len(grp)}")
    agg = out / "aggregate.csv"
    if agg.exists():
        seen = True
        rows = read_csv_rows(agg)
        if rows:
            final_it = max(int(r["iteration"]) for r in rows)
            print("== final reward ==")
            for r in rows:
                if int(r["iteration"]) == final_it:
                    print(f"{r['baseline']:>10s}  {float(r['mean']):.3f}  "
                          f"[{float(r['ci_lo']):.3f}, {float(r['ci_hi']):.3f}]"
                          f"  at {final_it} env steps")
    sweep = out / "sweep.csv"
    if sweep.exists():
        seen = True
        print("== train-size sweep ==")
        for r in read_csv_rows(sweep):
            print(f"fraction {r['fraction']:<5} rep {r['rep']}  "
                  f"sufficient {float(r['sufficient_fraction']):.3f}  "
                  f"extra {float(r['mean_extra']):.2f}")
    comp = out / "completion_by_length.csv"
    if comp.exists():
        seen = True
        print("== completion by recipe length ==")
        for r in read_csv_rows(comp):
            print(f"length {r['recipe_length']:>5s}  n={r['n_variants']:>3s}  "
                  f"sufficient {float(r['sufficient_fraction']):.3f}  "
                  f"completion {float(r['completion_rate']):.3f}")
    if not seen:
        print(f"no result files in {out}")
        return 1
    return 0


COMMANDS = {
    "generate-domain": cmd_generate_domain,
    "meta-train": cmd_meta_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except OptfetchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
