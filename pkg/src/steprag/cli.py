"""Command-line entry point: ``steprag <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from steprag.config import load_config
from steprag.corpus import build_index, load_index, read_corpus, save_index, write_corpus
from steprag.env import (
    ReplayBackend, generate_questions, generate_world, load_questions, load_world, read_traces,
    save_questions, save_world, world_passages,
)
from steprag.evaluation import DEFAULT_ITERATIONS, bootstrap_compare, pareto_report, write_pareto
from steprag.harness import (
    DEFAULT_SEEDS, Pipeline, SyntheticEpisodeEnv, parse_strategy, paired_scores, read_report,
    run_benchmark, synthetic_factory, write_histogram, write_report,
)
from steprag.policy import PolicyModel, load_policy, save_policy, train_reinforce

log = logging.getLogger("steprag")


def _world_and_index(world_path: str):
    world = load_world(world_path)
    return world, build_index(world_passages(world))


def cmd_index_build(args) -> int:
    index = build_index(read_corpus(args.corpus))
    save_index(index, args.out)
    print(f"indexed {index.doc_count} passages -> {args.out}")
    return 0


def cmd_world_gen(args) -> int:
    world, passages = generate_world(args.seed, args.entities, args.relations)
    save_world(world, args.out)
    if args.corpus:
        write_corpus(passages, args.corpus)
    print(f"world: {len(world.entities)} entities, {len(world.facts)} facts, {len(passages)} passages -> {args.out}")
    return 0


def cmd_questions_gen(args) -> int:
    world = load_world(args.world)
    hops = args.hops if args.hops == "mixed" else int(args.hops)
    qs = generate_questions(world, hops, args.n, args.gap_rate, seed=args.seed, n_gaps=args.n_gaps)
    save_questions(qs, args.out, str(Path(args.world)))
    print(f"{len(qs)} questions -> {args.out}")
    return 0


def cmd_train_policy(args) -> int:
    cfg = load_config(args.config)
    world, passages = generate_world(cfg["env.seed"], cfg["env.entities"], cfg["env.relations"])
    hops = cfg["env.hops"] if cfg["env.hops"] == "mixed" else int(cfg["env.hops"])
    qs = generate_questions(world, hops, cfg["env.questions"], cfg["env.gap_rate"], seed=cfg["env.seed"],
                            n_gaps=1 if cfg["env.single_gap"] else None)
    pipeline = Pipeline(build_index(passages), cfg.pipeline())
    env = SyntheticEpisodeEnv(world, qs, pipeline)
    train = cfg.train()
    init = PolicyModel.init(env.input_dim, cfg["policy.hidden"], seed=train.seed, tau=cfg["policy.tau"],
                            learn_tau=cfg["policy.learn_tau"])

    def progress(step, model, batch, rewards):
        if step % max(1, train.steps // 20) == 0 or step == train.steps - 1:
            calls = np.mean([r.n_ret for r in batch])
            log.info("step %d  lambda1 %.3f  mean reward %.4f  mean calls %.2f",
                     step, train.lambda1_at(step), float(np.mean(rewards)), calls)

    model = train_reinforce(env, train, model=init, callback=progress)
    save_policy(model, args.out)
    print(f"policy -> {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    policy = load_policy(args.policy) if args.policy else None
    strategy = parse_strategy(args.strategy, policy)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = list(DEFAULT_SEEDS)
    if args.traces:
        if not args.index:
            raise SystemExit("run: --traces needs --index")
        records = read_traces(args.traces)
        index = load_index(args.index)
        by_id = {r.id: r for r in records}
        questions = [_TraceQuestion(r) for r in records]

        def factory(q, seed):
            return ReplayBackend(by_id[q.id])
    else:
        if not args.questions:
            raise SystemExit("run: give --questions or --traces")
        questions, world_path = load_questions(args.questions)
        world, index = _world_and_index(args.world or world_path)
        factory = synthetic_factory(world)
    pipeline = Pipeline(index, cfg.pipeline())
    report, _ = run_benchmark(strategy, questions, factory, pipeline, seeds, workers=args.workers)
    write_report(report, args.report)
    if args.histogram:
        write_histogram(report, args.histogram)
    fpc = "n/a" if report.f1_per_call is None else f"{report.f1_per_call:.4f}"
    print(f"{report.strategy}: EM {report.em:.4f}  F1 {report.f1:.4f}  calls {report.avg_calls:.3f}  "
          f"F1/call {fpc}  latency {report.avg_latency_ms:.1f} ms -> {args.report}")
    return 0


class _TraceQuestion:
    def __init__(self, rec):
        self.id, self.text, self.gold_answer, self.hops = rec.id, rec.question, rec.gold_answer, rec.hops


def cmd_eval_compare(args) -> int:
    a, b = read_report(args.a), read_report(args.b)
    xs, ys = paired_scores(a, b, args.metric)
    res = bootstrap_compare(xs, ys, args.iters, args.alpha, args.comparisons, seed=args.seed)
    print(f"{a['strategy']} - {b['strategy']} ({args.metric}, n={len(xs)}): delta {res.delta:+.4f}  "
          f"CI [{res.ci_low:+.4f}, {res.ci_high:+.4f}] at level {1 - res.level:.4f}  p {res.p_value:.4f}")
    return 0


def cmd_bench_pareto(args) -> int:
    points = []
    for path in args.reports:
        doc = read_report(path)
        points.append((doc["strategy"], doc["f1"], doc["avg_calls"]))
    rows = pareto_report(points)
    write_pareto(rows, args.out)
    for r in rows:
        print(f"{r.name:16s} F1 {r.f1:.4f}  calls {r.avg_calls:.3f}  {'frontier' if r.frontier else 'dominated'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="steprag", description="Step-level adaptive retrieval engine.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    index = sub.add_parser("index").add_subparsers(dest="action", required=True)
    p = index.add_parser("build", help="build a BM25 index from a passage jsonl file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index_build)

    world = sub.add_parser("world").add_subparsers(dest="action", required=True)
    p = world.add_parser("gen", help="generate a synthetic fact world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--relations", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="also write the world's passages as jsonl")
    p.set_defaults(func=cmd_world_gen)

    questions = sub.add_parser("questions").add_subparsers(dest="action", required=True)
    p = questions.add_parser("gen", help="generate multi-hop questions over a world")
    p.add_argument("--world", required=True)
    p.add_argument("--hops", choices=["2", "3", "4", "mixed"], default="mixed")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--gap-rate", type=float, default=0.5)
    p.add_argument("--n-gaps", type=int, help="withhold exactly this many hops per question")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="questions.jsonl")
    p.set_defaults(func=cmd_questions_gen)

    p = sub.add_parser("train-policy", help="train the retrieval policy with REINFORCE")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("run", help="benchmark one strategy")
    p.add_argument("--strategy", required=True, help="none | single | fixed[:m[:sentence]] | naive | adaptive")
    p.add_argument("--policy", help="trained policy file; adaptive without it uses the RSUS threshold")
    p.add_argument("--questions")
    p.add_argument("--world", help="override the world file named in the question set")
    p.add_argument("--traces", help="replay recorded chains instead of the synthetic reasoner")
    p.add_argument("--index", help="index file for --traces runs")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds (default 42,123,456)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", required=True)
    p.add_argument("--histogram", help="write the retrieval-position histogram as TSV")
    p.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval").add_subparsers(dest="action", required=True)
    p = ev.add_parser("compare", help="paired bootstrap between two reports")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--iters", type=int, default=DEFAULT_ITERATIONS)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--comparisons", type=int, default=1)
    p.add_argument("--metric", choices=["f1", "em"], default="f1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_compare)

    bench = sub.add_parser("bench").add_subparsers(dest="action", required=True)
    p = bench.add_parser("pareto", help="frontier table over several reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_pareto)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"steprag: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
