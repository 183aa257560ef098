"""Command-line front end for the full workflow.

Exit codes: 0 on success, 1 for usage mistakes, 2 for broken or missing
data (files, containers, experiment configs), 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from typing import Optional

import numpy as np

from . import bench as B
from . import metrics as X
from . import model as M
from . import oracle as O
from . import router as R
from . import training as TR
from .bundle import Bundle, load_bundle, save_bundle
from .config import ExperimentConfig, load_experiment, write_default_config
from .data import generate_dataset
from .errors import BundleError, NumericalError, SkipRouteError
from .lora import adapted_project, init_adapters, merge
from .tokenizer import EOS, detokenize, frame_prompt


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage failures exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _skip_list(text: str) -> frozenset:
    try:
        return frozenset(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}")


def _load_model(path: str):
    bundle = load_bundle(path)
    if bundle.weights is None:
        raise BundleError(f"{path} holds no model section")
    return bundle.weights.config, bundle.weights


def _load_routers(path: str):
    bundle = load_bundle(path)
    if bundle.routers is None:
        raise BundleError(f"{path} holds no router section")
    return bundle.routers


def _load_adapters(path: str):
    bundle = load_bundle(path)
    if bundle.adapters is None:
        raise BundleError(f"{path} holds no adapter section")
    return bundle.adapters


def _max_new(exp: ExperimentConfig, override: Optional[int]) -> int:
    return override if override is not None else exp.task.max_len + 2


def _decode_text(tokens) -> str:
    return detokenize(tokens).decode("utf-8", errors="replace")


# ----------------------------------------------------------- subcommands


def cmd_init(args) -> int:
    import os
    if args.force or not os.path.exists(args.config):
        write_default_config(args.config)
        print(f"wrote {args.config}")
    exp = load_experiment(args.config)
    if args.model:
        seed = exp.train.seed if args.seed is None else args.seed
        weights = M.init_model(exp.model, np.random.default_rng(seed))
        save_bundle(args.model, weights=weights)
        print(f"initialized {exp.model.n_layers}-layer model -> {args.model}")
    return 0


def cmd_pretrain(args) -> int:
    exp = load_experiment(args.config)
    config, weights = _load_model(args.model)
    train, val, _ = generate_dataset(exp.task)
    accuracy_fn = None
    if args.target_accuracy is not None:
        quality = O.dataset_exact_match(config, weights, val,
                                        _max_new(exp, args.max_new))
        def accuracy_fn():
            return quality(frozenset())
    result = TR.train_model(config, weights, train, val, exp.train,
                            accuracy_fn=accuracy_fn,
                            target_accuracy=args.target_accuracy,
                            log_path=args.log)
    save_bundle(args.out, weights=weights)
    print(f"pretrained for {result.steps} steps, "
          f"best val ce {result.best_val_ce:.4f} -> {args.out}")
    return 0


def cmd_train_router(args) -> int:
    exp = load_experiment(args.config)
    config, weights = _load_model(args.model)
    tc = exp.train if args.alpha is None else replace(exp.train, alpha=args.alpha)
    routers = R.init_routers(config)
    train, val, _ = generate_dataset(exp.task)
    result = TR.train_routers(config, weights, routers, train, val, tc,
                              log_path=args.log)
    save_bundle(args.out, routers=routers)
    rho = result.rows[-1].mean_rho if result.rows else ()
    print(f"trained routers for {result.steps} steps, "
          f"mean rho {np.mean(rho):.3f} -> {args.out}")
    return 0


def cmd_train_lora(args) -> int:
    exp = load_experiment(args.config)
    config, weights = _load_model(args.model)
    routers = _load_routers(args.routers)
    adapters = init_adapters(
        weights, rank=exp.lora.rank, lora_alpha=exp.lora.lora_alpha,
        dropout_rate=exp.lora.dropout,
        rng=np.random.default_rng(exp.train.seed))
    train, val, _ = generate_dataset(exp.task)
    result = TR.train_lora(config, weights, routers, adapters, train, val,
                           exp.train, log_path=args.log)
    save_bundle(args.out, adapters=adapters)
    print(f"trained adapters for {result.steps} steps, "
          f"best val ce {result.best_val_ce:.4f} -> {args.out}")
    return 0


def cmd_merge(args) -> int:
    _, weights = _load_model(args.model)
    adapters = _load_adapters(args.adapters)
    merged = merge(weights, adapters)
    save_bundle(args.out, weights=merged)
    print(f"merged {len(adapters.adapters)} adapters -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    exp = load_experiment(args.config)
    config, weights = _load_model(args.model)
    project = None
    if args.adapters:
        project = adapted_project(_load_adapters(args.adapters))
    prompt = frame_prompt(args.prompt.encode("utf-8"))
    rng = np.random.default_rng(exp.task.seed)
    budget = _max_new(exp, args.max_new)
    if args.routers:
        routers = _load_routers(args.routers)
        result, decision = R.generate_with_routers(
            config, weights, routers, prompt, budget, sampler=exp.sampler,
            rng=rng, stop_at=EOS, project=project)
        print(_decode_text(result.tokens))
        skipped = ",".join(str(i) for i in sorted(decision.skip_set))
        print(f"skipped: {skipped or '-'} "
              f"({len(decision.skip_set)}/{config.n_layers} layers)")
    else:
        result = M.generate(config, weights, prompt, budget,
                            sampler=exp.sampler, skip_set=args.skip,
                            rng=rng, stop_at=EOS, project=project,
                            prefill_skip=() if args.full_prefill else None)
        print(_decode_text(result.tokens))
    return 0


def cmd_bench(args) -> int:
    exp = load_experiment(args.config)
    config, weights = _load_model(args.model)
    _, _, test = generate_dataset(exp.task)
    prompt = frame_prompt(args.prompt.encode("utf-8") if args.prompt
                          else test[0][0])
    budget = max(2, _max_new(exp, args.max_new))

    report = B.LatencyReport()
    report.add("full", B.measure_tpot(
        lambda: M.generate(config, weights, prompt, budget),
        n_runs=args.runs, warmup=args.warmup))
    if args.skip:
        report.add("skip", B.measure_tpot(
            lambda: M.generate(config, weights, prompt, budget,
                               skip_set=args.skip, prefill_skip=()),
            n_runs=args.runs, warmup=args.warmup))
    if args.routers:
        routers = _load_routers(args.routers)
        report.add("routed", B.measure_tpot(
            lambda: R.generate_with_routers(config, weights, routers,
                                            prompt, budget)[0],
            n_runs=args.runs, warmup=args.warmup))
    for name, r in report.entries.items():
        rel = report.relative(name, "full")
        print(f"{name}: mean {r.mean * 1e3:.3f} ms/token, "
              f"median {r.median * 1e3:.3f} ms/token, x{rel:.3f} vs full")
    if args.out:
        B.write_latency_csv(args.out, report, baseline="full")
    return 0


def cmd_oracle(args) -> int:
    exp = load_experiment(args.config)
    config, weights = _load_model(args.model)
    _, _, test = generate_dataset(exp.task)
    pairs = test[:args.max_prompts]
    budget = _max_new(exp, args.max_new)
    if args.quality == "golden":
        quality = O.golden_exact_match(
            config, weights, [frame_prompt(p) for p, _ in pairs], budget)
    elif args.quality == "dataset":
        quality = O.dataset_exact_match(config, weights, pairs, budget)
    else:
        quality = O.negative_perplexity(config, weights, pairs,
                                        config.max_seq)
    result = O.brute_force_oracle(config.n_layers, quality, args.epsilon)
    w = result.winner
    print(f"winner: mask {w.mask_string(config.n_layers)}, "
          f"{w.layers_used}/{config.n_layers} layers, quality {w.quality:.4f} "
          f"(full {result.full_quality:.4f}, threshold {result.threshold:.4f})")
    if args.out:
        O.write_oracle_csv(args.out, result)
    return 0


def cmd_stats(args) -> int:
    if args.from_raw:
        decisions = X.read_decision_log(args.from_raw)
    else:
        exp = load_experiment(args.config)
        config, weights = _load_model(args.model)
        routers = _load_routers(args.routers)
        _, _, test = generate_dataset(exp.task)
        decisions = []
        for prompt, _ in test[:args.max_prompts]:
            _, _, decision = R.prefill(config, weights, routers,
                                       np.asarray(frame_prompt(prompt)))
            decisions.append(decision)
        if args.dump:
            X.write_decision_log(args.dump, decisions)
    stats = X.collect_skip_stats(decisions)
    for i, f in enumerate(stats.layer_skip_fraction):
        print(f"layer {i}: skipped {f:.4f}")
    print(f"average: {stats.average_skip_fraction:.4f} "
          f"over {stats.n_prompts} prompts")
    return 0


def cmd_compare(args) -> int:
    exp = load_experiment(args.config)
    config, weights = _load_model(args.model)
    routers = _load_routers(args.routers)
    project = None
    if args.adapters:
        project = adapted_project(_load_adapters(args.adapters))
    _, _, test = generate_dataset(exp.task)
    pairs = test[:args.max_prompts]
    budget = max(2, _max_new(exp, args.max_new))
    m = config.n_layers

    def run_routed(prompt_ids):
        return R.generate_with_routers(config, weights, routers, prompt_ids,
                                       budget, stop_at=EOS, project=project)

    routed_outputs = []
    skip_counts = []
    for prompt, _ in pairs:
        result, decision = run_routed(frame_prompt(prompt))
        routed_outputs.append(result.tokens)
        skip_counts.append(len(decision.skip_set))

    if args.retained is not None:
        retained = args.retained
    else:
        retained = int(np.clip(m - round(float(np.mean(skip_counts))), 2, m))
    unified_skip = O.unified_skip_layers(m, retained)

    def full_tokens(prompt_ids):
        return M.generate(config, weights, prompt_ids, budget,
                          stop_at=EOS).tokens

    def unified_tokens(prompt_ids):
        return M.generate(config, weights, prompt_ids, budget,
                          skip_set=unified_skip, prefill_skip=(),
                          stop_at=EOS).tokens

    methods = {
        "full": [full_tokens(frame_prompt(p)) for p, _ in pairs],
        "routed": routed_outputs,
        "unified": [unified_tokens(frame_prompt(p)) for p, _ in pairs],
    }

    bench_prompt = frame_prompt(pairs[0][0])
    report = B.LatencyReport()
    report.add("full", B.measure_tpot(
        lambda: M.generate(config, weights, bench_prompt, budget),
        n_runs=args.runs, warmup=args.warmup))
    report.add("routed", B.measure_tpot(
        lambda: run_routed(bench_prompt)[0],
        n_runs=args.runs, warmup=args.warmup))
    report.add("unified", B.measure_tpot(
        lambda: M.generate(config, weights, bench_prompt, budget,
                           skip_set=unified_skip, prefill_skip=()),
        n_runs=args.runs, warmup=args.warmup))

    rows = []
    for name, outputs in methods.items():
        hits = sum(detokenize(out) == resp
                   for out, (_, resp) in zip(outputs, pairs))
        bleu = float(np.mean([
            X.bleu_n(list(detokenize(out)), list(resp), 1)
            for out, (_, resp) in zip(outputs, pairs)]))
        r = report.entries[name]
        rel = report.relative(name, "full")
        rows.append((name, hits / len(pairs), bleu, r.mean, r.median, rel))
        print(f"{name}: accuracy {hits / len(pairs):.3f}, bleu1 {bleu:.3f}, "
              f"tpot x{rel:.3f} vs full")
    print(f"unified baseline kept {retained}/{m} layers "
          f"(skips {sorted(unified_skip)})")

    if args.out:
        import csv as _csv
        with open(args.out, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["method", "accuracy", "bleu1", "mean_tpot",
                        "median_tpot", "relative_tpot"])
            w.writerows(rows)
    return 0


# -------------------------------------------------------------- wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="skiproute",
                     description="Input-adaptive transformer layer skipping")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", required=True, help="experiment INI file")
        return p

    p = add("init", cmd_init, "write a default experiment file / fresh model")
    p.add_argument("--model", help="also initialize weights to this bundle")
    p.add_argument("--seed", type=int, help="override the init seed")
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing experiment file")

    p = add("pretrain", cmd_pretrain, "train the base model on the task")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV training log")
    p.add_argument("--target-accuracy", type=float,
                   help="stop once validation exact-match reaches this")
    p.add_argument("--max-new", type=int)

    p = add("train-router", cmd_train_router, "phase 1: fit the skip routers")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--alpha", type=float, help="override the skip pressure")

    p = add("train-lora", cmd_train_lora, "phase 2: fit low-rank compensation")
    p.add_argument("--model", required=True)
    p.add_argument("--routers", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = add("merge", cmd_merge, "fold adapters into dense weights")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--out", required=True)

    p = add("infer", cmd_infer, "generate from a prompt")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--routers", help="route layer skipping per prompt")
    p.add_argument("--adapters", help="apply low-rank adapters")
    p.add_argument("--skip", type=_skip_list, default=frozenset(),
                   help="fixed skip set, e.g. 3,8")
    p.add_argument("--full-prefill", action="store_true",
                   help="prefill every layer, skip during decode only")
    p.add_argument("--max-new", type=int)

    p = add("bench", cmd_bench, "measure decode time per token")
    p.add_argument("--model", required=True)
    p.add_argument("--routers")
    p.add_argument("--skip", type=_skip_list, default=frozenset())
    p.add_argument("--prompt")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--max-new", type=int)
    p.add_argument("--out", help="CSV latency report")

    p = add("oracle", cmd_oracle, "exhaustive layer-subsequence search")
    p.add_argument("--model", required=True)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--quality", choices=("golden", "dataset", "perplexity"),
                   default="golden")
    p.add_argument("--max-prompts", type=int, default=8)
    p.add_argument("--max-new", type=int)
    p.add_argument("--out", help="CSV with the Pareto front and winner")

    p = add("stats", cmd_stats, "aggregate per-prompt skip decisions")
    p.add_argument("--model")
    p.add_argument("--routers")
    p.add_argument("--from-raw", help="re-aggregate a raw decision dump")
    p.add_argument("--dump", help="write the raw per-prompt decisions")
    p.add_argument("--max-prompts", type=int, default=64)

    p = add("compare", cmd_compare, "routed vs evenly spaced skipping")
    p.add_argument("--model", required=True)
    p.add_argument("--routers", required=True)
    p.add_argument("--adapters")
    p.add_argument("--retained", type=int,
                   help="layers the spaced baseline keeps (default: match "
                        "the routed budget)")
    p.add_argument("--max-prompts", type=int, default=16)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--max-new", type=int)
    p.add_argument("--out", help="CSV with quality and latency per method")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "stats" and not args.from_raw \
            and not (args.model and args.routers):
        parser.error("stats needs either --from-raw or --model and --routers")
    try:
        return args.fn(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (SkipRouteError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())
