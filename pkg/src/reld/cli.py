"""Command-line entry point: ``reld <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric
failure. Every error message names the stage that failed.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import io
from .errors import NumericError, ReldError
from .evaluation import (
    EXACT_LIMIT,
    ablation_suite,
    ablation_table,
    evaluate,
    exact_solve,
    extension_probe,
    oracle_costs,
)
from .generate import sample_instances
from .model import PRESETS, preset
from .rollout import solve
from .training import FREEZE, fine_tune, resume, train
from .vrp import Instance, tour_cost

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "REld_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


class _Run:
    """Per-invocation state: current stage name and output gating."""

    def __init__(self, args):
        self.args = args
        self.stage = "startup"

    @contextlib.contextmanager
    def step(self, name: str):
        self.stage = name
        yield

    def say(self, *parts):
        if not self.args.quiet:
            print(*parts, flush=True)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _config(args) -> io.ExperimentConfig:
    cfg = io.read_config(args.config) if args.config else io.ExperimentConfig()
    if args.seed is not None:
        gen = replace(cfg.gen, seed=args.seed)
        cfg = io.ExperimentConfig(cfg.model, replace(cfg.train, seed=args.seed, gen=gen))
    return cfg


def _load_instances(path: str) -> list[Instance]:
    p = Path(path)
    if p.suffix.lower() in (".vrp", ".txt"):
        return [io.read_cvrplib(p)]
    return io.read_instances(p)


def _references(args, instances, threads) -> list[float] | None:
    if args.bks:
        table = io.read_bks(args.bks)
        missing = [i.name for i in instances if i.name not in table]
        if missing:
            raise ValueError(f"no best-known cost for {missing[:3]}")
        return [table[i.name] for i in instances]
    if args.oracle:
        big = max(i.n for i in instances)
        if big > EXACT_LIMIT:
            raise ValueError(f"--oracle needs N <= {EXACT_LIMIT}, dataset has N={big}")
        return oracle_costs(instances, threads)
    return None


# -- commands ---------------------------------------------------------------------


def cmd_gen(run: _Run) -> int:
    a = run.args
    with run.step("config"):
        cfg = _config(a)
        gen = cfg.gen if a.size is None else replace(cfg.gen, size_range=(a.size, a.size))
    with run.step("generation"):
        insts = sample_instances(gen, a.count)
    with run.step("writing instances"):
        io.write_instances(a.out, insts)
    run.say(f"wrote {len(insts)} instances to {a.out}")
    return EXIT_OK


def cmd_train(run: _Run) -> int:
    a = run.args
    with run.step("config"):
        cfg = _config(a)
    stream = False if a.quiet else None
    with run.step("training"):
        if a.checkpoint:
            report = resume(a.checkpoint, cfg.train, out_dir=a.out, stream=stream)
        else:
            report = train(cfg.train, cfg.model, out_dir=a.out, stream=stream)
    run.say(f"checkpoint {report.checkpoint}")
    return EXIT_OK


def cmd_fine_tune(run: _Run) -> int:
    a = run.args
    with run.step("config"):
        cfg = _config(a)
    with run.step("fine-tuning"):
        report = fine_tune(a.checkpoint, cfg.train, a.freeze, out_dir=a.out, stream=False if a.quiet else None)
    run.say(f"checkpoint {report.checkpoint}")
    return EXIT_OK


def cmd_solve(run: _Run) -> int:
    a = run.args
    with run.step("loading checkpoint"):
        ck = io.load_checkpoint(a.checkpoint)
    with run.step("reading instance"):
        insts = _load_instances(a.instance)
    is_vrp = Path(a.instance).suffix.lower() == ".vrp"
    rounding = is_vrp if a.round_distances is None else a.round_distances
    blocks = []
    with run.step("solving"):
        for inst in insts:
            scaled, _ = io.scale_instance(inst)
            traj = solve(scaled, ck.params, ck.cfg, k=a.k, augment=a.augment)
            cost = tour_cost(inst, traj.nodes, rounding)
            k = min(100 if a.k is None else a.k, inst.n)
            head = f"# {inst.name or 'instance'} N={inst.n} K={k}"
            blocks.append(head + "\n" + io.format_solution(traj, cost))
    text = "\n".join(blocks) + "\n"
    if a.out:
        with run.step("writing solution"):
            io.atomic_write(a.out, text)
    run.say(text.rstrip())
    return EXIT_OK


def cmd_eval(run: _Run) -> int:
    a = run.args
    threads = _threads(a)
    with run.step("loading checkpoint"):
        ck = io.load_checkpoint(a.checkpoint)
    with run.step("reading dataset"):
        insts = _load_instances(a.data)
        if a.limit:
            insts = insts[: a.limit]
    with run.step("reference costs"):
        refs = _references(a, insts, threads)
    rounding = Path(a.data).suffix.lower() == ".vrp" if a.round_distances is None else a.round_distances
    with run.step("evaluation"):
        report = evaluate(ck.params, ck.cfg, insts, k=a.k, augment=a.augment, references=refs,
                          round_distances=rounding, threads=threads)
    if a.out:
        with run.step("writing report"):
            io.write_report(a.out, report)
    run.say(report.table())
    return EXIT_OK


def cmd_probe_extension(run: _Run) -> int:
    a = run.args
    threads = _threads(a)
    with run.step("loading checkpoint"):
        ck = io.load_checkpoint(a.checkpoint)
    with run.step("reading dataset"):
        insts = _load_instances(a.data)
        if a.limit:
            insts = insts[: a.limit]
    with run.step("reference costs"):
        refs = _references(a, insts, threads)
    # extra customers are drawn in the unit square, so work in scaled
    # coordinates; gaps do not depend on the scale
    scaled = [io.scale_instance(i) for i in insts]
    insts = [s for s, _ in scaled]
    if refs is not None:
        refs = [r / f for r, (_, f) in zip(refs, scaled)]
    with run.step("extension probe"):
        reports = extension_probe(ck.params, ck.cfg, insts, a.deltas, seed=a.seed or 0, k=a.k, references=refs)
    lines = [f"delta={d:g} {r.summary()}" for d, r in reports.items()]
    if a.out:
        with run.step("writing report"):
            out = Path(a.out)
            out.mkdir(parents=True, exist_ok=True)
            for d, r in reports.items():
                io.write_report(out / f"delta_{d:g}.jsonl", r)
    run.say("\n".join(lines))
    return EXIT_OK


def cmd_ablate(run: _Run) -> int:
    a = run.args
    threads = _threads(a)
    with run.step("config"):
        cfg = _config(a)
        variants = {name: preset(name) for name in a.variants}
    with run.step("evaluation sets"):
        eval_sets = {}
        for n in a.eval_sizes:
            insts = sample_instances(replace(cfg.gen, size_range=(n, n), seed=cfg.gen.seed + 7919), a.eval_count)
            refs = oracle_costs(insts, threads) if n <= EXACT_LIMIT else None
            eval_sets[n] = (insts, refs)
    with run.step("ablation"):
        rows = ablation_suite(variants, cfg.train, eval_sets, augment=a.augment,
                              stream=False if a.quiet else None)
    table = ablation_table(rows)
    if a.out:
        with run.step("writing table"):
            io.atomic_write(a.out, table + "\n")
    run.say(table)
    return EXIT_OK


def cmd_grad_check(run: _Run) -> int:
    from .checks import GRAD_TOL, policy_grad_check

    a = run.args
    worst = 0.0
    with run.step("gradient check"):
        for idt in (False, True):
            for ff in (False, True):
                for dist in (False, True):
                    rep = policy_grad_check(
                        d_h=a.dh, n=a.n, heads=a.heads, layers=a.layers, d_ff=2 * a.dh,
                        seed=a.seed or 0, max_entries=a.max_entries,
                        use_idt=idt, use_ff_query=ff, use_dist_heuristic=dist,
                    )
                    worst = max(worst, rep.max_rel_error)
                    run.say(f"idt={int(idt)} ff={int(ff)} dist={int(dist)} {rep}")
    run.say(f"max_rel_error={worst:.3e}")
    if worst >= GRAD_TOL:
        print(f"reld grad-check: gradient check: max relative error {worst:.3e} >= {GRAD_TOL:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_oracle(run: _Run) -> int:
    a = run.args
    threads = _threads(a)
    with run.step("reading dataset"):
        insts = _load_instances(a.data)
    with run.step("exact solve"):
        from .evaluation import _map

        trajs = _map(exact_solve, insts, threads)
    recs = [{"instance": i.name or f"inst{j}", "cost": t.cost, "nodes": t.nodes}
            for j, (i, t) in enumerate(zip(insts, trajs))]
    if a.out:
        with run.step("writing references"):
            io.atomic_write(a.out, "".join(json.dumps(r) + "\n" for r in recs))
    for r in recs:
        run.say(f"{r['instance']} {r['cost']:.6f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML experiment config")
    shared.add_argument("--seed", type=int, help="seed for every random choice")
    shared.add_argument("--out", help="output path")
    shared.add_argument("--checkpoint", help="model checkpoint")
    shared.add_argument("--quiet", action="store_true", help="suppress non-error output")
    shared.add_argument("--threads", type=_positive, help=f"worker threads (default: ${THREADS_ENV} or CPU count)")

    p = _Parser(prog="reld", description="Light-decoder neural CVRP solver")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[shared], help=help_, description=help_)
        sp.set_defaults(fn=fn, required=())
        return sp

    sp = add("gen", cmd_gen, "sample an instance set")
    sp.add_argument("--count", type=_positive, required=True)
    sp.add_argument("--size", type=_positive, help="fix N instead of the configured range")
    sp.set_defaults(required=("out",))

    sp = add("train", cmd_train, "train a model (resume with --checkpoint)")
    sp.set_defaults(required=("out",))

    sp = add("fine-tune", cmd_fine_tune, "continue training a checkpoint on the configured data")
    sp.add_argument("--freeze", choices=FREEZE, default="none")
    sp.set_defaults(required=("out", "checkpoint"))

    sp = add("solve", cmd_solve, "solve a CVRPLib file or instance set")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--k", type=_positive, help="trajectories (capped at min(100, N))")
    sp.add_argument("--augment", action="store_true", help="best of the 8 symmetric copies")
    sp.add_argument("--round-distances", action=argparse.BooleanOptionalAction, default=None,
                    help="integer-rounded distances (default: on for .vrp files)")
    sp.set_defaults(required=("checkpoint",))

    def data_args(sp):
        sp.add_argument("--data", required=True, help="instance set (.jsonl) or .vrp file")
        sp.add_argument("--k", type=_positive)
        sp.add_argument("--limit", type=_positive, help="use only the first instances")
        ref = sp.add_mutually_exclusive_group()
        ref.add_argument("--oracle", action="store_true", help="exact references (N <= 12)")
        ref.add_argument("--bks", help="best-known cost table")

    sp = add("eval", cmd_eval, "evaluate a checkpoint on an instance set")
    data_args(sp)
    sp.add_argument("--augment", action="store_true")
    sp.add_argument("--round-distances", action=argparse.BooleanOptionalAction, default=None,
                    help="integer-rounded distances (default: on for .vrp files)")
    sp.set_defaults(required=("checkpoint",))

    sp = add("probe-extension", cmd_probe_extension, "solve with embeddings from an extended graph")
    data_args(sp)
    sp.add_argument("--deltas", type=_floats, default=[0.0, 0.5, 1.0])
    sp.set_defaults(required=("checkpoint",))

    sp = add("ablate", cmd_ablate, "train and compare decoder variants")
    sp.add_argument("--variants", type=lambda s: s.split(","), default=["pomo", "reld"],
                    help=f"comma-separated presets from: {', '.join(PRESETS)}")
    sp.add_argument("--eval-sizes", type=_ints, default=[10])
    sp.add_argument("--eval-count", type=_positive, default=50)
    sp.add_argument("--augment", action="store_true")

    sp = add("grad-check", cmd_grad_check, "finite-difference check of the policy gradient")
    sp.add_argument("--dh", type=_positive, default=16)
    sp.add_argument("--n", type=_positive, default=8)
    sp.add_argument("--heads", type=_positive, default=4)
    sp.add_argument("--layers", type=_positive, default=2)
    sp.add_argument("--max-entries", type=_positive, default=6, help="entries sampled per tensor")

    sp = add("oracle", cmd_oracle, f"exact solutions for N <= {EXACT_LIMIT}")
    sp.add_argument("--data", required=True)
    return p


def _validate(parser, args):
    if args.command is None:
        parser.error("a command is required")
    for name in args.required:
        if getattr(args, name) is None:
            raise UsageError(f"reld {args.command}: --{name} is required")
    if args.command == "ablate":
        unknown = [v for v in args.variants if v not in PRESETS]
        if unknown:
            raise UsageError(f"reld ablate: unknown variant(s) {unknown}")
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"reld {args.command}: config file {args.config} not found")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(parser, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE

    run = _Run(args)
    try:
        return args.fn(run)
    except UsageError as exc:
        print(f"reld {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, ArithmeticError) as exc:
        print(f"reld {args.command}: {run.stage}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ReldError, ValueError, KeyError, OSError) as exc:
        print(f"reld {args.command}: {run.stage}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
