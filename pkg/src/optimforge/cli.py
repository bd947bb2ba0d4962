"""Command-line entry point: ``optimforge <verb> [flags]``.

Exit status is 0 on success, 1 for user errors (bad flags, unreadable or
invalid programs, unknown tasks) and 2 for anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import analysis, evolution, optimizers, program, simplify, tasks
from .values import flat

THREADS_ENV = "OPTIMFORGE_THREADS"


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_program(path) -> program.Program:
    p = Path(path)
    if not p.exists():
        # Fall back to a shipped listing name such as "lion".
        try:
            return program.load_asset(p.stem if p.suffix == ".prog" else str(path))
        except (FileNotFoundError, OSError):
            raise UserError(f"no such program file: {path}") from None
    text = p.read_text("utf-8")
    if p.suffix == ".json":
        return program.from_json(text)
    return program.parse(text)


def _load_task(name):
    try:
        return tasks.load_task(name)
    except KeyError:
        raise UserError(f"unknown task {name!r}; shipped tasks: {', '.join(tasks.task_names())}") from None


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        if not env.isdigit() or int(env) < 1:
            raise UserError(f"{THREADS_ENV} must be a positive integer")
        return int(env)
    return 1


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", "utf-8")


def _signature(task):
    return analysis.signature_for(task.problem.init_weights(np.random.default_rng(0)))


def _check(p, task):
    try:
        analysis.infer(p, _signature(task), stable_state=True)
    except analysis.ProgramTypeError as exc:
        raise UserError(f"program is not valid on task {task.task_id}: {exc}") from None


# -- verbs ---------------------------------------------------------------------

def cmd_search(args):
    if args.config:
        doc = json.loads(Path(args.config).read_text("utf-8"))
        cfg = evolution.SearchConfig.from_dict(doc["search"])
    else:
        task = _load_task(args.task)
        population, tournament_size = args.population, args.tournament
        if args.desk:
            population = population or task.search.get("population")
            tournament_size = tournament_size or task.search.get("tournament")
        mutation = program.MutationConfig(
            max_statements=args.max_statements, max_retries=args.max_retries,
            constants_only=args.mode == "constants",
        )
        cfg = evolution.SearchConfig(
            task=args.task, population=population or 1000, tournament=tournament_size or 2,
            budget=args.budget, seed=args.seed, restart=args.restart, mutation=mutation,
            repeats=args.repeats, seed_program=args.seed_program, mode=args.mode,
            batch=args.batch,
        )
    threads = _threads(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.resume:
        _write_json(out / "config.json", {"verb": "search", "search": cfg.to_dict(), "threads": threads})
    result = evolution.run_search(cfg, out, workers=threads, resume=args.resume)
    print(json.dumps({"best_hash": result.best.hash, "best_fitness": result.summary["best_fitness"],
                      "out": str(out)}))
    return 0


def cmd_eval(args):
    task = _load_task(args.task)
    p = _read_program(args.program)
    _check(p, task)
    scaled = task.at_level(args.level)
    f = tasks.evaluate_fitness(p, scaled, args.seed, args.repeats)
    print(json.dumps({"task": scaled.task_id, "hash": analysis.functional_hash(p), **f.to_json()}))
    return 0


def cmd_train(args):
    task = _load_task(args.task)
    records = []

    def log(step, loss, lr, update, w):
        records.append({
            "step": step, "loss": loss, "lr": lr,
            "update_norm": float(np.linalg.norm(flat(update))),
            "weight_norm": float(np.linalg.norm(flat(w))),
        })

    if args.program:
        p = _read_program(args.program)
        _check(p, task)
        w, status = tasks.train(p, task, args.seed, callback=log)
    else:
        hp = _hyperparams(args)
        w, status = optimizers.train_reference(args.optimizer, task, hp, args.seed, callback=log,
                                               ablation_beta=args.ablation_beta)
    metric = task.problem.metric(w, task.metric) if status == tasks.OK else None
    lines = "".join(json.dumps(r) + "\n" for r in records)
    if args.out:
        Path(args.out).write_text(lines, "utf-8")
    else:
        sys.stdout.write(lines)
    print(json.dumps({"status": status, "metric": task.metric, "value": metric}),
          file=sys.stderr if not args.out else sys.stdout)
    return 0


def _hyperparams(args):
    if args.preset:
        try:
            base, lion = optimizers.presets(args.preset)
        except KeyError as exc:
            raise UserError(str(exc.args[0])) from None
        hp = lion if args.optimizer in ("lion", "ablation") else base
    else:
        hp = optimizers.OptimizerHyperparams(
            beta1=0.9, beta2=0.99 if args.optimizer == "lion" else 0.999,
            lr=1e-4 if args.optimizer != "adamw" else 1e-3,
        )
    overrides = {k: v for k, v in (("lr", args.lr), ("weight_decay", args.wd),
                                   ("beta1", args.beta1), ("beta2", args.beta2)) if v is not None}
    try:
        return optimizers.OptimizerHyperparams(**{**hp.__dict__, **overrides})
    except ValueError as exc:
        raise UserError(str(exc)) from None


def cmd_simplify(args):
    task = _load_task(args.task)
    p = _read_program(args.program)
    _check(p, task)
    try:
        report = simplify.simplify(p, task, args.eps, args.seed)
    except simplify.SimplifyError as exc:
        raise UserError(str(exc)) from None
    doc = report.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", doc)
        (out / "simplified.prog").write_text(doc["program"], "utf-8")
    print(json.dumps(doc, indent=2))
    return 0


def cmd_strip(args):
    p = _read_program(args.program)
    sys.stdout.write(program.print_program(analysis.strip_redundant(p)))
    return 0


def cmd_hash(args):
    p = _read_program(args.program)
    print(analysis.functional_hash(p, canonical=not args.raw))
    return 0


def cmd_funnel(args):
    task = _load_task(args.task)
    candidates = []
    if args.run:
        import pickle
        ckpt = Path(args.run) / "population.ckpt"
        if not ckpt.exists():
            raise UserError(f"no checkpoint in {args.run}")
        with open(ckpt, "rb") as fh:
            state = pickle.load(fh)["state"]
        candidates += [ind.program for ind in evolution.top_programs(state, args.top_k)]
    candidates += [_read_program(f) for f in args.programs]
    baseline = _read_program(args.baseline)
    for c in candidates:
        _check(c, task)
    levels = tuple(args.levels.split(","))
    for lv in levels:
        if lv not in tasks.LEVEL_SCALE:
            raise UserError(f"unknown ladder level {lv!r}")
    result = tasks.funnel_select(candidates, task, baseline, levels, args.seed)
    doc = {"baseline": {lv: (f.to_json() if f else None) for lv, f in result["baseline"].items()}}
    for lv in levels:
        doc[lv] = [{"hash": analysis.functional_hash(c), **f.to_json()} for c, f in result[lv]]
    print(json.dumps(doc, indent=2))
    return 0


def cmd_estimate_space(args):
    try:
        print(program.estimate_space(args.functions, args.variables, args.arity, args.length))
    except ValueError as exc:
        raise UserError(str(exc)) from None
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="optimforge", description="Search for and inspect optimizer programs.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("search", help="run evolutionary (or baseline) program search")
    s.add_argument("--task", default="linreg")
    s.add_argument("--population", type=int, default=None, help="population size (default 1000)")
    s.add_argument("--tournament", type=int, default=None, help="tournament size (default 2)")
    s.add_argument("--desk", action="store_true", help="take unset population/tournament from the task config")
    s.add_argument("--budget", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=False, default="run")
    s.add_argument("--restart", default="none", help="none | from_initial:K | from_best_after:N")
    s.add_argument("--mode", choices=["evolution", "random", "constants"], default="evolution")
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--batch", type=int, default=1, help="children generated per population snapshot")
    s.add_argument("--seed-program", default="adamw")
    s.add_argument("--max-statements", type=int, default=program.MAX_STATEMENTS)
    s.add_argument("--max-retries", type=int, default=100)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--config", help="rerun from a config.json written by an earlier search")
    s.add_argument("--resume", action="store_true", help="continue from OUT/population.ckpt")
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="fitness of a program on a task")
    e.add_argument("program")
    e.add_argument("--task", default="linreg")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--level", default="A", choices=sorted(tasks.LEVEL_SCALE))
    e.add_argument("--repeats", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train", help="train a task and emit per-step metrics as JSONL")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--program")
    src.add_argument("--optimizer", choices=["adamw", "lion", "ablation"])
    t.add_argument("--task", default="linreg")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--preset", help=f"published setting: {', '.join(optimizers.PRESETS)}")
    t.add_argument("--lr", type=float)
    t.add_argument("--wd", type=float)
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--ablation-beta", type=float)
    t.add_argument("--out", help="metrics file (default stdout)")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("simplify", help="strip, prune and canonicalize a program")
    m.add_argument("program")
    m.add_argument("--task", default="mlp-blobs")
    m.add_argument("--eps", type=float, default=0.002)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out")
    m.set_defaults(func=cmd_simplify)

    r = sub.add_parser("strip", help="print a program without its dead statements")
    r.add_argument("program")
    r.set_defaults(func=cmd_strip)

    h = sub.add_parser("hash", help="print the functional hash of a program")
    h.add_argument("program")
    h.add_argument("--raw", action="store_true", help="do not sort commutative arguments")
    h.set_defaults(func=cmd_hash)

    f = sub.add_parser("funnel", help="filter candidates through larger tasks")
    f.add_argument("programs", nargs="*")
    f.add_argument("--run", help="search run directory to take candidates from")
    f.add_argument("--top-k", type=int, default=10)
    f.add_argument("--task", default="mlp-blobs")
    f.add_argument("--baseline", default="adamw")
    f.add_argument("--levels", default="A,B,C")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_funnel)

    x = sub.add_parser("estimate-space", help="rough size of the program space")
    x.add_argument("--functions", type=int, required=True)
    x.add_argument("--variables", type=int, required=True)
    x.add_argument("--arity", type=int, required=True)
    x.add_argument("--length", type=int, required=True)
    x.set_defaults(func=cmd_estimate_space)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UserError, program.ProgramError, analysis.ProgramTypeError,
            evolution.SearchError, json.JSONDecodeError) as exc:
        print(f"optimforge: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        # Bad values reaching config constructors, unreadable paths.
        print(f"optimforge: error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
